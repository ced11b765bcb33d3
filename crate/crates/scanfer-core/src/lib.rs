//! Desk-scale facial expression recognition with two attention branches.
//!
//! Everything is built on a small reverse-mode autodiff tape over dense f64
//! tensors: a spatio-channel attention block (per-channel, per-position
//! weights) applied to local patches and the whole feature map, and a
//! complementary branch that weighs channels with efficient channel
//! attention, splits the map into blocks and classifies each block
//! independently. The two branch losses are mixed with a convex weight.
//!
//! Modules:
//! - [`tensor`]: dense tensors, the autodiff [`tensor::Tape`], gradient checking
//! - [`layers`]: conv / batch-norm / linear parameter containers
//! - [`attention`]: the SCAN and ECA attention operators
//! - [`model`]: the assembled two-branch network and its losses
//! - [`optim`]: SGD with momentum, the per-epoch schedule, `fit`
//! - [`data`]: manifests, PPM decoding, augmentation, imbalance handling
//! - [`metrics`]: confusion matrix, macro F1, the 0.67/0.33 overall score
//! - [`explain`]: Grad-CAM heatmaps from the deep tap point

// numeric kernels are written as plain indexed loops on purpose
#![allow(clippy::needless_range_loop)]

pub mod attention;
pub mod data;
pub mod explain;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use rng::Rng;
pub use tensor::{Mode, Tape, Tensor, TensorError, Var};

/// Number of expression classes.
pub const NUM_CLASSES: usize = 7;

/// Fixed label index map.
pub const LABEL_NAMES: [&str; NUM_CLASSES] = [
    "neutral",
    "anger",
    "disgust",
    "fear",
    "happiness",
    "sadness",
    "surprise",
];
