//! The two attention operators.
//!
//! [`ScanBlock`] produces one weight per channel per spatial position through
//! conv -> PReLU -> batch norm -> sigmoid and gates its input elementwise, so
//! outputs are always attenuated copies of the inputs. One block instance is
//! shared across all local patches and the global pass at a tap point.
//!
//! [`EcaBlock`] is channel-only attention: spatial average pooling to a
//! channel descriptor, a 1-D `same` convolution across channels (no bias), a
//! sigmoid, and a per-channel rescale of the input. The kernel length adapts
//! to the channel count.

use crate::layers::{prelu_slopes, BatchNorm2dLayer, Conv2dLayer};
use crate::rng::Rng;
use crate::tensor::{shape_err, BnBatchStats, Mode, Padding, Tape, Tensor, TensorError, Var};

/// Spatio-channel attention block: a channel-preserving 3x3 `same`
/// convolution, per-channel PReLU, batch norm, sigmoid, then elementwise
/// gating of the input.
#[derive(Clone, Debug)]
pub struct ScanBlock {
    pub conv: Conv2dLayer,
    pub prelu_slope: Tensor,
    pub bn: BatchNorm2dLayer,
    pub channels: usize,
}

/// Result of one SCAN pass.
pub struct ScanOutput {
    /// Attention weights, strictly inside (0,1).
    pub weights: Var,
    /// Input gated by the weights.
    pub gated: Var,
    /// Batch statistics from the train-mode batch norm pass.
    pub bn_stats: Option<BnBatchStats>,
}

impl ScanBlock {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        ScanBlock {
            conv: Conv2dLayer::new(channels, channels, 3, 1, Padding::Same, rng),
            prelu_slope: prelu_slopes(channels),
            bn: BatchNorm2dLayer::new(channels),
            channels,
        }
    }

    /// Compute attention weights and the gated map for a `(C,H,W)` or
    /// `(N,C,H,W)` input whose channel count matches the block.
    pub fn forward(&self, tape: &mut Tape, input: Var, mode: Mode) -> Result<ScanOutput, TensorError> {
        let shape = tape.shape(input);
        let channels = match shape {
            [c, _, _] => *c,
            [_, c, _, _] => *c,
            other => return Err(shape_err("scan_forward", format!("input rank {other:?}"))),
        };
        if channels != self.channels {
            return Err(shape_err(
                "scan_forward",
                format!("input has {channels} channels, block expects {}", self.channels),
            ));
        }
        let conv = self.conv.forward(tape, input)?;
        let slope = tape.param(&self.prelu_slope);
        let act = tape.prelu(conv, slope)?;
        let (normed, bn_stats) = self.bn.forward(tape, act, mode)?;
        let weights = tape.sigmoid(normed)?;
        let gated = tape.mul(input, weights)?;
        Ok(ScanOutput {
            weights,
            gated,
            bn_stats,
        })
    }
}

/// Adaptive kernel length for channel attention: `floor(log2(C)/gamma +
/// b/gamma)`, bumped to the next odd integer when even, at least 1.
pub fn eca_kernel_size(channels: usize, gamma: f64, b: f64) -> usize {
    debug_assert!(channels >= 1);
    let t = ((channels as f64).log2() / gamma + b / gamma).abs().floor() as usize;
    let k = if t % 2 == 0 { t + 1 } else { t };
    k.max(1)
}

/// Efficient channel attention block.
#[derive(Clone, Debug)]
pub struct EcaBlock {
    /// 1-D convolution weights over the channel axis; odd length, no bias.
    pub kernel: Tensor,
}

impl EcaBlock {
    /// Build with the adaptive kernel size for `channels` (gamma=2, b=1),
    /// or an explicit odd override.
    pub fn new(channels: usize, kernel_override: Option<usize>, rng: &mut Rng) -> Result<Self, TensorError> {
        let k = match kernel_override {
            Some(k) => {
                if k % 2 == 0 || k == 0 {
                    return Err(crate::tensor::invalid_err(
                        "eca",
                        format!("kernel length must be odd and positive, got {k}"),
                    ));
                }
                k
            }
            None => eca_kernel_size(channels, 2.0, 1.0),
        };
        let bound = (6.0 / (2 * k) as f64).sqrt();
        Ok(EcaBlock {
            kernel: Tensor::uniform(&[k], -bound, bound, rng).into_parameter(),
        })
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.len()
    }

    /// Rescale each channel of a `(C,H,W)` or `(N,C,H,W)` map by a weight
    /// computed from the pooled channel descriptor. The weight is constant
    /// over spatial positions.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var, TensorError> {
        let descriptor = tape.gap_spatial(input)?;
        let kernel = tape.param(&self.kernel);
        let mixed = tape.conv1d_channels(descriptor, kernel)?;
        let weights = tape.sigmoid(mixed)?;
        tape.scale_channels(input, weights)
    }
}
