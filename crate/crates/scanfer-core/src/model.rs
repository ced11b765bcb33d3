//! The assembled two-branch network.
//!
//! A small configurable backbone (conv -> batch norm -> PReLU stages, stride
//! 2 each) exposes two tap points. The shallower tap feeds the local/global
//! attention branch: the map is split into a grid of patches, every patch and
//! the whole map go through one shared [`ScanBlock`], patch outputs are
//! average-pooled and reduced by a per-channel max into a local summary, the
//! global output is average-pooled into a global summary, and their
//! concatenation is classified. The deeper tap feeds the complementary
//! context branch: channel attention, a 2x2 block partition, per-block
//! average pooling, and one independent projection + classifier per block.
//! The two branch losses are mixed by a convex weight.

use crate::attention::{EcaBlock, ScanBlock};
use crate::layers::{prelu_slopes, BatchNorm2dLayer, Conv2dLayer, LinearLayer};
use crate::rng::Rng;
use crate::tensor::{invalid_err, shape_err, BnBatchStats, Mode, Padding, Tape, Tensor, TensorError, Var};
use crate::NUM_CLASSES;

/// One backbone stage: 3x3 `same` convolution at the given stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageConfig {
    pub channels: usize,
    pub stride: usize,
}

/// Backbone geometry: stage widths/strides plus the two tap indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub stages: Vec<StageConfig>,
    /// Stage whose output feeds the local/global attention branch.
    pub scan_tap: usize,
    /// Stage whose output feeds the complementary context branch.
    pub cci_tap: usize,
}

/// Channel and spatial dimensions at the two tap points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapDims {
    pub scan_channels: usize,
    pub scan_h: usize,
    pub scan_w: usize,
    pub cci_channels: usize,
    pub cci_h: usize,
    pub cci_w: usize,
}

impl BackboneConfig {
    /// Small configuration for fast, fully verifiable runs:
    /// 40x40 input, taps at 32@20x20 and 64@10x10.
    pub fn desk() -> Self {
        BackboneConfig {
            input_channels: 3,
            input_size: 40,
            stages: vec![
                StageConfig { channels: 32, stride: 2 },
                StageConfig { channels: 64, stride: 2 },
            ],
            scan_tap: 0,
            cci_tap: 1,
        }
    }

    /// Full-scale configuration matching the common ResNet-50 tap geometry:
    /// 224x224 input, taps at 512@28x28 and 1024@14x14.
    pub fn paper() -> Self {
        BackboneConfig {
            input_channels: 3,
            input_size: 224,
            stages: vec![
                StageConfig { channels: 64, stride: 2 },
                StageConfig { channels: 128, stride: 2 },
                StageConfig { channels: 512, stride: 2 },
                StageConfig { channels: 1024, stride: 2 },
            ],
            scan_tap: 2,
            cci_tap: 3,
        }
    }

    /// Validate the configuration and compute tap dimensions. The deep tap
    /// must sit exactly one stride-2 stage below the shallow tap.
    pub fn tap_dims(&self) -> Result<TapDims, TensorError> {
        if self.stages.is_empty() {
            return Err(invalid_err("backbone", "no stages configured"));
        }
        if self.scan_tap >= self.stages.len() || self.cci_tap >= self.stages.len() {
            return Err(invalid_err("backbone", "tap index out of range"));
        }
        if self.cci_tap <= self.scan_tap {
            return Err(invalid_err("backbone", "deep tap must come after the shallow tap"));
        }
        let mut size = self.input_size;
        let mut dims = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if stage.stride == 0 || stage.channels == 0 {
                return Err(invalid_err("backbone", "stage stride and channels must be positive"));
            }
            // 3x3 same convolution: out = ceil(size / stride)
            size = (size - 1) / stage.stride + 1;
            if size == 0 {
                return Err(invalid_err("backbone", "input too small for the stage stack"));
            }
            dims.push((stage.channels, size));
        }
        let (scan_channels, scan_size) = dims[self.scan_tap];
        let (cci_channels, cci_size) = dims[self.cci_tap];
        if cci_size * 2 != scan_size {
            return Err(invalid_err(
                "backbone",
                format!("deep tap must halve the shallow tap ({scan_size} -> {cci_size})"),
            ));
        }
        Ok(TapDims {
            scan_channels,
            scan_h: scan_size,
            scan_w: scan_size,
            cci_channels,
            cci_h: cci_size,
            cci_w: cci_size,
        })
    }
}

/// Full model configuration.
#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Local patch grid over the shallow tap; patch count m = rows * cols.
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Context block count k; must be a perfect square (laid out sqrt(k) x sqrt(k)).
    pub cci_blocks: usize,
    /// Convex mixing weight between the attention-branch loss and the
    /// context-branch loss.
    pub lambda: f64,
    pub num_classes: usize,
    /// Width of the per-block projection in the context branch.
    pub cci_embed_dim: usize,
    /// Explicit channel-attention kernel length (odd); adaptive when absent.
    pub eca_kernel: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::desk(),
            grid_rows: 5,
            grid_cols: 5,
            cci_blocks: 4,
            lambda: 0.2,
            num_classes: NUM_CLASSES,
            cci_embed_dim: 256,
            eca_kernel: None,
        }
    }
}

impl ModelConfig {
    pub fn patch_count(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    fn cci_grid(&self) -> Result<usize, TensorError> {
        let side = (self.cci_blocks as f64).sqrt().round() as usize;
        if side * side != self.cci_blocks || side == 0 {
            return Err(invalid_err(
                "model",
                format!("cci_blocks must be a positive perfect square, got {}", self.cci_blocks),
            ));
        }
        Ok(side)
    }

    pub fn validate(&self) -> Result<TapDims, TensorError> {
        let dims = self.backbone.tap_dims()?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid_err("model", format!("lambda {} outside [0,1]", self.lambda)));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(invalid_err("model", "patch grid must be non-empty"));
        }
        if self.grid_rows > dims.scan_h || self.grid_cols > dims.scan_w {
            return Err(invalid_err(
                "model",
                format!(
                    "patch grid {}x{} exceeds tap {}x{}",
                    self.grid_rows, self.grid_cols, dims.scan_h, dims.scan_w
                ),
            ));
        }
        let side = self.cci_grid()?;
        if side > dims.cci_h || side > dims.cci_w {
            return Err(invalid_err(
                "model",
                format!("context grid {side}x{side} exceeds tap {}x{}", dims.cci_h, dims.cci_w),
            ));
        }
        if self.num_classes == 0 || self.cci_embed_dim == 0 {
            return Err(invalid_err("model", "class count and embed dim must be positive"));
        }
        Ok(dims)
    }
}

/// One backbone stage's parameters.
#[derive(Clone, Debug)]
pub struct Stage {
    pub conv: Conv2dLayer,
    pub bn: BatchNorm2dLayer,
    pub prelu_slope: Tensor,
}

/// Which batch-norm layer a train-mode statistics update belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BnTarget {
    Stage(usize),
    Scan,
}

struct BnUpdate {
    target: BnTarget,
    stats: BnBatchStats,
}

/// The assembled two-branch network.
#[derive(Clone, Debug)]
pub struct FerModel {
    pub config: ModelConfig,
    pub dims: TapDims,
    pub stages: Vec<Stage>,
    pub scan: ScanBlock,
    pub eca: EcaBlock,
    pub scan_head: LinearLayer,
    pub cci_proj: Vec<LinearLayer>,
    pub cci_head: Vec<LinearLayer>,
}

/// Everything a forward pass produces. Loss terms are present when labels
/// were supplied.
pub struct ForwardOutput {
    /// Classifier logits of the attention branch: `(K)` or `(N,K)`.
    pub scan_logits: Var,
    /// Per-block classifier logits of the context branch.
    pub cci_logits: Vec<Var>,
    /// Per-channel max over the patch descriptors.
    pub local_summary: Var,
    /// Pooled global attention descriptor.
    pub global_summary: Var,
    /// Pooled per-block context features.
    pub cci_features: Vec<Var>,
    /// Deep tap activation (input of the context branch), kept for Grad-CAM.
    pub deep_activation: Var,
    pub loss: Option<LossTerms>,
}

/// Scalar loss nodes of one forward pass.
pub struct LossTerms {
    /// Attention-branch cross-entropy.
    pub scan_loss: Var,
    /// One cross-entropy per context block.
    pub block_losses: Vec<Var>,
    /// Sum of the block losses.
    pub cci_loss: Var,
    /// `lambda * scan_loss + (1 - lambda) * cci_loss`.
    pub total: Var,
}

impl FerModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self, TensorError> {
        let dims = config.validate()?;
        let mut stages = Vec::with_capacity(config.backbone.stages.len());
        let mut in_channels = config.backbone.input_channels;
        for stage in &config.backbone.stages {
            stages.push(Stage {
                // batch norm follows immediately, so the conv is unbiased
                conv: Conv2dLayer::new_unbiased(
                    in_channels,
                    stage.channels,
                    3,
                    stage.stride,
                    Padding::Same,
                    rng,
                ),
                bn: BatchNorm2dLayer::new(stage.channels),
                prelu_slope: prelu_slopes(stage.channels),
            });
            in_channels = stage.channels;
        }
        let scan = ScanBlock::new(dims.scan_channels, rng);
        let eca = EcaBlock::new(dims.cci_channels, config.eca_kernel, rng)?;
        let scan_head = LinearLayer::new(2 * dims.scan_channels, config.num_classes, rng);
        let blocks = config.cci_blocks;
        let mut cci_proj = Vec::with_capacity(blocks);
        let mut cci_head = Vec::with_capacity(blocks);
        for _ in 0..blocks {
            cci_proj.push(LinearLayer::new(dims.cci_channels, config.cci_embed_dim, rng));
            cci_head.push(LinearLayer::new(config.cci_embed_dim, config.num_classes, rng));
        }
        Ok(FerModel {
            config,
            dims,
            stages,
            scan,
            eca,
            scan_head,
            cci_proj,
            cci_head,
        })
    }

    pub fn input_size(&self) -> usize {
        self.config.backbone.input_size
    }

    /// Train-mode forward over a `(N,3,S,S)` batch; batch-norm running
    /// statistics are updated in execution order.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        images: &Tensor,
        labels: &[usize],
    ) -> Result<ForwardOutput, TensorError> {
        let mut updates = Vec::new();
        let images = tape.leaf(images);
        let out = self.forward_inner(tape, images, Some(labels), Mode::Train, Some(&mut updates))?;
        self.apply_bn_updates(&updates);
        Ok(out)
    }

    /// Eval-mode forward over `(3,S,S)` or `(N,3,S,S)`; running statistics
    /// are read, never written.
    pub fn forward_eval(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        labels: Option<&[usize]>,
    ) -> Result<ForwardOutput, TensorError> {
        let images = tape.leaf(images);
        self.forward_inner(tape, images, labels, Mode::Eval, None)
    }

    /// Forward with train-mode math but no side effects, for gradient
    /// verification.
    pub fn forward_detached(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        labels: &[usize],
        mode: Mode,
    ) -> Result<ForwardOutput, TensorError> {
        let images = tape.leaf(images);
        self.forward_inner(tape, images, Some(labels), mode, None)
    }

    fn check_input(&self, tape: &Tape, images: Var) -> Result<usize, TensorError> {
        let s = self.input_size();
        let c = self.config.backbone.input_channels;
        match tape.shape(images) {
            [ic, h, w] if *ic == c && *h == s && *w == s => Ok(1),
            [n, ic, h, w] if *ic == c && *h == s && *w == s => Ok(*n),
            other => Err(shape_err(
                "model_forward",
                format!("expected ({c},{s},{s}) or (N,{c},{s},{s}), got {other:?}"),
            )),
        }
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        images: Var,
        labels: Option<&[usize]>,
        mode: Mode,
        mut sink: Option<&mut Vec<BnUpdate>>,
    ) -> Result<ForwardOutput, TensorError> {
        let batch = self.check_input(tape, images)?;
        if let Some(labels) = labels {
            if labels.len() != batch {
                return Err(invalid_err(
                    "model_forward",
                    format!("{} labels for a batch of {batch}", labels.len()),
                ));
            }
        }

        // Backbone to the two taps.
        let mut x = images;
        let mut scan_feat = None;
        let mut cci_feat = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let conv = stage.conv.forward(tape, x)?;
            let (normed, stats) = stage.bn.forward(tape, conv, mode)?;
            if let (Some(sink), Some(stats)) = (sink.as_deref_mut(), stats) {
                sink.push(BnUpdate {
                    target: BnTarget::Stage(i),
                    stats,
                });
            }
            let slope = tape.param(&stage.prelu_slope);
            x = tape.prelu(normed, slope)?;
            if i == self.config.backbone.scan_tap {
                scan_feat = Some(x);
            }
            if i == self.config.backbone.cci_tap {
                cci_feat = Some(x);
            }
        }
        let scan_feat = scan_feat.expect("validated tap index");
        let cci_feat = cci_feat.expect("validated tap index");

        let (local_summary, global_summary, scan_logits) =
            self.local_global_branch(tape, scan_feat, mode, &mut sink)?;
        let (cci_features, cci_logits) = self.cci_branch(tape, cci_feat)?;

        let loss = match labels {
            Some(labels) => {
                let scan_loss = tape.cross_entropy(scan_logits, labels)?;
                let mut block_losses = Vec::with_capacity(cci_logits.len());
                for &logits in &cci_logits {
                    block_losses.push(tape.cross_entropy(logits, labels)?);
                }
                let (cci_loss, total) =
                    combine_losses(tape, scan_loss, &block_losses, self.config.lambda)?;
                Some(LossTerms {
                    scan_loss,
                    block_losses,
                    cci_loss,
                    total,
                })
            }
            None => None,
        };

        Ok(ForwardOutput {
            scan_logits,
            cci_logits,
            local_summary,
            global_summary,
            cci_features,
            deep_activation: cci_feat,
            loss,
        })
    }

    /// Patch and whole-map passes through the shared attention block, pooled
    /// into the local and global summaries, then classified.
    fn local_global_branch(
        &self,
        tape: &mut Tape,
        scan_feat: Var,
        mode: Mode,
        sink: &mut Option<&mut Vec<BnUpdate>>,
    ) -> Result<(Var, Var, Var), TensorError> {
        let (h, w) = spatial_dims(tape.shape(scan_feat));
        let rows = partition_spans(h, self.config.grid_rows)?;
        let cols = partition_spans(w, self.config.grid_cols)?;

        let mut descriptors = Vec::with_capacity(self.config.patch_count());
        for &(y0, ph) in &rows {
            for &(x0, pw) in &cols {
                let patch = tape.crop(scan_feat, y0, x0, ph, pw)?;
                let out = self.scan.forward(tape, patch, mode)?;
                if let (Some(sink), Some(stats)) = (sink.as_deref_mut(), out.bn_stats) {
                    sink.push(BnUpdate {
                        target: BnTarget::Scan,
                        stats,
                    });
                }
                descriptors.push(tape.gap_spatial(out.gated)?);
            }
        }
        let local_summary = tape.max_over_set(&descriptors)?;

        let global_pass = self.scan.forward(tape, scan_feat, mode)?;
        if let (Some(sink), Some(stats)) = (sink.as_deref_mut(), global_pass.bn_stats) {
            sink.push(BnUpdate {
                target: BnTarget::Scan,
                stats,
            });
        }
        let global_summary = tape.gap_spatial(global_pass.gated)?;

        let both = tape.concat_features(local_summary, global_summary)?;
        let logits = self.scan_head.forward(tape, both)?;
        Ok((local_summary, global_summary, logits))
    }

    /// Channel attention, block partition, per-block pooling and independent
    /// projection + classifier pairs.
    fn cci_branch(&self, tape: &mut Tape, cci_feat: Var) -> Result<(Vec<Var>, Vec<Var>), TensorError> {
        let side = self.config.cci_grid()?;
        let (h, w) = spatial_dims(tape.shape(cci_feat));
        if h < side || w < side {
            return Err(shape_err(
                "cci_branch",
                format!("cannot split {h}x{w} into a {side}x{side} grid"),
            ));
        }
        let gated = self.eca.forward(tape, cci_feat)?;
        let rows = partition_spans(h, side)?;
        let cols = partition_spans(w, side)?;

        let mut features = Vec::with_capacity(self.config.cci_blocks);
        let mut logits = Vec::with_capacity(self.config.cci_blocks);
        for &(y0, bh) in &rows {
            for &(x0, bw) in &cols {
                let index = features.len();
                let block = tape.crop(gated, y0, x0, bh, bw)?;
                let pooled = tape.gap_spatial(block)?;
                let embedded = self.cci_proj[index].forward(tape, pooled)?;
                logits.push(self.cci_head[index].forward(tape, embedded)?);
                features.push(pooled);
            }
        }
        Ok((features, logits))
    }

    fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for update in updates {
            match update.target {
                BnTarget::Stage(i) => self.stages[i].bn.apply_update(&update.stats),
                BnTarget::Scan => self.scan.bn.apply_update(&update.stats),
            }
        }
    }

    /// Predicted class for one `(3,S,S)` image: argmax of the attention-branch
    /// logits, lowest index on ties.
    pub fn predict(&self, image: &Tensor) -> Result<usize, TensorError> {
        let mut tape = Tape::new();
        let out = self.forward_eval(&mut tape, image, None)?;
        Ok(argmax(tape.value(out.scan_logits)))
    }

    /// Trainable tensors in a fixed, stable order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            out.push((format!("backbone.{i}.conv.weight"), &stage.conv.weight));
            out.push((format!("backbone.{i}.bn.gamma"), &stage.bn.gamma));
            out.push((format!("backbone.{i}.bn.beta"), &stage.bn.beta));
            out.push((format!("backbone.{i}.prelu"), &stage.prelu_slope));
        }
        out.push(("scan.conv.weight".into(), &self.scan.conv.weight));
        out.push((
            "scan.conv.bias".into(),
            self.scan.conv.bias.as_ref().expect("attention conv is biased"),
        ));
        out.push(("scan.prelu".into(), &self.scan.prelu_slope));
        out.push(("scan.bn.gamma".into(), &self.scan.bn.gamma));
        out.push(("scan.bn.beta".into(), &self.scan.bn.beta));
        out.push(("eca.kernel".into(), &self.eca.kernel));
        out.push(("scan_head.weight".into(), &self.scan_head.weight));
        out.push(("scan_head.bias".into(), &self.scan_head.bias));
        for (i, (proj, head)) in self.cci_proj.iter().zip(&self.cci_head).enumerate() {
            out.push((format!("cci.{i}.proj.weight"), &proj.weight));
            out.push((format!("cci.{i}.proj.bias"), &proj.bias));
            out.push((format!("cci.{i}.head.weight"), &head.weight));
            out.push((format!("cci.{i}.head.bias"), &head.bias));
        }
        out
    }

    /// Mutable view of the trainable tensors, same order as `named_params`.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.conv.weight"), &mut stage.conv.weight));
            out.push((format!("backbone.{i}.bn.gamma"), &mut stage.bn.gamma));
            out.push((format!("backbone.{i}.bn.beta"), &mut stage.bn.beta));
            out.push((format!("backbone.{i}.prelu"), &mut stage.prelu_slope));
        }
        out.push(("scan.conv.weight".into(), &mut self.scan.conv.weight));
        out.push((
            "scan.conv.bias".into(),
            self.scan.conv.bias.as_mut().expect("attention conv is biased"),
        ));
        out.push(("scan.prelu".into(), &mut self.scan.prelu_slope));
        out.push(("scan.bn.gamma".into(), &mut self.scan.bn.gamma));
        out.push(("scan.bn.beta".into(), &mut self.scan.bn.beta));
        out.push(("eca.kernel".into(), &mut self.eca.kernel));
        out.push(("scan_head.weight".into(), &mut self.scan_head.weight));
        out.push(("scan_head.bias".into(), &mut self.scan_head.bias));
        for (i, (proj, head)) in self.cci_proj.iter_mut().zip(&mut self.cci_head).enumerate() {
            out.push((format!("cci.{i}.proj.weight"), &mut proj.weight));
            out.push((format!("cci.{i}.proj.bias"), &mut proj.bias));
            out.push((format!("cci.{i}.head.weight"), &mut head.weight));
            out.push((format!("cci.{i}.head.bias"), &mut head.bias));
        }
        out
    }

    /// Batch-norm running statistics in a fixed order.
    pub fn named_buffers(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            out.push((format!("backbone.{i}.bn.running_mean"), &stage.bn.running_mean));
            out.push((format!("backbone.{i}.bn.running_var"), &stage.bn.running_var));
        }
        out.push(("scan.bn.running_mean".into(), &self.scan.bn.running_mean));
        out.push(("scan.bn.running_var".into(), &self.scan.bn.running_var));
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = Vec::new();
        for (i, stage) in self.stages.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.bn.running_mean"), &mut stage.bn.running_mean));
            out.push((format!("backbone.{i}.bn.running_var"), &mut stage.bn.running_var));
        }
        out.push(("scan.bn.running_mean".into(), &mut self.scan.bn.running_mean));
        out.push(("scan.bn.running_var".into(), &mut self.scan.bn.running_var));
        out
    }

    /// Pull gradients accumulated on a tape back into the parameter tensors.
    pub fn accumulate_grads_from(&mut self, tape: &Tape) {
        for (_, tensor) in self.named_params_mut() {
            if let Some(id) = tensor.param_id() {
                if let Some(grad) = tape.param_grad(id) {
                    let grad = grad.to_vec();
                    tensor.accumulate_grad(&grad);
                }
            }
        }
    }
}

/// `cci = sum(block_losses)`, `total = lambda * scan + (1 - lambda) * cci`.
pub fn combine_losses(
    tape: &mut Tape,
    scan_loss: Var,
    block_losses: &[Var],
    lambda: f64,
) -> Result<(Var, Var), TensorError> {
    let first = *block_losses
        .first()
        .ok_or_else(|| invalid_err("combine_losses", "no block losses"))?;
    let mut cci = first;
    for &b in &block_losses[1..] {
        cci = tape.add(cci, b)?;
    }
    let weighted_scan = tape.scale(scan_loss, lambda)?;
    let weighted_cci = tape.scale(cci, 1.0 - lambda)?;
    let total = tape.add(weighted_scan, weighted_cci)?;
    Ok((cci, total))
}

/// One parameter tensor's entry in the full-model gradient report.
#[derive(Clone, Debug)]
pub struct ParamGradCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub elements_checked: usize,
}

/// Verify the tape gradient of the full training loss against central
/// finite differences, parameter tensor by parameter tensor.
///
/// Uses train-mode math without touching running statistics. Large tensors
/// are subsampled to `max_elements_per_tensor` seeded element picks; every
/// tensor is covered. Returns the per-tensor maximum of
/// `|analytic - numeric| / (|analytic| + 1e-8)`.
pub fn model_grad_check(
    model: &FerModel,
    images: &Tensor,
    labels: &[usize],
    max_elements_per_tensor: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<ParamGradCheck>, TensorError> {
    model_grad_check_with_offset(model, images, labels, max_elements_per_tensor, step, seed, 0.0)
}

/// Negative-control variant: every analytic gradient is offset by `delta`
/// before comparison, simulating a broken backward pass. The suite must
/// flag a nonzero offset; only test harnesses should pass one.
#[allow(clippy::too_many_arguments)]
pub fn model_grad_check_with_offset(
    model: &FerModel,
    images: &Tensor,
    labels: &[usize],
    max_elements_per_tensor: usize,
    step: f64,
    seed: u64,
    analytic_offset: f64,
) -> Result<Vec<ParamGradCheck>, TensorError> {
    if max_elements_per_tensor == 0 || step <= 0.0 {
        return Err(invalid_err("model_grad_check", "need a positive step and element budget"));
    }
    let mut tape = Tape::new();
    let out = model.forward_detached(&mut tape, images, labels, Mode::Train)?;
    let loss = out.loss.as_ref().expect("labels were supplied").total;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = model
        .named_params()
        .iter()
        .map(|(name, t)| {
            let id = t.param_id().expect("model parameters carry ids");
            tape.param_grad(id)
                .unwrap_or_else(|| panic!("{name} was not mounted"))
                .to_vec()
        })
        .collect();

    let loss_value = |m: &FerModel| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let o = m.forward_detached(&mut t, images, labels, Mode::Train)?;
        Ok(t.scalar_value(o.loss.as_ref().expect("labels were supplied").total))
    };

    let mut work = model.clone();
    let mut rng = Rng::new(seed);
    let mut report = Vec::new();
    let count = analytic.len();
    for ti in 0..count {
        let (name, len) = {
            let params = work.named_params();
            (params[ti].0.clone(), params[ti].1.len())
        };
        let mut picks: Vec<usize> = (0..len).collect();
        if len > max_elements_per_tensor {
            rng.shuffle(&mut picks);
            picks.truncate(max_elements_per_tensor);
            picks.sort_unstable();
        }
        let mut max_rel: f64 = 0.0;
        for &e in &picks {
            let orig = work.named_params()[ti].1.data()[e];
            work.named_params_mut()[ti].1.data_mut()[e] = orig + step;
            let plus = loss_value(&work)?;
            work.named_params_mut()[ti].1.data_mut()[e] = orig - step;
            let minus = loss_value(&work)?;
            work.named_params_mut()[ti].1.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti][e] + analytic_offset;
            max_rel = max_rel.max((a - numeric).abs() / (a.abs() + 1e-8));
        }
        report.push(ParamGradCheck {
            name,
            max_rel_err: max_rel,
            elements_checked: picks.len(),
        });
    }
    Ok(report)
}

/// Index of the largest value; lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn spatial_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [_, h, w] => (*h, *w),
        [_, _, h, w] => (*h, *w),
        _ => unreachable!("spatial_dims called on non-spatial shape"),
    }
}

/// Split `extent` into `parts` contiguous spans `(offset, length)`; when the
/// division is uneven, earlier spans take the larger share (ceil-first).
pub fn partition_spans(extent: usize, parts: usize) -> Result<Vec<(usize, usize)>, TensorError> {
    if parts == 0 {
        return Err(invalid_err("partition", "parts must be positive"));
    }
    if parts > extent {
        return Err(invalid_err(
            "partition",
            format!("cannot split extent {extent} into {parts} parts"),
        ));
    }
    let base = extent / parts;
    let remainder = extent % parts;
    let mut spans = Vec::with_capacity(parts);
    let mut offset = 0;
    for i in 0..parts {
        let len = base + usize::from(i < remainder);
        spans.push((offset, len));
        offset += len;
    }
    Ok(spans)
}

/// Split a `(C,H,W)` map into a `rows x cols` grid of non-overlapping blocks
/// (row-major order) that tile it exactly.
pub fn partition(map: &Tensor, rows: usize, cols: usize) -> Result<Vec<Tensor>, TensorError> {
    let (channels, h, w) = match map.shape() {
        [c, h, w] => (*c, *h, *w),
        other => return Err(shape_err("partition", format!("expected (C,H,W), got {other:?}"))),
    };
    let row_spans = partition_spans(h, rows)?;
    let col_spans = partition_spans(w, cols)?;
    let data = map.data();
    let mut blocks = Vec::with_capacity(rows * cols);
    for &(y0, bh) in &row_spans {
        for &(x0, bw) in &col_spans {
            let mut block = Vec::with_capacity(channels * bh * bw);
            for c in 0..channels {
                let plane = &data[c * h * w..][..h * w];
                for y in y0..y0 + bh {
                    block.extend_from_slice(&plane[y * w + x0..y * w + x0 + bw]);
                }
            }
            blocks.push(Tensor::new(&[channels, bh, bw], block)?);
        }
    }
    Ok(blocks)
}
