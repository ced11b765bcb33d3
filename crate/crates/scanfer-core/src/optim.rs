//! SGD with momentum, per-epoch learning-rate decay, and the training loop.
//!
//! Two parameter groups: backbone tensors train at one rate, attention
//! blocks and heads at another. Weight decay applies to convolution and
//! linear weights only, never to biases, batch-norm parameters or PReLU
//! slopes. The update per parameter is
//! `v <- momentum * v + g + wd * theta; theta <- theta - lr * v`.

use crate::data::{augment, stack_samples, AugmentPolicy, Sample, WeightedSampler};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{argmax, FerModel};
use crate::rng::Rng;
use crate::tensor::{invalid_err, Tape, TensorError};

#[derive(Clone, Copy, Debug)]
pub struct SgdConfig {
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate factor applied once per epoch.
    pub lr_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr_backbone: 1e-4,
            lr_heads: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-3,
            lr_decay: 0.95,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid_err("sgd", format!("momentum {} outside [0,1)", self.momentum)));
        }
        if self.lr_backbone <= 0.0 || self.lr_heads <= 0.0 {
            return Err(invalid_err("sgd", "learning rates must be positive"));
        }
        if self.lr_decay <= 0.0 {
            return Err(invalid_err("sgd", "lr decay factor must be positive"));
        }
        Ok(())
    }
}

/// Learning rate after `epoch` decay steps: `lr0 * decay^epoch`.
pub fn lr_at_epoch(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// One heavy-ball update on a flat parameter:
/// `v <- momentum * v + g + wd * theta; theta <- theta - lr * v`.
pub fn sgd_update(
    theta: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert!(theta.len() == grad.len() && theta.len() == velocity.len());
    for ((t, &g), v) in theta.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *t;
        *t -= lr * *v;
    }
}

fn in_backbone_group(name: &str) -> bool {
    name.starts_with("backbone.")
}

fn decay_applies(name: &str) -> bool {
    name.ends_with(".weight") || name == "eca.kernel"
}

/// Optimizer state: per-parameter velocities (aligned with the model's
/// parameter order) and the current epoch driving the schedule.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub config: SgdConfig,
    pub epoch: usize,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Result<Self, TensorError> {
        config.validate()?;
        Ok(SgdState {
            config,
            epoch: 0,
            velocity: Vec::new(),
        })
    }

    pub fn lr_backbone(&self) -> f64 {
        lr_at_epoch(self.config.lr_backbone, self.config.lr_decay, self.epoch)
    }

    pub fn lr_heads(&self) -> f64 {
        lr_at_epoch(self.config.lr_heads, self.config.lr_decay, self.epoch)
    }

    /// Apply one SGD step to every parameter, consuming its gradient.
    /// Fails if any trainable parameter is missing a gradient.
    pub fn step(&mut self, model: &mut FerModel) -> Result<(), TensorError> {
        let (lr_backbone, lr_heads) = (self.lr_backbone(), self.lr_heads());
        let momentum = self.config.momentum;
        let wd = self.config.weight_decay;
        let mut params = model.named_params_mut();
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(invalid_err("sgd_step", "optimizer state does not match the model"));
        }
        for (i, (name, tensor)) in params.iter_mut().enumerate() {
            let grad = tensor
                .grad()
                .ok_or_else(|| invalid_err("sgd_step", format!("missing gradient for {name}")))?
                .to_vec();
            let lr = if in_backbone_group(name) { lr_backbone } else { lr_heads };
            let wd = if decay_applies(name) { wd } else { 0.0 };
            sgd_update(tensor.data_mut(), &grad, &mut self.velocity[i], lr, momentum, wd);
            tensor.clear_grad();
        }
        Ok(())
    }

    /// Velocities keyed by parameter name, for checkpointing.
    pub fn velocity_snapshot(&self, model: &FerModel) -> Vec<(String, Vec<f64>)> {
        model
            .named_params()
            .iter()
            .zip(&self.velocity)
            .map(|((name, _), v)| (name.clone(), v.clone()))
            .collect()
    }

    /// Restore velocities saved by `velocity_snapshot`.
    pub fn restore_velocity(
        &mut self,
        model: &FerModel,
        saved: &[(String, Vec<f64>)],
    ) -> Result<(), TensorError> {
        let params = model.named_params();
        let mut velocity = Vec::with_capacity(params.len());
        for (name, tensor) in &params {
            let found = saved
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| invalid_err("sgd", format!("missing velocity for {name}")))?;
            if found.1.len() != tensor.len() {
                return Err(invalid_err("sgd", format!("velocity size mismatch for {name}")));
            }
            velocity.push(found.1.clone());
        }
        self.velocity = velocity;
        Ok(())
    }
}

/// Mean loss terms and train accuracy of one epoch.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub loss: f64,
    pub scan_loss: f64,
    pub cci_loss: f64,
    pub train_accuracy: f64,
    pub batches: usize,
}

/// One epoch: `ceil(N / batch)` batches drawn from the weighted sampler;
/// each batch runs forward (train mode), backward and one SGD step.
pub fn train_epoch(
    model: &mut FerModel,
    samples: &[Sample],
    sampler: &WeightedSampler,
    batch_size: usize,
    augment_policy: Option<&AugmentPolicy>,
    state: &mut SgdState,
    rng: &mut Rng,
) -> Result<EpochStats, TensorError> {
    if samples.is_empty() {
        return Err(invalid_err("train_epoch", "empty dataset"));
    }
    if batch_size == 0 {
        return Err(invalid_err("train_epoch", "batch size must be positive"));
    }
    let batches = samples.len().div_ceil(batch_size);
    let mut sum_loss = 0.0;
    let mut sum_scan = 0.0;
    let mut sum_cci = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;

    for _ in 0..batches {
        let indices = sampler.draw(batch_size, rng);
        let drawn: Vec<Sample> = match augment_policy {
            Some(policy) => indices
                .iter()
                .map(|&i| augment(&samples[i], policy, rng))
                .collect(),
            None => indices.iter().map(|&i| samples[i].clone()).collect(),
        };
        let refs: Vec<&Sample> = drawn.iter().collect();
        let (images, labels) = stack_samples(&refs).map_err(|e| invalid_err("train_epoch", e.to_string()))?;

        let mut tape = Tape::new();
        let out = model.forward_train(&mut tape, &images, &labels)?;
        let loss = out.loss.as_ref().expect("labels were supplied");
        sum_loss += tape.scalar_value(loss.total);
        sum_scan += tape.scalar_value(loss.scan_loss);
        sum_cci += tape.scalar_value(loss.cci_loss);

        let logits = tape.value(out.scan_logits);
        let classes = model.config.num_classes;
        for (row, &label) in labels.iter().enumerate() {
            if argmax(&logits[row * classes..(row + 1) * classes]) == label {
                correct += 1;
            }
        }
        seen += labels.len();

        tape.backward(loss.total)?;
        model.accumulate_grads_from(&tape);
        state.step(model)?;
    }

    Ok(EpochStats {
        epoch: state.epoch,
        lr_backbone: state.lr_backbone(),
        lr_heads: state.lr_heads(),
        loss: sum_loss / batches as f64,
        scan_loss: sum_scan / batches as f64,
        cci_loss: sum_cci / batches as f64,
        train_accuracy: correct as f64 / seen as f64,
        batches,
    })
}

/// Everything `fit` needs beyond the datasets.
#[derive(Clone, Debug)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    pub augment: Option<AugmentPolicy>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 20,
            batch_size: 64,
            sgd: SgdConfig::default(),
            augment: Some(AugmentPolicy::default()),
        }
    }
}

/// One epoch's line in the training history.
#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub stats: EpochStats,
    pub val_macro_f1: f64,
    pub val_accuracy: f64,
    pub val_overall: f64,
}

pub struct FitResult {
    pub history: Vec<EpochRecord>,
    /// Model state with the best validation overall score (ties keep the
    /// earlier epoch); the final state when no validation set was given.
    pub best: FerModel,
    pub best_epoch: Option<usize>,
    pub best_overall: f64,
    pub final_state: SgdState,
}

/// Train for a fixed number of epochs with the per-epoch learning-rate
/// schedule, evaluating the validation set after each epoch and keeping the
/// best checkpoint by overall score.
pub fn fit(
    model: &mut FerModel,
    train: &[Sample],
    val: &[Sample],
    config: &FitConfig,
    rng: &mut Rng,
) -> Result<FitResult, TensorError> {
    let mut state = SgdState::new(config.sgd)?;
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let sampler = if train.is_empty() {
        None
    } else {
        Some(WeightedSampler::from_labels(&labels).map_err(|e| invalid_err("fit", e.to_string()))?)
    };

    let mut history = Vec::with_capacity(config.epochs);
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_overall = f64::NEG_INFINITY;

    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let sampler = sampler
            .as_ref()
            .ok_or_else(|| invalid_err("fit", "empty training set"))?;
        let stats = train_epoch(
            model,
            train,
            sampler,
            config.batch_size,
            config.augment.as_ref(),
            &mut state,
            rng,
        )?;

        let (val_macro_f1, val_accuracy, val_overall) = if val.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let report: EvalReport = evaluate(model, val)?;
            (report.macro_f1, report.accuracy, report.overall)
        };
        history.push(EpochRecord {
            stats,
            val_macro_f1,
            val_accuracy,
            val_overall,
        });

        if val.is_empty() || val_overall > best_overall {
            best_overall = val_overall.max(best_overall);
            best = model.clone();
            best_epoch = Some(epoch);
        }
    }

    if config.epochs == 0 {
        best = model.clone();
    }

    Ok(FitResult {
        history,
        best,
        best_epoch,
        best_overall: if best_overall.is_finite() { best_overall } else { 0.0 },
        final_state: state,
    })
}
