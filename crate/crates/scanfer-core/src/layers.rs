//! Parameter containers for the network building blocks.
//!
//! Each layer owns its parameter tensors and knows how to record its forward
//! computation on a [`Tape`]. Weight init is uniform in
//! `±sqrt(6/(fan_in+fan_out))` from a seeded generator; biases start at zero.

use crate::rng::Rng;
use crate::tensor::{BnBatchStats, Mode, Padding, Tape, Tensor, TensorError, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const PRELU_INIT_SLOPE: f64 = 0.25;

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub weight: Tensor,
    /// Absent for convolutions directly followed by batch norm, where a
    /// bias would be cancelled by the mean subtraction.
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut Rng,
    ) -> Self {
        let mut layer = Self::new_unbiased(in_channels, out_channels, kernel, stride, padding, rng);
        layer.bias = Some(Tensor::zeros(&[out_channels]).into_parameter());
        layer
    }

    pub fn new_unbiased(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        Conv2dLayer {
            weight: glorot(&[out_channels, in_channels, kernel, kernel], fan_in, fan_out, rng)
                .into_parameter(),
            bias: None,
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var, TensorError> {
        let w = tape.param(&self.weight);
        let b = match &self.bias {
            Some(bias) => tape.param(bias),
            None => tape.leaf(&Tensor::zeros(&[self.weight.shape()[0]])),
        };
        tape.conv2d(input, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2dLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2dLayer {
    pub fn new(channels: usize) -> Self {
        BatchNorm2dLayer {
            gamma: Tensor::full(&[channels], 1.0).into_parameter(),
            beta: Tensor::zeros(&[channels]).into_parameter(),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Record the normalization; in train mode also return the batch
    /// statistics for a later [`BatchNorm2dLayer::apply_update`].
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BnBatchStats>), TensorError> {
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        tape.batch_norm(
            input,
            gamma,
            beta,
            &self.running_mean,
            &self.running_var,
            self.eps,
            mode,
        )
    }

    /// Fold batch statistics into the running averages.
    pub fn apply_update(&mut self, stats: &BnBatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        LinearLayer {
            weight: glorot(&[out_dim, in_dim], in_dim, out_dim, rng).into_parameter(),
            bias: Tensor::zeros(&[out_dim]).into_parameter(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var, TensorError> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.linear(input, w, b)
    }
}

/// Per-channel PReLU slopes, initialized to 0.25.
pub fn prelu_slopes(channels: usize) -> Tensor {
    Tensor::full(&[channels], PRELU_INIT_SLOPE).into_parameter()
}
