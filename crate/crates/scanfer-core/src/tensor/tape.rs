//! The autodiff tape: records differentiable operations in execution order
//! and replays them backwards to accumulate gradients.
//!
//! Handles ([`Var`]) index into the tape's node arena. Nodes are pushed in
//! topological order by construction, so the backward pass is a single
//! reverse sweep that visits each operation exactly once. Gradients
//! accumulate additively wherever a value is used more than once.

use std::collections::HashMap;

use super::{invalid_err, shape_err, Mode, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Padding mode for 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of (k-1)/2 on each side; stride 1 preserves spatial dims.
    Same,
    /// No padding; kernel must fit inside the input.
    Valid,
}

/// Per-channel batch statistics reported by a train-mode batch norm, for the
/// caller to fold into its running averages.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Sigmoid(Var),
    Prelu {
        input: Var,
        slope: Var,
        outer: usize,
        channels: usize,
        inner: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        batch: usize,
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kernel: usize,
        out_h: usize,
        out_w: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        invstd: Vec<f64>,
        train: bool,
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    GapSpatial {
        input: Var,
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    MaxSet {
        inputs: Vec<Var>,
        argmax: Vec<u32>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        in_dim: usize,
        out_dim: usize,
    },
    Conv1dChannels {
        input: Var,
        kernel: Var,
        rows: usize,
        channels: usize,
        width: usize,
    },
    ScaleChannels {
        input: Var,
        weights: Var,
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    Crop {
        input: Var,
        planes: usize,
        in_h: usize,
        in_w: usize,
        y0: usize,
        x0: usize,
        out_h: usize,
        out_w: usize,
    },
    ConcatFeatures {
        a: Var,
        b: Var,
        rows: usize,
        a_dim: usize,
        b_dim: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        rows: usize,
        classes: usize,
    },
    Pick(Var, usize),
}

/// Ordered record of executed differentiable operations.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<u64, Var>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            backward_done: false,
        }
    }

    /// Record an input value. Its gradient is computed but not tied to any
    /// parameter id.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    /// Record a parameter value. Mounting the same parameter twice returns
    /// the same node so its gradient accumulates in one place.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(id) = t.param_id() {
            if let Some(&v) = self.params.get(&id) {
                return v;
            }
            let v = self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), Op::Leaf);
            self.params.insert(id, v);
            v
        } else {
            self.leaf(t)
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Copy a recorded value out as a [`Tensor`].
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.nodes[v.0].shape, self.nodes[v.0].value.clone())
            .expect("tape nodes hold consistent shapes")
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    /// Gradient of any recorded node; zeros before `backward` has run.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    /// Gradient accumulated for a mounted parameter, if it was mounted.
    pub fn param_grad(&self, id: u64) -> Option<&[f64]> {
        self.params.get(&id).map(|&v| self.grad(v))
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var, TensorError> {
        let op_name = op_name(&op);
        if value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        Ok(self.push_unchecked(shape, value, op))
    }

    fn push_unchecked(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            shape,
            value,
            grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise and scalar ops ----

    /// Elementwise sum of two same-shape values.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(self.nodes[a.0].shape.clone(), value, Op::Add(a, b))
    }

    /// Elementwise product of two same-shape values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let value: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(self.nodes[a.0].shape.clone(), value, Op::Mul(a, b))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let value: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        self.push(self.nodes[a.0].shape.clone(), value, Op::Scale(a, factor))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = vec![self.value(a).iter().sum()];
        self.push(vec![1], value, Op::Sum(a))
    }

    /// Numerically stable logistic function, elementwise.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let value: Vec<f64> = self.value(a).iter().map(|&x| stable_sigmoid(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), value, Op::Sigmoid(a))
    }

    /// Single element by flat index, as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var, TensorError> {
        if index >= self.value(a).len() {
            return Err(invalid_err(
                "pick",
                format!("index {index} out of {}", self.value(a).len()),
            ));
        }
        let value = vec![self.value(a)[index]];
        self.push(vec![1], value, Op::Pick(a, index))
    }

    // ---- activations over channels ----

    /// Parametric ReLU with one slope per channel.
    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var, TensorError> {
        let (outer, channels, inner) = channel_layout(self.shape(input))
            .ok_or_else(|| shape_err("prelu", format!("unsupported rank {:?}", self.shape(input))))?;
        if self.shape(slope) != [channels] {
            return Err(shape_err(
                "prelu",
                format!("slope {:?} does not match {channels} channels", self.shape(slope)),
            ));
        }
        let x = self.value(input);
        let s = self.value(slope);
        let mut value = vec![0.0; x.len()];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                let sc = s[c];
                for i in 0..inner {
                    let v = x[base + i];
                    value[base + i] = if v >= 0.0 { v } else { sc * v };
                }
            }
        }
        self.push(
            self.nodes[input.0].shape.clone(),
            value,
            Op::Prelu {
                input,
                slope,
                outer,
                channels,
                inner,
            },
        )
    }

    // ---- convolution ----

    /// 2-D convolution over `(C,H,W)` or `(N,C,H,W)` input with a square
    /// `(C_out,C_in,k,k)` kernel and per-output-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var, TensorError> {
        let ishape = self.shape(input).to_vec();
        let (batch, in_channels, in_h, in_w, batched) = match ishape.as_slice() {
            [c, h, w] => (1, *c, *h, *w, false),
            [n, c, h, w] => (*n, *c, *h, *w, true),
            other => return Err(shape_err("conv2d", format!("input rank {other:?}"))),
        };
        let wshape = self.shape(weight).to_vec();
        let (out_channels, w_cin, kh, kw) = match wshape.as_slice() {
            [co, ci, kh, kw] => (*co, *ci, *kh, *kw),
            other => return Err(shape_err("conv2d", format!("weight rank {other:?}"))),
        };
        if kh != kw {
            return Err(shape_err("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        let kernel = kh;
        if w_cin != in_channels {
            return Err(shape_err(
                "conv2d",
                format!("weight expects {w_cin} input channels, input has {in_channels}"),
            ));
        }
        if self.shape(bias) != [out_channels] {
            return Err(shape_err(
                "conv2d",
                format!("bias {:?} does not match {out_channels} output channels", self.shape(bias)),
            ));
        }
        if stride == 0 {
            return Err(invalid_err("conv2d", "stride must be >= 1"));
        }
        let pad = match padding {
            Padding::Same => {
                if kernel % 2 == 0 {
                    return Err(invalid_err("conv2d", "same padding requires an odd kernel"));
                }
                (kernel - 1) / 2
            }
            Padding::Valid => {
                if in_h < kernel || in_w < kernel {
                    return Err(shape_err(
                        "conv2d",
                        format!("valid conv: kernel {kernel} larger than input {in_h}x{in_w}"),
                    ));
                }
                0
            }
        };
        let out_h = (in_h + 2 * pad - kernel) / stride + 1;
        let out_w = (in_w + 2 * pad - kernel) / stride + 1;

        let value = conv2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        );
        let oshape = if batched {
            vec![batch, out_channels, out_h, out_w]
        } else {
            vec![out_channels, out_h, out_w]
        };
        self.push(
            oshape,
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                batch,
                in_channels,
                in_h,
                in_w,
                out_channels,
                kernel,
                out_h,
                out_w,
            },
        )
    }

    /// 1-D `same` convolution across the channel axis of `(C)` or `(N,C)`
    /// input, no bias. Used by the channel-attention descriptor.
    pub fn conv1d_channels(&mut self, input: Var, kernel: Var) -> Result<Var, TensorError> {
        let ishape = self.shape(input).to_vec();
        let (rows, channels) = match ishape.as_slice() {
            [c] => (1, *c),
            [n, c] => (*n, *c),
            other => return Err(shape_err("conv1d_channels", format!("input rank {other:?}"))),
        };
        let kshape = self.shape(kernel).to_vec();
        let width = match kshape.as_slice() {
            [k] => *k,
            other => return Err(shape_err("conv1d_channels", format!("kernel rank {other:?}"))),
        };
        if width % 2 == 0 {
            return Err(invalid_err("conv1d_channels", "kernel length must be odd"));
        }
        let pad = (width - 1) / 2;
        let x = self.value(input);
        let k = self.value(kernel);
        let mut value = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * channels..(r + 1) * channels];
            let out = &mut value[r * channels..(r + 1) * channels];
            for c in 0..channels {
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    let idx = c + j;
                    if idx >= pad && idx - pad < channels {
                        acc += kv * row[idx - pad];
                    }
                }
                out[c] = acc;
            }
        }
        self.push(
            ishape,
            value,
            Op::Conv1dChannels {
                input,
                kernel,
                rows,
                channels,
                width,
            },
        )
    }

    // ---- normalization ----

    /// Batch normalization over `(C,H,W)` or `(N,C,H,W)`.
    ///
    /// Train mode normalizes by per-channel batch statistics (biased
    /// variance over batch and spatial dims jointly) and returns them so the
    /// caller can update its running averages. Eval mode normalizes by the
    /// provided running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
        mode: Mode,
    ) -> Result<(Var, Option<BnBatchStats>), TensorError> {
        let ishape = self.shape(input).to_vec();
        let (batch, channels, spatial) = match ishape.as_slice() {
            [c, h, w] => (1, *c, h * w),
            [n, c, h, w] => (*n, *c, h * w),
            other => return Err(shape_err("batch_norm", format!("input rank {other:?}"))),
        };
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(shape_err(
                "batch_norm",
                format!(
                    "gamma {:?} / beta {:?} do not match {channels} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(shape_err("batch_norm", "running stats do not match channel count"));
        }
        if eps <= 0.0 {
            return Err(invalid_err("batch_norm", "eps must be positive"));
        }

        let x = self.value(input);
        let count = (batch * spatial) as f64;
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let plane = &x[(b * channels + c) * spatial..][..spatial];
                        mean[c] += plane.iter().sum::<f64>();
                    }
                }
                for m in mean.iter_mut() {
                    *m /= count;
                }
                for b in 0..batch {
                    for c in 0..channels {
                        let plane = &x[(b * channels + c) * spatial..][..spatial];
                        let m = mean[c];
                        var[c] += plane.iter().map(|&v| (v - m) * (v - m)).sum::<f64>();
                    }
                }
                for v in var.iter_mut() {
                    *v /= count;
                }
                (mean, var)
            }
            Mode::Eval => (running_mean.to_vec(), running_var.to_vec()),
        };
        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let g = self.value(gamma);
        let be = self.value(beta);
        let mut value = vec![0.0; x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                let (m, is, gc, bc) = (mean[c], invstd[c], g[c], be[c]);
                for i in 0..spatial {
                    value[base + i] = gc * (x[base + i] - m) * is + bc;
                }
            }
        }

        let stats = match mode {
            Mode::Train => Some(BnBatchStats {
                mean: mean.clone(),
                var: var.clone(),
            }),
            Mode::Eval => None,
        };
        let out = self.push(
            ishape,
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                invstd,
                train: mode == Mode::Train,
                batch,
                channels,
                spatial,
            },
        )?;
        Ok((out, stats))
    }

    // ---- pooling and reductions ----

    /// Spatial mean per channel: `(C,H,W)` -> `(C)`, `(N,C,H,W)` -> `(N,C)`.
    pub fn gap_spatial(&mut self, input: Var) -> Result<Var, TensorError> {
        let ishape = self.shape(input).to_vec();
        let (batch, channels, spatial, batched) = match ishape.as_slice() {
            [c, h, w] => (1, *c, h * w, false),
            [n, c, h, w] => (*n, *c, h * w, true),
            other => return Err(shape_err("gap_spatial", format!("input rank {other:?}"))),
        };
        let x = self.value(input);
        let mut value = vec![0.0; batch * channels];
        for b in 0..batch {
            for c in 0..channels {
                let plane = &x[(b * channels + c) * spatial..][..spatial];
                value[b * channels + c] = plane.iter().sum::<f64>() / spatial as f64;
            }
        }
        let oshape = if batched { vec![batch, channels] } else { vec![channels] };
        self.push(
            oshape,
            value,
            Op::GapSpatial {
                input,
                batch,
                channels,
                spatial,
            },
        )
    }

    /// Elementwise maximum over a non-empty set of same-shape values. On
    /// ties the lowest input index wins and receives the full gradient.
    pub fn max_over_set(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let first = *inputs
            .first()
            .ok_or_else(|| invalid_err("max_over_set", "empty input set"))?;
        let shape = self.shape(first).to_vec();
        for &v in inputs {
            if self.shape(v) != shape {
                return Err(shape_err(
                    "max_over_set",
                    format!("{:?} vs {:?}", self.shape(v), shape),
                ));
            }
        }
        let len = self.value(first).len();
        let mut value = self.value(first).to_vec();
        let mut argmax = vec![0u32; len];
        for (slot, &v) in inputs.iter().enumerate().skip(1) {
            let data = self.value(v);
            for e in 0..len {
                if data[e] > value[e] {
                    value[e] = data[e];
                    argmax[e] = slot as u32;
                }
            }
        }
        self.push(
            shape,
            value,
            Op::MaxSet {
                inputs: inputs.to_vec(),
                argmax,
            },
        )
    }

    // ---- dense ----

    /// Affine map `weight . input + bias` over `(n)` or row-wise over `(N,n)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let ishape = self.shape(input).to_vec();
        let (rows, in_dim, batched) = match ishape.as_slice() {
            [n] => (1, *n, false),
            [r, n] => (*r, *n, true),
            other => return Err(shape_err("linear", format!("input rank {other:?}"))),
        };
        let wshape = self.shape(weight).to_vec();
        let (out_dim, w_in) = match wshape.as_slice() {
            [m, n] => (*m, *n),
            other => return Err(shape_err("linear", format!("weight rank {other:?}"))),
        };
        if w_in != in_dim {
            return Err(shape_err(
                "linear",
                format!("weight expects {w_in} inputs, got {in_dim}"),
            ));
        }
        if self.shape(bias) != [out_dim] {
            return Err(shape_err(
                "linear",
                format!("bias {:?} does not match {out_dim} outputs", self.shape(bias)),
            ));
        }
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let mut value = vec![0.0; rows * out_dim];
        for r in 0..rows {
            let xrow = &x[r * in_dim..(r + 1) * in_dim];
            let orow = &mut value[r * out_dim..(r + 1) * out_dim];
            for m in 0..out_dim {
                let wrow = &w[m * in_dim..(m + 1) * in_dim];
                let mut acc = b[m];
                for (wv, xv) in wrow.iter().zip(xrow) {
                    acc += wv * xv;
                }
                orow[m] = acc;
            }
        }
        let oshape = if batched { vec![rows, out_dim] } else { vec![out_dim] };
        self.push(
            oshape,
            value,
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                in_dim,
                out_dim,
            },
        )
    }

    // ---- structure ----

    /// Rescale every spatial position of a channel by that channel's weight:
    /// `(C,H,W) * (C)` or `(N,C,H,W) * (N,C)`.
    pub fn scale_channels(&mut self, input: Var, weights: Var) -> Result<Var, TensorError> {
        let ishape = self.shape(input).to_vec();
        let (batch, channels, spatial) = match ishape.as_slice() {
            [c, h, w] => (1, *c, h * w),
            [n, c, h, w] => (*n, *c, h * w),
            other => return Err(shape_err("scale_channels", format!("input rank {other:?}"))),
        };
        let expected: &[usize] = if ishape.len() == 3 {
            &[channels]
        } else {
            &[batch, channels]
        };
        if self.shape(weights) != expected {
            return Err(shape_err(
                "scale_channels",
                format!("weights {:?}, expected {:?}", self.shape(weights), expected),
            ));
        }
        let x = self.value(input);
        let wt = self.value(weights);
        let mut value = vec![0.0; x.len()];
        for b in 0..batch {
            for c in 0..channels {
                let base = (b * channels + c) * spatial;
                let s = wt[b * channels + c];
                for i in 0..spatial {
                    value[base + i] = x[base + i] * s;
                }
            }
        }
        self.push(
            ishape,
            value,
            Op::ScaleChannels {
                input,
                weights,
                batch,
                channels,
                spatial,
            },
        )
    }

    /// Spatial sub-block `[y0, y0+h) x [x0, x0+w)` of every channel (and
    /// batch row) of a `(C,H,W)` or `(N,C,H,W)` value.
    pub fn crop(
        &mut self,
        input: Var,
        y0: usize,
        x0: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var, TensorError> {
        let ishape = self.shape(input).to_vec();
        let (planes, in_h, in_w, oshape) = match ishape.as_slice() {
            [c, h, w] => (*c, *h, *w, vec![*c, out_h, out_w]),
            [n, c, h, w] => (n * c, *h, *w, vec![*n, *c, out_h, out_w]),
            other => return Err(shape_err("crop", format!("input rank {other:?}"))),
        };
        if out_h == 0 || out_w == 0 || y0 + out_h > in_h || x0 + out_w > in_w {
            return Err(shape_err(
                "crop",
                format!("block {y0}+{out_h} x {x0}+{out_w} outside {in_h}x{in_w}"),
            ));
        }
        let x = self.value(input);
        let mut value = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let src = &x[p * in_h * in_w..][..in_h * in_w];
            let dst = &mut value[p * out_h * out_w..][..out_h * out_w];
            for row in 0..out_h {
                let s = (y0 + row) * in_w + x0;
                dst[row * out_w..(row + 1) * out_w].copy_from_slice(&src[s..s + out_w]);
            }
        }
        self.push(
            oshape,
            value,
            Op::Crop {
                input,
                planes,
                in_h,
                in_w,
                y0,
                x0,
                out_h,
                out_w,
            },
        )
    }

    /// Concatenate feature vectors: `(a)+(b)` -> `(a+b)`, or row-wise
    /// `(N,a)+(N,b)` -> `(N,a+b)`.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        let (rows, a_dim, b_dim, batched) = match (ashape.as_slice(), bshape.as_slice()) {
            ([x], [y]) => (1, *x, *y, false),
            ([r1, x], [r2, y]) if r1 == r2 => (*r1, *x, *y, true),
            _ => {
                return Err(shape_err(
                    "concat_features",
                    format!("{ashape:?} vs {bshape:?}"),
                ))
            }
        };
        let av = self.value(a);
        let bv = self.value(b);
        let mut value = Vec::with_capacity(rows * (a_dim + b_dim));
        for r in 0..rows {
            value.extend_from_slice(&av[r * a_dim..(r + 1) * a_dim]);
            value.extend_from_slice(&bv[r * b_dim..(r + 1) * b_dim]);
        }
        let oshape = if batched {
            vec![rows, a_dim + b_dim]
        } else {
            vec![a_dim + b_dim]
        };
        self.push(
            oshape,
            value,
            Op::ConcatFeatures {
                a,
                b,
                rows,
                a_dim,
                b_dim,
            },
        )
    }

    // ---- loss ----

    /// Cross-entropy of logits against class indices, computed through the
    /// log-sum-exp stabilized form. `(K)` takes one label; `(N,K)` takes N
    /// labels and returns the mean loss. The result is a scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let lshape = self.shape(logits).to_vec();
        let (rows, classes) = match lshape.as_slice() {
            [k] => (1, *k),
            [n, k] => (*n, *k),
            other => return Err(shape_err("cross_entropy", format!("logits rank {other:?}"))),
        };
        if labels.len() != rows {
            return Err(invalid_err(
                "cross_entropy",
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid_err(
                "cross_entropy",
                format!("label {bad} out of range 0..{classes}"),
            ));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        for r in 0..rows {
            let row = &z[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            for p in probs[r * classes..(r + 1) * classes].iter_mut() {
                *p /= denom;
            }
            // loss_r = logsumexp(row) - row[label]
            total += max + denom.ln() - row[labels[r]];
        }
        let value = vec![total / rows as f64];
        self.push(
            vec![1],
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                rows,
                classes,
            },
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Populates the gradient of every
    /// node; each recorded operation is visited exactly once, in reverse
    /// execution order.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(invalid_err("backward", "backward already ran on this tape"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(invalid_err(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            backprop_node(node, before);
        }

        for node in &self.nodes {
            if node.grad.iter().any(|g| !g.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sum(..) => "sum",
        Op::Sigmoid(..) => "sigmoid",
        Op::Prelu { .. } => "prelu",
        Op::Conv2d { .. } => "conv2d",
        Op::BatchNorm { .. } => "batch_norm",
        Op::GapSpatial { .. } => "gap_spatial",
        Op::MaxSet { .. } => "max_over_set",
        Op::Linear { .. } => "linear",
        Op::Conv1dChannels { .. } => "conv1d_channels",
        Op::ScaleChannels { .. } => "scale_channels",
        Op::Crop { .. } => "crop",
        Op::ConcatFeatures { .. } => "concat_features",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Pick(..) => "pick",
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    let v = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // the true value is strictly inside (0,1); keep the rounded one there too
    v.clamp(f64::MIN_POSITIVE, 1.0f64.next_down())
}

/// Channel layout of a `(C)`, `(C,H,W)` or `(N,C,H,W)` shape as
/// `(outer, channels, inner)`.
fn channel_layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [c] => Some((1, *c, 1)),
        [c, h, w] => Some((1, *c, h * w)),
        [n, c, h, w] => Some((*n, *c, h * w)),
        _ => None,
    }
}

/// Output index range `[lo, hi)` such that `o*stride + k - pad` stays inside
/// `[0, dim)` for every `o` in the range.
fn conv_span(dim: usize, out_dim: usize, kernel_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kernel_off >= pad {
        0
    } else {
        (pad - kernel_off).div_ceil(stride)
    };
    let hi = if dim + pad <= kernel_off {
        0
    } else {
        ((dim + pad - kernel_off).div_ceil(stride)).min(out_dim)
    };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    batch: usize,
    in_channels: usize,
    in_h: usize,
    in_w: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * out_channels * out_h * out_w];
    for b in 0..batch {
        for co in 0..out_channels {
            let out_plane = &mut out[(b * out_channels + co) * out_h * out_w..][..out_h * out_w];
            out_plane.fill(bias[co]);
            for ci in 0..in_channels {
                let in_plane = &input[(b * in_channels + ci) * in_h * in_w..][..in_h * in_w];
                let w_base = (co * in_channels + ci) * kernel * kernel;
                for ky in 0..kernel {
                    let (oy_lo, oy_hi) = conv_span(in_h, out_h, ky, stride, pad);
                    for kx in 0..kernel {
                        let wv = weight[w_base + ky * kernel + kx];
                        let (ox_lo, ox_hi) = conv_span(in_w, out_w, kx, stride, pad);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let in_row = &in_plane[iy * in_w..][..in_w];
                            let out_row = &mut out_plane[oy * out_w..][..out_w];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let n = ox_hi - ox_lo;
                                for (o, x) in out_row[ox_lo..ox_hi].iter_mut().zip(&in_row[ix0..ix0 + n]) {
                                    *o += wv * x;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    out_row[ox] += wv * in_row[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulate the gradient contributions of one node into its inputs.
fn backprop_node(node: &Node, before: &mut [Node]) {
    let g = &node.grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (dst, gv) in before[a.0].grad.iter_mut().zip(g) {
                *dst += gv;
            }
            for (dst, gv) in before[b.0].grad.iter_mut().zip(g) {
                *dst += gv;
            }
        }
        Op::Mul(a, b) => {
            let da: Vec<f64> = g.iter().zip(&before[b.0].value).map(|(gv, bv)| gv * bv).collect();
            let db: Vec<f64> = g.iter().zip(&before[a.0].value).map(|(gv, av)| gv * av).collect();
            accumulate(&mut before[a.0].grad, &da);
            accumulate(&mut before[b.0].grad, &db);
        }
        Op::Scale(a, factor) => {
            for (dst, gv) in before[a.0].grad.iter_mut().zip(g) {
                *dst += factor * gv;
            }
        }
        Op::Sum(a) => {
            let gv = g[0];
            for dst in before[a.0].grad.iter_mut() {
                *dst += gv;
            }
        }
        Op::Sigmoid(a) => {
            for ((dst, gv), s) in before[a.0].grad.iter_mut().zip(g).zip(&node.value) {
                *dst += gv * s * (1.0 - s);
            }
        }
        Op::Pick(a, index) => {
            before[a.0].grad[*index] += g[0];
        }
        Op::Prelu {
            input,
            slope,
            outer,
            channels,
            inner,
        } => {
            let mut d_in = vec![0.0; before[input.0].value.len()];
            let mut d_slope = vec![0.0; *channels];
            {
                let x = &before[input.0].value;
                let s = &before[slope.0].value;
                for o in 0..*outer {
                    for c in 0..*channels {
                        let base = (o * channels + c) * inner;
                        for i in 0..*inner {
                            let v = x[base + i];
                            let gv = g[base + i];
                            if v >= 0.0 {
                                d_in[base + i] = gv;
                            } else {
                                d_in[base + i] = gv * s[c];
                                d_slope[c] += gv * v;
                            }
                        }
                    }
                }
            }
            accumulate(&mut before[input.0].grad, &d_in);
            accumulate(&mut before[slope.0].grad, &d_slope);
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel,
            out_h,
            out_w,
        } => {
            let (stride, pad, kernel) = (*stride, *pad, *kernel);
            let mut d_in = vec![0.0; before[input.0].value.len()];
            let mut d_w = vec![0.0; before[weight.0].value.len()];
            let mut d_b = vec![0.0; *out_channels];
            {
                let x = &before[input.0].value;
                let w = &before[weight.0].value;
                for b in 0..*batch {
                    for co in 0..*out_channels {
                        let g_plane = &g[(b * out_channels + co) * out_h * out_w..][..out_h * out_w];
                        d_b[co] += g_plane.iter().sum::<f64>();
                        for ci in 0..*in_channels {
                            let in_plane = &x[(b * in_channels + ci) * in_h * in_w..][..in_h * in_w];
                            let din_plane = &mut d_in[(b * in_channels + ci) * in_h * in_w..][..in_h * in_w];
                            let w_base = (co * in_channels + ci) * kernel * kernel;
                            for ky in 0..kernel {
                                let (oy_lo, oy_hi) = conv_span(*in_h, *out_h, ky, stride, pad);
                                for kx in 0..kernel {
                                    let wv = w[w_base + ky * kernel + kx];
                                    let mut dw = 0.0;
                                    let (ox_lo, ox_hi) = conv_span(*in_w, *out_w, kx, stride, pad);
                                    if ox_lo >= ox_hi {
                                        continue;
                                    }
                                    for oy in oy_lo..oy_hi {
                                        let iy = oy * stride + ky - pad;
                                        let in_row = &in_plane[iy * in_w..][..*in_w];
                                        let din_row = &mut din_plane[iy * in_w..][..*in_w];
                                        let g_row = &g_plane[oy * out_w..][..*out_w];
                                        if stride == 1 {
                                            let ix0 = ox_lo + kx - pad;
                                            for (off, gv) in g_row[ox_lo..ox_hi].iter().enumerate() {
                                                let ix = ix0 + off;
                                                dw += gv * in_row[ix];
                                                din_row[ix] += gv * wv;
                                            }
                                        } else {
                                            for ox in ox_lo..ox_hi {
                                                let ix = ox * stride + kx - pad;
                                                let gv = g_row[ox];
                                                dw += gv * in_row[ix];
                                                din_row[ix] += gv * wv;
                                            }
                                        }
                                    }
                                    d_w[w_base + ky * kernel + kx] += dw;
                                }
                            }
                        }
                    }
                }
            }
            accumulate(&mut before[input.0].grad, &d_in);
            accumulate(&mut before[weight.0].grad, &d_w);
            accumulate(&mut before[bias.0].grad, &d_b);
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            mean,
            invstd,
            train,
            batch,
            channels,
            spatial,
        } => {
            let count = (batch * spatial) as f64;
            let mut d_in = vec![0.0; before[input.0].value.len()];
            let mut d_gamma = vec![0.0; *channels];
            let mut d_beta = vec![0.0; *channels];
            {
                let x = &before[input.0].value;
                let gm = &before[gamma.0].value;
                // per-channel sums of g and g*xhat
                let mut sum_g = vec![0.0; *channels];
                let mut sum_gx = vec![0.0; *channels];
                for b in 0..*batch {
                    for c in 0..*channels {
                        let base = (b * channels + c) * spatial;
                        let (m, is) = (mean[c], invstd[c]);
                        for i in 0..*spatial {
                            let gv = g[base + i];
                            sum_g[c] += gv;
                            sum_gx[c] += gv * (x[base + i] - m) * is;
                        }
                    }
                }
                for c in 0..*channels {
                    d_beta[c] = sum_g[c];
                    d_gamma[c] = sum_gx[c];
                }
                for b in 0..*batch {
                    for c in 0..*channels {
                        let base = (b * channels + c) * spatial;
                        let (m, is, gc) = (mean[c], invstd[c], gm[c]);
                        if *train {
                            let (mg, mgx) = (sum_g[c] / count, sum_gx[c] / count);
                            for i in 0..*spatial {
                                let xhat = (x[base + i] - m) * is;
                                d_in[base + i] = gc * is * (g[base + i] - mg - xhat * mgx);
                            }
                        } else {
                            for i in 0..*spatial {
                                d_in[base + i] = gc * is * g[base + i];
                            }
                        }
                    }
                }
            }
            accumulate(&mut before[input.0].grad, &d_in);
            accumulate(&mut before[gamma.0].grad, &d_gamma);
            accumulate(&mut before[beta.0].grad, &d_beta);
        }
        Op::GapSpatial {
            input,
            batch,
            channels,
            spatial,
        } => {
            let inv = 1.0 / *spatial as f64;
            let d_in = &mut before[input.0].grad;
            for b in 0..*batch {
                for c in 0..*channels {
                    let gv = g[b * channels + c] * inv;
                    let base = (b * channels + c) * spatial;
                    for dst in d_in[base..base + spatial].iter_mut() {
                        *dst += gv;
                    }
                }
            }
        }
        Op::MaxSet { inputs, argmax } => {
            for (e, (&slot, gv)) in argmax.iter().zip(g).enumerate() {
                before[inputs[slot as usize].0].grad[e] += gv;
            }
        }
        Op::Linear {
            input,
            weight,
            bias,
            rows,
            in_dim,
            out_dim,
        } => {
            let mut d_in = vec![0.0; before[input.0].value.len()];
            let mut d_w = vec![0.0; before[weight.0].value.len()];
            let mut d_b = vec![0.0; *out_dim];
            {
                let x = &before[input.0].value;
                let w = &before[weight.0].value;
                for r in 0..*rows {
                    let xrow = &x[r * in_dim..(r + 1) * in_dim];
                    let grow = &g[r * out_dim..(r + 1) * out_dim];
                    for m in 0..*out_dim {
                        let gv = grow[m];
                        d_b[m] += gv;
                        let wrow = &w[m * in_dim..(m + 1) * in_dim];
                        let dwrow = &mut d_w[m * in_dim..(m + 1) * in_dim];
                        let dinrow = &mut d_in[r * in_dim..(r + 1) * in_dim];
                        for n in 0..*in_dim {
                            dwrow[n] += gv * xrow[n];
                            dinrow[n] += gv * wrow[n];
                        }
                    }
                }
            }
            accumulate(&mut before[input.0].grad, &d_in);
            accumulate(&mut before[weight.0].grad, &d_w);
            accumulate(&mut before[bias.0].grad, &d_b);
        }
        Op::Conv1dChannels {
            input,
            kernel,
            rows,
            channels,
            width,
        } => {
            let pad = (width - 1) / 2;
            let mut d_in = vec![0.0; before[input.0].value.len()];
            let mut d_k = vec![0.0; *width];
            {
                let x = &before[input.0].value;
                let k = &before[kernel.0].value;
                for r in 0..*rows {
                    let row = &x[r * channels..(r + 1) * channels];
                    let grow = &g[r * channels..(r + 1) * channels];
                    for c in 0..*channels {
                        let gv = grow[c];
                        for j in 0..*width {
                            let idx = c + j;
                            if idx >= pad && idx - pad < *channels {
                                d_k[j] += gv * row[idx - pad];
                                d_in[r * channels + idx - pad] += gv * k[j];
                            }
                        }
                    }
                }
            }
            accumulate(&mut before[input.0].grad, &d_in);
            accumulate(&mut before[kernel.0].grad, &d_k);
        }
        Op::ScaleChannels {
            input,
            weights,
            batch,
            channels,
            spatial,
        } => {
            let mut d_in = vec![0.0; before[input.0].value.len()];
            let mut d_wt = vec![0.0; before[weights.0].value.len()];
            {
                let x = &before[input.0].value;
                let wt = &before[weights.0].value;
                for b in 0..*batch {
                    for c in 0..*channels {
                        let base = (b * channels + c) * spatial;
                        let s = wt[b * channels + c];
                        let mut acc = 0.0;
                        for i in 0..*spatial {
                            let gv = g[base + i];
                            d_in[base + i] = gv * s;
                            acc += gv * x[base + i];
                        }
                        d_wt[b * channels + c] += acc;
                    }
                }
            }
            accumulate(&mut before[input.0].grad, &d_in);
            accumulate(&mut before[weights.0].grad, &d_wt);
        }
        Op::Crop {
            input,
            planes,
            in_h,
            in_w,
            y0,
            x0,
            out_h,
            out_w,
        } => {
            let d_in = &mut before[input.0].grad;
            for p in 0..*planes {
                let dst = &mut d_in[p * in_h * in_w..][..in_h * in_w];
                let src = &g[p * out_h * out_w..][..out_h * out_w];
                for row in 0..*out_h {
                    let s = (y0 + row) * in_w + x0;
                    for (d, gv) in dst[s..s + out_w].iter_mut().zip(&src[row * out_w..(row + 1) * out_w]) {
                        *d += gv;
                    }
                }
            }
        }
        Op::ConcatFeatures {
            a,
            b,
            rows,
            a_dim,
            b_dim,
        } => {
            let total = a_dim + b_dim;
            for r in 0..*rows {
                let grow = &g[r * total..(r + 1) * total];
                for (dst, gv) in before[a.0].grad[r * a_dim..(r + 1) * a_dim]
                    .iter_mut()
                    .zip(&grow[..*a_dim])
                {
                    *dst += gv;
                }
                for (dst, gv) in before[b.0].grad[r * b_dim..(r + 1) * b_dim]
                    .iter_mut()
                    .zip(&grow[*a_dim..])
                {
                    *dst += gv;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
            rows,
            classes,
        } => {
            let gv = g[0] / *rows as f64;
            let d_l = &mut before[logits.0].grad;
            for r in 0..*rows {
                let prow = &probs[r * classes..(r + 1) * classes];
                let drow = &mut d_l[r * classes..(r + 1) * classes];
                for (k, (dst, p)) in drow.iter_mut().zip(prow).enumerate() {
                    let indicator = if k == labels[r] { 1.0 } else { 0.0 };
                    *dst += gv * (p - indicator);
                }
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
