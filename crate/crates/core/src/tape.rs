//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation executed through its methods, in
//! order. Calling [`Tape::backward`] on a scalar walks that record in exact
//! reverse and accumulates adjoints, so a value feeding `m` consumers
//! receives the sum of `m` contributions.
//!
//! ```
//! use wrid::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0]), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, gemm, ConvGeom, Padding};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Running mean/variance carried by a batchnorm layer between calls.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub initialized: bool,
}

impl RunningStats {
    /// Statistics that have never observed a batch.
    pub fn uninitialized(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    /// Zero mean, unit variance: the usual starting point of a fresh layer.
    pub fn standard(channels: usize) -> Self {
        Self {
            initialized: true,
            ..Self::uninitialized(channels)
        }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`. The first
    /// observed batch replaces uninitialized statistics outright.
    pub fn update(&mut self, batch: &BatchStats, momentum: f32) {
        if !self.initialized {
            self.mean.clone_from(&batch.mean);
            self.var.clone_from(&batch.var);
            self.initialized = true;
            return;
        }
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;
const LN_EPS: f32 = 1e-5;
const LOG_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cout: usize,
    },
    Depthwise {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    ConcatLast {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    NarrowLast {
        input: Var,
        start: usize,
        width: usize,
    },
    Gap(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        dims: [usize; 4],
    },
    Softmax(Var),
    LayerNorm {
        input: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Scale(Var, T),
    AddScalar(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    SmoothedCe {
        logits: Var,
        targets: Vec<T>,
        probs: Vec<T>,
        active: Vec<bool>,
    },
    GatherRows {
        input: Var,
        rows: Vec<usize>,
    },
    L2NormalizeRows {
        input: Var,
        norms: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations. Values are `f32` unless a
/// wider element type is requested.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::with_grad(true)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A tape on which no value requires a gradient.
    pub fn inference() -> Self {
        Self::with_grad(false)
    }
}

impl<T: Real> Tape<T> {
    /// An empty tape of any element type; with `grad_enabled == false` no
    /// value ever requires a gradient.
    pub fn with_grad(grad_enabled: bool) -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by the last [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Binds a stored parameter as a leaf. Binding the same parameter twice
    /// returns the same handle. Frozen parameters and buffers never require
    /// a gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.tensor.cast(), p.trainable());
        self.bound.insert(id, v);
        v
    }

    /// Makes later [`Tape::param`] calls for `id` return `var`, so a caller
    /// can substitute its own leaf for a stored parameter.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.bound.insert(id, var);
    }

    /// Gradients of every bound parameter that received one.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| {
                let node = &self.nodes[v.0];
                node.grad.as_ref().map(|g| {
                    let t = Tensor::new(node.value.shape(), g.clone())
                        .expect("gradient buffers match their values");
                    (id, t.cast())
                })
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, rg, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(
                op,
                format!("operand shapes {sa:?} and {sb:?} differ"),
            ));
        }
        Ok(())
    }

    fn rank4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [n, h, w, c] => Ok([n, h, w, c]),
            ref s => Err(Error::shape(op, format!("expected [N,H,W,C], got {s:?}"))),
        }
    }

    // ---------------------------------------------------------------- convs

    /// 2-D cross-correlation. `weight` is `[kh, kw, cin, cout]`, `bias` is
    /// `[cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let dims = self.rank4(OP, input)?;
        let (kh, kw, wcin, cout) = match *self.shape(weight) {
            [kh, kw, ci, co] => (kh, kw, ci, co),
            ref s => {
                return Err(Error::shape(
                    OP,
                    format!("weight must be [kh,kw,cin,cout], got {s:?}"),
                ))
            }
        };
        if wcin != dims[3] {
            return Err(Error::Dim {
                op: OP,
                axis: "channels",
                expected: wcin,
                actual: dims[3],
            });
        }
        if let Some(b) = bias {
            let bl = self.value(b).len();
            if bl != cout {
                return Err(Error::Dim {
                    op: OP,
                    axis: "bias",
                    expected: cout,
                    actual: bl,
                });
            }
        }
        let geom = ConvGeom::new(OP, dims, kh, kw, stride, padding)?;
        let rows = geom.out_pixels();
        let mut out = vec![T::zero(); rows * cout];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        if geom.is_pointwise() {
            gemm(rows, wcin, cout, x, false, w, false, &mut out, false);
        } else {
            let mut cols = vec![T::zero(); rows * geom.patch_len()];
            kernels::im2col(x, &geom, &mut cols);
            gemm(
                rows,
                geom.patch_len(),
                cout,
                &cols,
                false,
                w,
                false,
                &mut out,
                false,
            );
        }
        if let Some(b) = bias {
            add_row_bias(&mut out, self.value(b).data());
        }
        let value = Tensor::new(&[geom.n, geom.ho, geom.wo, cout], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.record(
            value,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cout,
            },
        ))
    }

    /// Per-channel convolution with weight `[kh, kw, c]`.
    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        const OP: &str = "depthwise_conv2d";
        let dims = self.rank4(OP, input)?;
        let (kh, kw, c) = match *self.shape(weight) {
            [kh, kw, c] => (kh, kw, c),
            ref s => {
                return Err(Error::shape(
                    OP,
                    format!("weight must be [kh,kw,c], got {s:?}"),
                ))
            }
        };
        if c != dims[3] {
            return Err(Error::Dim {
                op: OP,
                axis: "channels",
                expected: c,
                actual: dims[3],
            });
        }
        let geom = ConvGeom::new(OP, dims, kh, kw, stride, padding)?;
        let mut out = vec![T::zero(); geom.out_pixels() * c];
        kernels::depthwise_forward(
            self.value(input).data(),
            self.value(weight).data(),
            &geom,
            &mut out,
        );
        let value = Tensor::new(&[geom.n, geom.ho, geom.wo, c], out)?;
        Ok(self.record(
            value,
            &[input, weight],
            Op::Depthwise {
                input,
                weight,
                geom,
            },
        ))
    }

    /// Depthwise `kh×kw` pass (same padding, given stride) followed by a
    /// 1×1 pointwise convolution `[1, 1, c, cout]` with optional bias.
    pub fn separable_conv2d(
        &mut self,
        input: Var,
        depthwise: Var,
        pointwise: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let dw = self.depthwise_conv2d(input, depthwise, stride, Padding::Same)?;
        self.conv2d(dw, pointwise, bias, 1, Padding::Same)
    }

    // ------------------------------------------------------------ batchnorm

    /// Normalizes with the batch's own per-channel statistics over every
    /// axis but the last.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, BatchStats)> {
        const OP: &str = "batchnorm";
        let c = self.check_channel_params(OP, input, gamma, beta)?;
        let x = self.value(input).data();
        let m = x.len() / c.max(1);
        if m < 2 {
            return Err(Error::shape(
                OP,
                "training mode needs at least two values per channel (N·H·W ≥ 2)",
            ));
        }
        let mut mean = vec![0f64; c];
        for row in x.chunks_exact(c) {
            for (s, &v) in mean.iter_mut().zip(row) {
                *s += v.f64();
            }
        }
        mean.iter_mut().for_each(|s| *s /= m as f64);
        let mut var = vec![0f64; c];
        for row in x.chunks_exact(c) {
            for ((s, &v), mu) in var.iter_mut().zip(row).zip(&mean) {
                let d = v.f64() - mu;
                *s += d * d;
            }
        }
        var.iter_mut().for_each(|s| *s /= m as f64);
        let stats = BatchStats {
            mean: mean.iter().map(|&v| v as f32).collect(),
            var: var.iter().map(|&v| v as f32).collect(),
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::c(1.0 / (v + eps as f64).sqrt()))
            .collect();
        let mean: Vec<T> = mean.iter().map(|&v| T::c(v)).collect();
        let v = self.bn_apply(input, gamma, beta, &mean, inv_std, true)?;
        Ok((v, stats))
    }

    /// Normalizes with stored running statistics.
    pub fn batch_norm_infer(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats,
        eps: f32,
    ) -> Result<Var> {
        const OP: &str = "batchnorm";
        if !stats.initialized {
            return Err(Error::UninitializedStatistics);
        }
        let c = self.check_channel_params(OP, input, gamma, beta)?;
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::Dim {
                op: OP,
                axis: "running stats",
                expected: c,
                actual: stats.mean.len(),
            });
        }
        let inv_std = stats
            .var
            .iter()
            .map(|&v| T::c(1.0 / (v as f64 + eps as f64).sqrt()))
            .collect();
        let mean: Vec<T> = stats.mean.iter().map(|&v| T::c(v as f64)).collect();
        self.bn_apply(input, gamma, beta, &mean, inv_std, false)
    }

    /// Batchnorm in either mode; training mode folds the batch statistics
    /// into `stats` with [`BN_MOMENTUM`].
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
        eps: f32,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (v, batch) = self.batch_norm_train(input, gamma, beta, eps)?;
                stats.update(&batch, BN_MOMENTUM);
                Ok(v)
            }
            Mode::Infer => self.batch_norm_infer(input, gamma, beta, stats, eps),
        }
    }

    fn check_channel_params(
        &self,
        op: &'static str,
        input: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<usize> {
        let c = self.value(input).last_dim();
        for (p, axis) in [(gamma, "gamma"), (beta, "beta")] {
            let len = self.value(p).len();
            if len != c {
                return Err(Error::Dim {
                    op,
                    axis,
                    expected: c,
                    actual: len,
                });
            }
        }
        Ok(c)
    }

    fn bn_apply(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        batch_stats: bool,
    ) -> Result<Var> {
        let xv = self.value(input);
        let c = xv.last_dim();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.record(
            value,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    // ----------------------------------------------------------- elementwise

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(T::zero()));
        self.record(value, &[input], Op::Relu(input))
    }

    fn zip_map(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("add", a, b, |x, y| x + y)?;
        Ok(self.record(v, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("sub", a, b, |x, y| x - y)?;
        Ok(self.record(v, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("mul", a, b, |x, y| x * y)?;
        Ok(self.record(v, &[a, b], Op::Mul(a, b)))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("channel_max", a, b, T::max)?;
        Ok(self.record(v, &[a, b], Op::Maximum(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let factor = T::c(factor as f64);
        let v = self.value(input).map(|x| x * factor);
        self.record(v, &[input], Op::Scale(input, factor))
    }

    pub fn add_scalar(&mut self, input: Var, c: f32) -> Var {
        let c = T::c(c as f64);
        let v = self.value(input).map(|x| x + c);
        self.record(v, &[input], Op::AddScalar(input))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(input).clone().reshape(shape)?;
        Ok(self.record(v, &[input], Op::Reshape(input)))
    }

    /// Concatenation along the last axis (the channel axis for NHWC maps).
    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "channel_concat";
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape(OP, "nothing to concatenate"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let lead = lead.to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape(OP, format!("leading dims {lead:?} vs {s:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        Ok(self.record(
            value,
            inputs,
            Op::ConcatLast {
                inputs: inputs.to_vec(),
                widths,
            },
        ))
    }

    /// Columns `start..start+width` of the last axis.
    pub fn narrow_last(&mut self, input: Var, start: usize, width: usize) -> Result<Var> {
        let t = self.value(input);
        let d = t.last_dim();
        if start + width > d {
            return Err(Error::shape(
                "narrow_last",
                format!("range {start}..{} exceeds last axis {d}", start + width),
            ));
        }
        let mut out = Vec::with_capacity(t.len() / d * width);
        for row in t.data().chunks_exact(d) {
            out.extend_from_slice(&row[start..start + width]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let value = Tensor::new(&shape, out)?;
        Ok(self.record(
            value,
            &[input],
            Op::NarrowLast {
                input,
                start,
                width,
            },
        ))
    }

    /// Global average pooling `[N,H,W,C] → [N,C]`.
    pub fn gap(&mut self, input: Var) -> Result<Var> {
        let [n, h, w, c] = self.rank4("gap", input)?;
        let x = self.value(input).data();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c);
        for s in 0..n {
            let mut acc = vec![0f64; c];
            for row in x[s * hw * c..(s + 1) * hw * c].chunks_exact(c) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v.f64();
                }
            }
            out.extend(acc.iter().map(|&a| T::c(a / hw as f64)));
        }
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.record(value, &[input], Op::Gap(input)))
    }

    /// Inverted dropout: in training mode each value is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`.
    /// Inference mode (and `rate == 0`) is the identity.
    pub fn dropout(&mut self, input: Var, rate: f32, rng: &mut Rng, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} not in [0, 1)"
            )));
        }
        if mode == Mode::Infer || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::c(1.0 / (1.0 - rate as f64));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| {
                if rng.uniform() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.record(value, &[input], Op::Dropout { input, mask }))
    }

    // ---------------------------------------------------------------- linear

    /// `input[.., d] · weight[d, m] + bias[m]`, applied to every row.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "affine";
        let d = self.value(input).last_dim();
        let (wd, m) = match *self.shape(weight) {
            [a, b] => (a, b),
            ref s => return Err(Error::shape(OP, format!("weight must be [d,m], got {s:?}"))),
        };
        if wd != d {
            return Err(Error::Dim {
                op: OP,
                axis: "inner",
                expected: wd,
                actual: d,
            });
        }
        if let Some(b) = bias {
            let bl = self.value(b).len();
            if bl != m {
                return Err(Error::Dim {
                    op: OP,
                    axis: "bias",
                    expected: m,
                    actual: bl,
                });
            }
        }
        let x = self.value(input);
        let rows = x.len() / d.max(1);
        let mut out = vec![T::zero(); rows * m];
        gemm(
            rows,
            d,
            m,
            x.data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            false,
        );
        if let Some(b) = bias {
            add_row_bias(&mut out, self.value(b).data());
        }
        let mut shape = x.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last = m,
            None => shape.push(m),
        }
        let value = Tensor::new(&shape, out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.record(
            value,
            &inputs,
            Op::Affine {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Batched matrix product of `a[B,M,K]` with `b[B,K,N]`, or with
    /// `b[B,N,K]` transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        const OP: &str = "bmm";
        let (ba, m, k) = match *self.shape(a) {
            [x, y, z] => (x, y, z),
            ref s => return Err(Error::shape(OP, format!("lhs must be rank 3, got {s:?}"))),
        };
        let (bb, kb, n) = match (self.shape(b), trans_b) {
            (&[x, y, z], false) => (x, y, z),
            (&[x, y, z], true) => (x, z, y),
            (s, _) => return Err(Error::shape(OP, format!("rhs must be rank 3, got {s:?}"))),
        };
        if ba != bb {
            return Err(Error::Dim {
                op: OP,
                axis: "batch",
                expected: ba,
                actual: bb,
            });
        }
        if k != kb {
            return Err(Error::Dim {
                op: OP,
                axis: "inner",
                expected: k,
                actual: kb,
            });
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); ba * m * n];
        for i in 0..ba {
            gemm(
                m,
                k,
                n,
                &xa[i * m * k..(i + 1) * m * k],
                false,
                &xb[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::new(&[ba, m, n], out)?;
        Ok(self.record(
            value,
            &[a, b],
            Op::Bmm {
                a,
                b,
                trans_b,
                dims: [ba, m, k, n],
            },
        ))
    }

    // ------------------------------------------------------- normalizations

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let k = x.last_dim();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(k) {
            softmax_row(row, &mut out);
        }
        let value = Tensor::new(x.shape(), out).expect("same size");
        self.record(value, &[input], Op::Softmax(input))
    }

    /// Per-row standardization over the last axis (no learned gain).
    pub fn layer_norm(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let d = x.last_dim();
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.len() / d.max(1));
        for row in x.data().chunks_exact(d) {
            let mean = row.iter().map(|&v| v.f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS as f64).sqrt();
            inv_std.push(T::c(is));
            xhat.extend(row.iter().map(|&v| T::c((v.f64() - mean) * is)));
        }
        let value = Tensor::new(x.shape(), xhat.clone()).expect("same size");
        self.record(
            value,
            &[input],
            Op::LayerNorm {
                input,
                xhat,
                inv_std,
            },
        )
    }

    /// Scales each row of `x[B, E]` to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let e = x.last_dim();
        let mut norms = Vec::with_capacity(x.len() / e.max(1));
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(e) {
            let n = T::c(row.iter().map(|&v| v.f64().powi(2)).sum::<f64>().sqrt());
            if n == T::zero() || !n.is_finite() {
                return Err(Error::InvalidArgument(
                    "cannot normalize a zero-norm embedding".into(),
                ));
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.record(value, &[input], Op::L2NormalizeRows { input, norms }))
    }

    /// Rows `rows[i]` of `x[B, E]`, in the given order (repeats allowed).
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(input);
        let (b, e) = match *x.shape() {
            [b, e] => (b, e),
            ref s => {
                return Err(Error::shape(
                    "gather_rows",
                    format!("expected [B,E], got {s:?}"),
                ))
            }
        };
        let mut out = Vec::with_capacity(rows.len() * e);
        for &r in rows {
            if r >= b {
                return Err(Error::shape("gather_rows", format!("row {r} out of {b}")));
            }
            out.extend_from_slice(&x.data()[r * e..(r + 1) * e]);
        }
        let value = Tensor::new(&[rows.len(), e], out)?;
        Ok(self.record(
            value,
            &[input],
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
            },
        ))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self
            .value(input)
            .data()
            .iter()
            .map(|&v| v.f64())
            .sum::<f64>();
        self.record(Tensor::scalar(T::c(s)), &[input], Op::Sum(input))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input).data();
        let s = x.iter().map(|&v| v.f64()).sum::<f64>() / x.len().max(1) as f64;
        self.record(Tensor::scalar(T::c(s)), &[input], Op::Mean(input))
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let d = x.last_dim();
        let out: Vec<T> = x
            .data()
            .chunks_exact(d)
            .map(|r| T::c(r.iter().map(|&v| v.f64()).sum::<f64>()))
            .collect();
        let shape = &x.shape()[..x.rank().saturating_sub(1)];
        let value = Tensor::new(shape, out).expect("row count matches");
        self.record(value, &[input], Op::SumLast(input))
    }

    /// Row-wise cross-entropy `-Σ_j t_j · log softmax(z)_j` between logits
    /// `[B, K]` and (possibly unnormalized) target vectors `[B, K]`, with the
    /// log clamped at `ln(1e-12)`. Returns the `[B]` per-row losses.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        const OP: &str = "soft_cross_entropy";
        let z = self.value(logits);
        if z.shape() != targets.shape() || z.rank() != 2 {
            return Err(Error::shape(
                OP,
                format!("logits {:?} vs targets {:?}", z.shape(), targets.shape()),
            ));
        }
        let k = z.last_dim();
        let mut probs = Vec::with_capacity(z.len());
        let mut active = Vec::with_capacity(z.len());
        let mut losses = Vec::with_capacity(z.len() / k);
        for (row, t) in z.data().chunks_exact(k).zip(targets.data().chunks_exact(k)) {
            let max = row
                .iter()
                .map(|v| v.f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v.f64() - max).exp()).sum::<f64>().ln();
            let mut loss = 0f64;
            for (&zj, &tj) in row.iter().zip(t) {
                let logp = zj.f64() - lse;
                let clamped = logp < LOG_FLOOR;
                active.push(!clamped);
                probs.push(T::c(logp.exp()));
                loss -= tj.f64() * logp.max(LOG_FLOOR);
            }
            losses.push(T::c(loss));
        }
        let value = Tensor::new(&[losses.len()], losses)?;
        Ok(self.record(
            value,
            &[logits],
            Op::SmoothedCe {
                logits,
                targets: targets.data().to_vec(),
                probs,
                active,
            },
        ))
    }

    // -------------------------------------------------------------- backward

    /// Propagates adjoints from the scalar `loss` to every leaf that
    /// requires a gradient. Intermediate adjoints are released as soon as
    /// they have been consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = node.grad.take() else {
                continue;
            };
            backprop(before, node, &grad);
        }
        Ok(())
    }
}

fn add_row_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
}

pub(crate) fn softmax_row<T: Real>(row: &[T], out: &mut Vec<T>) {
    let max = row
        .iter()
        .map(|v| v.f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v.f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    out.extend(exps.iter().map(|&e| T::c(e / total)));
}

/// Adds the contribution of `node` (whose adjoint is `g`) to its inputs,
/// all of which live in `nodes` (they precede it on the tape).
fn backprop<T: Real>(nodes: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cout,
        } => {
            let rows = geom.out_pixels();
            let plen = geom.patch_len();
            let need_w = nodes[weight.0].requires_grad;
            let need_x = nodes[input.0].requires_grad;
            let (dw, dx) = {
                let x = nodes[input.0].value.data();
                let w = nodes[weight.0].value.data();
                let dw = need_w.then(|| {
                    let mut dw = vec![T::zero(); plen * cout];
                    if geom.is_pointwise() {
                        gemm(plen, rows, *cout, x, true, g, false, &mut dw, false);
                    } else {
                        let mut cols = vec![T::zero(); rows * plen];
                        kernels::im2col(x, geom, &mut cols);
                        gemm(plen, rows, *cout, &cols, true, g, false, &mut dw, false);
                    }
                    dw
                });
                let dx = need_x.then(|| {
                    let mut dcols = vec![T::zero(); rows * plen];
                    gemm(rows, *cout, plen, g, false, w, true, &mut dcols, false);
                    if geom.is_pointwise() {
                        dcols
                    } else {
                        let mut dx = vec![T::zero(); x.len()];
                        kernels::col2im(&dcols, geom, &mut dx);
                        dx
                    }
                });
                (dw, dx)
            };
            if let Some(dw) = dw {
                accumulate(nodes, *weight, &dw);
            }
            if let Some(dx) = dx {
                accumulate(nodes, *input, &dx);
            }
            if let Some(b) = bias {
                if nodes[b.0].requires_grad {
                    let db = column_sums(g, *cout);
                    accumulate(nodes, *b, &db);
                }
            }
        }
        Op::Depthwise {
            input,
            weight,
            geom,
        } => {
            let need_x = nodes[input.0].requires_grad;
            let need_w = nodes[weight.0].requires_grad;
            let mut dx = need_x.then(|| vec![T::zero(); nodes[input.0].value.len()]);
            let mut dw = need_w.then(|| vec![T::zero(); nodes[weight.0].value.len()]);
            kernels::depthwise_backward(
                nodes[input.0].value.data(),
                nodes[weight.0].value.data(),
                g,
                geom,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
            );
            if let Some(dx) = dx {
                accumulate(nodes, *input, &dx);
            }
            if let Some(dw) = dw {
                accumulate(nodes, *weight, &dw);
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } => {
            let c = inv_std.len();
            let m = (g.len() / c) as f64;
            let mut sum_g = vec![0f64; c];
            let mut sum_gx = vec![0f64; c];
            for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                for j in 0..c {
                    sum_g[j] += gr[j].f64();
                    sum_gx[j] += gr[j].f64() * xr[j].f64();
                }
            }
            if nodes[gamma.0].requires_grad {
                let dg: Vec<T> = sum_gx.iter().map(|&v| T::c(v)).collect();
                accumulate(nodes, *gamma, &dg);
            }
            if nodes[beta.0].requires_grad {
                let db: Vec<T> = sum_g.iter().map(|&v| T::c(v)).collect();
                accumulate(nodes, *beta, &db);
            }
            if nodes[input.0].requires_grad {
                let gam = nodes[gamma.0].value.data().to_vec();
                let mut dx = Vec::with_capacity(g.len());
                for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        let scale = gam[j].f64() * inv_std[j].f64();
                        let v = if *batch_stats {
                            scale / m * (m * gr[j].f64() - sum_g[j] - xr[j].f64() * sum_gx[j])
                        } else {
                            scale * gr[j].f64()
                        };
                        dx.push(T::c(v));
                    }
                }
                accumulate(nodes, *input, &dx);
            }
        }
        Op::Relu(input) => {
            let dx: Vec<T> = g
                .iter()
                .zip(out.data())
                .map(|(&gv, &y)| if y > T::zero() { gv } else { T::zero() })
                .collect();
            accumulate(nodes, *input, &dx);
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, g);
            accumulate(nodes, *b, g);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, *a, g);
            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
            accumulate(nodes, *b, &neg);
        }
        Op::Mul(a, b) => {
            let da: Vec<T> = g
                .iter()
                .zip(nodes[b.0].value.data())
                .map(|(&x, &y)| x * y)
                .collect();
            let db: Vec<T> = g
                .iter()
                .zip(nodes[a.0].value.data())
                .map(|(&x, &y)| x * y)
                .collect();
            accumulate(nodes, *a, &da);
            accumulate(nodes, *b, &db);
        }
        Op::Maximum(a, b) => {
            let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let mut da = vec![T::zero(); g.len()];
            let mut db = vec![T::zero(); g.len()];
            for i in 0..g.len() {
                if xa[i] >= xb[i] {
                    da[i] = g[i];
                } else {
                    db[i] = g[i];
                }
            }
            accumulate(nodes, *a, &da);
            accumulate(nodes, *b, &db);
        }
        Op::ConcatLast { inputs, widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut off = 0;
            for (&v, &w) in inputs.iter().zip(widths) {
                if nodes[v.0].requires_grad {
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    accumulate(nodes, v, &part);
                }
                off += w;
            }
        }
        Op::NarrowLast {
            input,
            start,
            width,
        } => {
            let d = nodes[input.0].value.last_dim();
            let mut dx = vec![T::zero(); nodes[input.0].value.len()];
            for (r, gr) in g.chunks_exact(*width).enumerate() {
                dx[r * d + start..r * d + start + width].copy_from_slice(gr);
            }
            accumulate(nodes, *input, &dx);
        }
        Op::Gap(input) => {
            let [_, h, w, c] = nodes[input.0].value.dims4();
            let hw = h * w;
            let inv = T::c(1.0 / hw as f64);
            let mut dx = Vec::with_capacity(nodes[input.0].value.len());
            for gs in g.chunks_exact(c) {
                for _ in 0..hw {
                    dx.extend(gs.iter().map(|&v| v * inv));
                }
            }
            accumulate(nodes, *input, &dx);
        }
        Op::Dropout { input, mask } => {
            let dx: Vec<T> = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
            accumulate(nodes, *input, &dx);
        }
        Op::Affine {
            input,
            weight,
            bias,
        } => {
            let (d, m) = (
                nodes[weight.0].value.shape()[0],
                nodes[weight.0].value.shape()[1],
            );
            let rows = g.len() / m.max(1);
            let (dw, dx) = {
                let x = nodes[input.0].value.data();
                let w = nodes[weight.0].value.data();
                let dw = nodes[weight.0].requires_grad.then(|| {
                    let mut dw = vec![T::zero(); d * m];
                    gemm(d, rows, m, x, true, g, false, &mut dw, false);
                    dw
                });
                let dx = nodes[input.0].requires_grad.then(|| {
                    let mut dx = vec![T::zero(); rows * d];
                    gemm(rows, m, d, g, false, w, true, &mut dx, false);
                    dx
                });
                (dw, dx)
            };
            if let Some(dw) = dw {
                accumulate(nodes, *weight, &dw);
            }
            if let Some(dx) = dx {
                accumulate(nodes, *input, &dx);
            }
            if let Some(b) = bias {
                if nodes[b.0].requires_grad {
                    let db = column_sums(g, m);
                    accumulate(nodes, *b, &db);
                }
            }
        }
        Op::Bmm {
            a,
            b,
            trans_b,
            dims,
        } => {
            let [batch, m, k, n] = *dims;
            let (da, db) = {
                let xa = nodes[a.0].value.data();
                let xb = nodes[b.0].value.data();
                let da = nodes[a.0].requires_grad.then(|| {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &xb[i * k * n..(i + 1) * k * n];
                        // da = g · bᵀ with b logically k×n
                        gemm(
                            m,
                            n,
                            k,
                            gi,
                            false,
                            bi,
                            !*trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    da
                });
                let db = nodes[b.0].requires_grad.then(|| {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &xa[i * m * k..(i + 1) * m * k];
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, ai, false, dst, false);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, dst, false);
                        }
                    }
                    db
                });
                (da, db)
            };
            if let Some(da) = da {
                accumulate(nodes, *a, &da);
            }
            if let Some(db) = db {
                accumulate(nodes, *b, &db);
            }
        }
        Op::Softmax(input) => {
            let k = out.last_dim();
            let mut dx = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks_exact(k).zip(out.data().chunks_exact(k)) {
                let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a.f64() * b.f64()).sum();
                dx.extend(
                    gr.iter()
                        .zip(yr)
                        .map(|(&a, &y)| T::c(y.f64() * (a.f64() - dot))),
                );
            }
            accumulate(nodes, *input, &dx);
        }
        Op::LayerNorm {
            input,
            xhat,
            inv_std,
        } => {
            let d = out.last_dim();
            let df = d as f64;
            let mut dx = Vec::with_capacity(g.len());
            for ((gr, xr), &is) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(inv_std) {
                let sg: f64 = gr.iter().map(|&v| v.f64()).sum();
                let sgx: f64 = gr.iter().zip(xr).map(|(&a, &b)| a.f64() * b.f64()).sum();
                for (&gv, &xv) in gr.iter().zip(xr) {
                    dx.push(T::c(is.f64() / df * (df * gv.f64() - sg - xv.f64() * sgx)));
                }
            }
            accumulate(nodes, *input, &dx);
        }
        Op::Scale(input, f) => {
            let dx: Vec<T> = g.iter().map(|&v| v * *f).collect();
            accumulate(nodes, *input, &dx);
        }
        Op::AddScalar(input) | Op::Reshape(input) => accumulate(nodes, *input, g),
        Op::Sum(input) => {
            let dx = vec![g[0]; nodes[input.0].value.len()];
            accumulate(nodes, *input, &dx);
        }
        Op::Mean(input) => {
            let n = nodes[input.0].value.len();
            let dx = vec![g[0] / T::c(n as f64); n];
            accumulate(nodes, *input, &dx);
        }
        Op::SumLast(input) => {
            let d = nodes[input.0].value.last_dim();
            let mut dx = Vec::with_capacity(g.len() * d);
            for &gv in g {
                dx.extend(std::iter::repeat_n(gv, d));
            }
            accumulate(nodes, *input, &dx);
        }
        Op::SmoothedCe {
            logits,
            targets,
            probs,
            active,
        } => {
            let k = nodes[logits.0].value.last_dim();
            let mut dz = Vec::with_capacity(probs.len());
            for (r, &gr) in g.iter().enumerate() {
                let span = r * k..(r + 1) * k;
                let t = &targets[span.clone()];
                let p = &probs[span.clone()];
                let a = &active[span];
                let mass: f64 = t
                    .iter()
                    .zip(a)
                    .filter(|(_, &on)| on)
                    .map(|(&tv, _)| tv.f64())
                    .sum();
                for j in 0..k {
                    let own = if a[j] { t[j].f64() } else { 0.0 };
                    dz.push(T::c(gr.f64() * (p[j].f64() * mass - own)));
                }
            }
            accumulate(nodes, *logits, &dz);
        }
        Op::GatherRows { input, rows } => {
            let e = out.last_dim();
            let mut dx = vec![T::zero(); nodes[input.0].value.len()];
            for (i, &r) in rows.iter().enumerate() {
                for (d, &s) in dx[r * e..(r + 1) * e]
                    .iter_mut()
                    .zip(&g[i * e..(i + 1) * e])
                {
                    *d = *d + s;
                }
            }
            accumulate(nodes, *input, &dx);
        }
        Op::L2NormalizeRows { input, norms } => {
            let e = out.last_dim();
            let mut dx = Vec::with_capacity(g.len());
            for ((gr, yr), &n) in g.chunks_exact(e).zip(out.data().chunks_exact(e)).zip(norms) {
                let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| a.f64() * b.f64()).sum();
                dx.extend(
                    gr.iter()
                        .zip(yr)
                        .map(|(&a, &y)| T::c((a.f64() - y.f64() * dot) / n.f64())),
                );
            }
            accumulate(nodes, *input, &dx);
        }
    }
}

fn column_sums<T: Real>(g: &[T], cols: usize) -> Vec<T> {
    let mut acc = vec![0f64; cols];
    for row in g.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.f64();
        }
    }
    acc.into_iter().map(T::c).collect()
}

fn accumulate<T: Real>(nodes: &mut [Node<T>], v: Var, delta: &[T]) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    match &mut node.grad {
        Some(g) => {
            for (a, &b) in g.iter_mut().zip(delta) {
                *a = *a + b;
            }
        }
        None => node.grad = Some(delta.to_vec()),
    }
}
