//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! enough saved state to compute vector-Jacobian products. Nodes are only ever
//! appended, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => {
                if v < 0.0 {
                    0.0
                } else {
                    v
                }
            }
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving update from one training batch.
    pub fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = ((1.0 - m) * *r + m * b).max(0.0);
        }
    }
}

/// Per-channel statistics observed on a training batch; `var` is unbiased.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Activation(Var, Activation),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeometry,
        per_sample: bool,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        geom: ConvGeometry,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Dropout {
        x: Var,
        /// Survivors.
        mask: Vec<bool>,
        keep: f64,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Bce {
        p: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Affine { .. } => "affine",
            Op::Activation(..) => "activation",
            Op::Conv2d {
                per_sample: true, ..
            } => "conv2d_per_sample",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::Dropout { .. } => "dropout",
            Op::L2NormalizeRows { .. } => "l2_normalize",
            Op::Embedding { .. } => "embedding",
            Op::Bce { .. } => "bce",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed primitives. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kinks: u64,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn dim_err<T>(msg: String) -> Result<T> {
    Err(Error::Dimension(msg))
}

/// Splits a shape around `axis` into `(outer, extent, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of recorded nodes per operation name.
    pub fn op_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for n in &self.nodes {
            *counts.entry(n.op.name()).or_insert(0) += 1;
        }
        counts
    }

    /// Shapes of the kernels of every per-sample (text-kernel) convolution,
    /// in execution order.
    pub fn per_sample_kernel_shapes(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Conv2d {
                    k,
                    per_sample: true,
                    ..
                } => Some(self.shape(k).to_vec()),
                _ => None,
            })
            .collect()
    }

    /// Hash of which side of every non-differentiable point (ReLU at 0, BCE
    /// clamp bounds) each element landed on. Two evaluations with equal
    /// signatures ran through the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    fn fold_kinks(&mut self, bits: impl Iterator<Item = u8>) {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        for b in bits {
            self.kinks = (self.kinks ^ b as u64).wrapping_mul(PRIME);
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            ));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(v, Op::Slice { x, axis, start }, &[x]))
    }

    /// Concatenation along `axis`; parts appear in argument order.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return dim_err("concat of an empty list".into()),
        };
        if axis >= first.len() {
            return dim_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(format!("concat on axis {axis}: {s:?} vs {first:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Channel concatenation of `N×Ci×H×W` maps.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if let Some(&p) = parts.iter().find(|&&p| self.shape(p).len() != 4) {
            return dim_err(format!(
                "concat_channels expects NCHW, got {:?}",
                self.shape(p)
            ));
        }
        self.concat(parts, 1)
    }

    /// `y = x·Wᵀ + b` over the last axis of `x`; `w` is `Dout×Din`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().expect("non-empty shape");
        if ws.len() != 2 || ws[1] != din {
            return dim_err(format!("affine: input {xs:?} against weight {ws:?}"));
        }
        let dout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return dim_err(format!(
                    "affine: bias {:?} for {dout} outputs",
                    self.shape(b)
                ));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut data = vec![0.0; rows * dout];
        kernels::gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            0.0,
            &mut data,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in data.chunks_mut(dout) {
                row.iter_mut().zip(bias).for_each(|(y, c)| *y += c);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let v = Tensor::new(shape, data)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(v, Op::Affine { x, w, b }, &inputs))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Relu {
            let bits: Vec<u8> = self
                .value(x)
                .data()
                .iter()
                .map(|&z| (z > 0.0) as u8)
                .collect();
            self.fold_kinks(bits.into_iter());
        }
        let v = self.value(x).map(|z| kind.apply(z));
        self.push(v, Op::Activation(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    /// Cross-correlation of `N×Cin×H×W` input with a `Cout×Cin×kh×kw` kernel.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_impl(x, k, stride, pad, false)
    }

    /// Like [`conv2d`](Self::conv2d) with a distinct kernel per sample:
    /// `k` is `N×Cout×Cin×kh×kw`.
    pub fn conv2d_per_sample(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_impl(x, k, stride, pad, true)
    }

    fn conv2d_impl(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
        per_sample: bool,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 {
            return dim_err(format!("conv2d input must be NCHW, got {xs:?}"));
        }
        let kdims = if per_sample {
            if ks.len() != 5 || ks[0] != xs[0] {
                return dim_err(format!("per-sample kernel {ks:?} for input {xs:?}"));
            }
            &ks[1..]
        } else {
            if ks.len() != 4 {
                return dim_err(format!("conv2d kernel must be 4-D, got {ks:?}"));
            }
            &ks[..]
        };
        let (cout, cin, kh, kw) = (kdims[0], kdims[1], kdims[2], kdims[3]);
        if cin != xs[1] {
            return dim_err(format!(
                "conv2d: input has {} channels, kernel expects {cin}",
                xs[1]
            ));
        }
        let geom = ConvGeometry::new(cin, (xs[2], xs[3]), (kh, kw), stride, pad)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            xs[0],
            self.value(k).data(),
            per_sample,
            cout,
            &geom,
        );
        let v = Tensor::new([xs[0], cout, geom.ho, geom.wo], out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                k,
                geom,
                per_sample,
            },
            &[x, k],
        ))
    }

    /// Transposed convolution with a `Cin×Cout×kh×kw` kernel; the adjoint of
    /// [`conv2d`](Self::conv2d) with matching geometry.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return dim_err(format!("conv_transpose2d: input {xs:?}, kernel {ks:?}"));
        }
        if ks[0] != xs[1] {
            return dim_err(format!(
                "conv_transpose2d: input has {} channels, kernel expects {}",
                xs[1], ks[0]
            ));
        }
        let geom =
            ConvGeometry::transposed(ks[1], (xs[2], xs[3]), (ks[2], ks[3]), stride, pad, out_pad)?;
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            xs[0],
            xs[1],
            self.value(k).data(),
            &geom,
        );
        let v = Tensor::new([xs[0], ks[1], geom.h, geom.w], out)?;
        Ok(self.push(v, Op::ConvTranspose2d { x, k, geom }, &[x, k]))
    }

    /// Adds a per-channel bias to an `N×C×H×W` map.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(b) != [xs[1]] {
            return dim_err(format!("channel_bias {:?} for {xs:?}", self.shape(b)));
        }
        let s = xs[2] * xs[3];
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, plane) in v.data_mut().chunks_mut(s).enumerate() {
            let c = bias[i % xs[1]];
            plane.iter_mut().for_each(|p| *p += c);
        }
        Ok(self.push(v, Op::ChannelBias { x, b }, &[x, b]))
    }

    /// Batch normalization over the `N`, `H`, `W` axes of an `N×C×H×W` map.
    /// In training mode the batch statistics are returned so the caller can
    /// fold them into `state`; inference mode uses `state` as-is.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &BatchNormState,
        training: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return dim_err(format!("batchnorm2d expects NCHW, got {xs:?}"));
        }
        let (n, c, s) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || state.channels() != c {
            return dim_err(format!("batchnorm2d: parameters do not match {c} channels"));
        }
        let xd = self.value(x).data();
        let (mean, var, stats) = if training {
            let count = n * s;
            if count < 2 {
                return Err(Error::Contract(
                    "batchnorm2d training needs more than one value per channel".into(),
                ));
            }
            let (mean, var) = kernels::batch_moments(xd, n, c, s);
            let unbiased = var
                .iter()
                .map(|v| v * count as f64 / (count - 1) as f64)
                .collect();
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        } else {
            (state.running_mean.clone(), state.running_var.clone(), None)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for (i, (plane, (hp, op))) in xd
            .chunks(s)
            .zip(xhat.chunks_mut(s).zip(out.chunks_mut(s)))
            .enumerate()
        {
            let ch = i % c;
            for ((&v, h), o) in plane.iter().zip(hp.iter_mut()).zip(op.iter_mut()) {
                *h = (v - mean[ch]) * inv_std[ch];
                *o = g[ch] * *h + bt[ch];
            }
        }
        let v = Tensor::new(xs, out)?;
        let var_out = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            &[x, gamma, beta],
        );
        Ok((var_out, stats))
    }

    /// Inverted dropout: survivors are scaled by `1/(1−p)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let mask: Vec<bool> = (0..self.value(x).numel())
            .map(|_| rng.gen::<f64>() >= p)
            .collect();
        let v = {
            let t = self.value(x);
            let data = t
                .data()
                .iter()
                .zip(&mask)
                .map(|(&a, &m)| if m { a / keep } else { 0.0 })
                .collect();
            Tensor::new(t.shape().to_vec(), data)?
        };
        Ok(self.push(v, Op::Dropout { x, mask, keep }, &[x]))
    }

    /// Scales each row (last axis) to unit Euclidean norm:
    /// `y = x / (‖x‖ + 1e-8)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = *t.shape().last().unwrap();
        let mut norms = Vec::with_capacity(t.numel() / d);
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            data.extend(row.iter().map(|v| v / (norm + L2_DENOM_EPS)));
        }
        let v = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(v, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Gathers rows of a `V×E` table; output is `len(ids)×E`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return dim_err(format!("embedding table must be 2-D, got {ts:?}"));
        }
        if ids.is_empty() {
            return Err(Error::Contract(
                "embedding lookup of an empty id list".into(),
            ));
        }
        let (v, e) = (ts[0], ts[1]);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfVocabulary { id, size: v });
            }
            data.extend_from_slice(&src[id * e..(id + 1) * e]);
        }
        let out = Tensor::new([ids.len(), e], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target` over
    /// the pixels where `ignore` is zero. Probabilities are clamped to
    /// `[BCE_EPS, 1 − BCE_EPS]`.
    pub fn bce(&mut self, p: Var, target: &Tensor, ignore: Option<&Tensor>) -> Result<Var> {
        let ps = self.shape(p).to_vec();
        if target.numel() != self.value(p).numel() {
            return dim_err(format!(
                "bce: prediction {ps:?} vs target {:?}",
                target.shape()
            ));
        }
        let mut weight = vec![1.0; target.numel()];
        if let Some(ig) = ignore {
            if ig.numel() != target.numel() {
                return dim_err(format!("bce: ignore mask {:?} vs {ps:?}", ig.shape()));
            }
            for (w, &i) in weight.iter_mut().zip(ig.data()) {
                if i != 0.0 {
                    *w = 0.0;
                }
            }
        }
        let count = weight.iter().filter(|&&w| w != 0.0).count();
        if count == 0 {
            return Err(Error::Contract("bce: every pixel is ignored".into()));
        }
        let inv = 1.0 / count as f64;
        weight.iter_mut().for_each(|w| *w *= inv);
        let bits: Vec<u8> = self
            .value(p)
            .data()
            .iter()
            .map(|&v| (v < BCE_EPS) as u8 | ((v > 1.0 - BCE_EPS) as u8) << 1)
            .collect();
        self.fold_kinks(bits.into_iter());
        let loss: f64 = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .zip(&weight)
            .filter(|(_, &w)| w != 0.0)
            .map(|((&pv, &t), &w)| w * bce_term(pv, t))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.data().to_vec(),
                weight,
            },
            &[p],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "loss {loss:?} is not on this tape"
            )));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| accumulate(grads, v, t);
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, hadamard(g, self.value(*b)));
                }
                if self.wants(*b) {
                    acc(*b, hadamard(g, self.value(*a)));
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a).to_vec(), gd[0])),
            Op::Reshape(a) => {
                let t = g
                    .clone()
                    .reshape(self.shape(*a).to_vec())
                    .expect("same numel");
                acc(*a, t)
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let (outer, extent, inner) = axis_split(&xs, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = Tensor::zeros(xs);
                let dst = dx.data_mut();
                for o in 0..outer {
                    let base = (o * extent + start) * inner;
                    let src = &gd[o * len * inner..(o + 1) * len * inner];
                    dst[base..base + len * inner].copy_from_slice(src);
                }
                acc(*x, dx)
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if self.wants(p) {
                        let mut data = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&gd[base..base + ext * inner]);
                        }
                        acc(
                            p,
                            Tensor::new(self.shape(p).to_vec(), data).expect("same shape"),
                        );
                    }
                    offset += ext;
                }
            }
            Op::Affine { x, w, b } => {
                let ws = self.shape(*w);
                let (dout, din) = (ws[0], ws[1]);
                let rows = gd.len() / dout;
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * din];
                    kernels::gemm(
                        rows,
                        dout,
                        din,
                        gd,
                        false,
                        self.value(*w).data(),
                        false,
                        0.0,
                        &mut dx,
                    );
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), dx).expect("shape"));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; dout * din];
                    kernels::gemm(
                        dout,
                        rows,
                        din,
                        gd,
                        true,
                        self.value(*x).data(),
                        false,
                        0.0,
                        &mut dw,
                    );
                    acc(*w, Tensor::new([dout, din], dw).expect("shape"));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; dout];
                    for row in gd.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    acc(b, Tensor::new([dout], db).expect("shape"));
                }
            }
            Op::Activation(x, kind) => {
                let data: Vec<f64> = match kind {
                    Activation::Relu => self
                        .value(*x)
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&z, &gv)| if z > 0.0 { gv } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&y, &gv)| gv * y * (1.0 - y))
                        .collect(),
                    Activation::Tanh => node
                        .value
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&y, &gv)| gv * (1.0 - y * y))
                        .collect(),
                };
                acc(*x, Tensor::new(g.shape().to_vec(), data).expect("shape"))
            }
            Op::Conv2d {
                x,
                k,
                geom,
                per_sample,
            } => {
                let n = self.shape(*x)[0];
                let cout = node.value.shape()[1];
                let (dx, dk) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    self.value(*k).data(),
                    *per_sample,
                    cout,
                    geom,
                    gd,
                    self.wants(*x),
                    self.wants(*k),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(self.shape(*x).to_vec(), dx).expect("shape"));
                }
                if let Some(dk) = dk {
                    acc(*k, Tensor::new(self.shape(*k).to_vec(), dk).expect("shape"));
                }
            }
            Op::ConvTranspose2d { x, k, geom } => {
                let xs = self.shape(*x);
                let (dx, dk) = kernels::conv_transpose2d_backward(
                    self.value(*x).data(),
                    xs[0],
                    xs[1],
                    self.value(*k).data(),
                    geom,
                    gd,
                    self.wants(*x),
                    self.wants(*k),
                );
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(xs.to_vec(), dx).expect("shape"));
                }
                if let Some(dk) = dk {
                    acc(*k, Tensor::new(self.shape(*k).to_vec(), dk).expect("shape"));
                }
            }
            Op::ChannelBias { x, b } => {
                if self.wants(*x) {
                    acc(*x, g.clone());
                }
                if self.wants(*b) {
                    let s = g.shape();
                    let db = kernels::channel_sums(gd, s[0], s[1], s[2] * s[3]);
                    acc(*b, Tensor::new([s[1]], db).expect("shape"));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let s = g.shape();
                let (n, c, sp) = (s[0], s[1], s[2] * s[3]);
                let dbeta = kernels::channel_sums(gd, n, c, sp);
                let gx: Vec<f64> = gd.iter().zip(xhat).map(|(a, b)| a * b).collect();
                let dgamma = kernels::channel_sums(&gx, n, c, sp);
                if self.wants(*x) {
                    let gam = self.value(*gamma).data();
                    let count = (n * sp) as f64;
                    let mut dx = vec![0.0; gd.len()];
                    for (i, (dxp, (gp, hp))) in dx
                        .chunks_mut(sp)
                        .zip(gd.chunks(sp).zip(xhat.chunks(sp)))
                        .enumerate()
                    {
                        let ch = i % c;
                        let scale = gam[ch] * inv_std[ch];
                        if *training {
                            let (mb, mg) = (dbeta[ch] / count, dgamma[ch] / count);
                            for ((d, &gv), &h) in dxp.iter_mut().zip(gp).zip(hp) {
                                *d = scale * (gv - mb - h * mg);
                            }
                        } else {
                            for (d, &gv) in dxp.iter_mut().zip(gp) {
                                *d = scale * gv;
                            }
                        }
                    }
                    acc(*x, Tensor::new(s.to_vec(), dx).expect("shape"));
                }
                if self.wants(*gamma) {
                    acc(*gamma, Tensor::new([c], dgamma).expect("shape"));
                }
                if self.wants(*beta) {
                    acc(*beta, Tensor::new([c], dbeta).expect("shape"));
                }
            }
            Op::Dropout { x, mask, keep } => {
                let data = gd
                    .iter()
                    .zip(mask)
                    .map(|(&a, &m)| if m { a / keep } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), data).expect("shape"))
            }
            Op::L2NormalizeRows { x, norms } => {
                let xd = self.value(*x).data();
                let d = *g.shape().last().unwrap();
                let mut dx = Vec::with_capacity(xd.len());
                for ((row, grow), &norm) in xd.chunks(d).zip(gd.chunks(d)).zip(norms) {
                    let denom = norm + L2_DENOM_EPS;
                    let dot: f64 = row.iter().zip(grow).map(|(a, b)| a * b).sum();
                    // d/dx [x / (‖x‖+δ)] = I/(‖x‖+δ) − x xᵀ / (‖x‖ (‖x‖+δ)²)
                    let coef = if norm > 0.0 {
                        dot / (norm * denom * denom)
                    } else {
                        0.0
                    };
                    dx.extend(
                        row.iter()
                            .zip(grow)
                            .map(|(&xv, &gv)| gv / denom - xv * coef),
                    );
                }
                acc(*x, Tensor::new(g.shape().to_vec(), dx).expect("shape"))
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table).to_vec();
                let e = ts[1];
                let mut dt = Tensor::zeros(ts);
                let dst = dt.data_mut();
                for (row, &id) in ids.iter().enumerate() {
                    for (d, &v) in dst[id * e..(id + 1) * e]
                        .iter_mut()
                        .zip(&gd[row * e..(row + 1) * e])
                    {
                        *d += v;
                    }
                }
                acc(*table, dt)
            }
            Op::Bce { p, target, weight } => {
                let up = gd[0];
                let data = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((&pv, &t), &w)| {
                        if w == 0.0 {
                            return 0.0;
                        }
                        let pc = pv.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        up * w * ((1.0 - t) / (1.0 - pc) - t / pc)
                    })
                    .collect();
                acc(
                    *p,
                    Tensor::new(self.shape(*p).to_vec(), data).expect("shape"),
                )
            }
        }
    }
}

/// Added to the kernel norm so zero rows never divide by zero.
pub const L2_DENOM_EPS: f64 = 1e-8;

/// Probability clamp used by binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// `−[t·ln p + (1−t)·ln(1−p)]` with `p` clamped to `[BCE_EPS, 1−BCE_EPS]`.
pub fn bce_term(p: f64, t: f64) -> f64 {
    let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}
