//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order, which is already a topological order. [`Graph::backward`] walks
//! the records once in reverse and accumulates into the persistent gradient
//! buffers of leaves that require gradients.

pub mod kernels;

use std::sync::Arc;

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::Tensor;
use kernels::{ConvGeom, UpGeom};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnConfig {
    /// Weight of the current batch in the running-average update.
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnRunning {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Debug)]
pub enum UpsampleKernel {
    /// Frozen bilinear kernel.
    Bilinear,
    /// Trainable `C × k × k` kernel.
    Learned(Var),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Softmax within consecutive channel groups of the given size.
    SoftmaxGroup(usize),
}

/// Options of the class-balanced binary cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BceOptions {
    /// Replaces the per-image, per-class β with a constant.
    pub beta_override: Option<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        input: Var,
        kernel: Option<Var>,
        kernel_value: Arc<Vec<f64>>,
        scale: Arc<Vec<f64>>,
        geom: UpGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    SoftmaxGroup(Var, usize),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    /// Output channel `c` copies channel `sources[c].1` of `sources[c].0`.
    GatherChannels(Vec<(Var, usize)>),
    BroadcastSpatial(Var),
    GroupSum(Var, usize),
    Bce {
        logits: Var,
        /// Per-element d(loss)/d(logit).
        dlogits: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::Upsample { input, kernel, .. } => {
                let mut v = vec![*input];
                v.extend(kernel);
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::GlobalAvgPool(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxGroup(a, _)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::BroadcastSpatial(a)
            | Op::GroupSum(a, _) => vec![*a],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::GatherChannels(src) => src.iter().map(|s| s.0).collect(),
            Op::Bce { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    /// Persistent gradient; allocated for leaves that require gradients.
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Tape of recorded tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

fn spatial(shape: &[usize]) -> usize {
    shape[2..].iter().product::<usize>().max(1)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph that rejects non-finite activations and gradients.
    pub fn checked() -> Self {
        Self {
            nodes: Vec::new(),
            checked: true,
        }
    }

    pub fn set_checked(&mut self, on: bool) {
        self.checked = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.len()]);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf, `None` when it does not require one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    /// Overwrites a leaf value, e.g. for finite-difference probing.
    pub fn set_leaf_value(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Contract("only leaf values can be replaced".into()));
        }
        if node.value.shape() != value.shape() {
            return Err(dim_err!(
                "leaf shape {:?} cannot take {:?}",
                node.value.shape(),
                value.shape()
            ));
        }
        node.value = value;
        Ok(())
    }

    fn dims4(&self, v: Var, what: &str) -> Result<(usize, usize, usize, usize)> {
        self.value(v)
            .dims4()
            .map_err(|_| dim_err!("{what} must be NCHW, got {:?}", self.shape(v)))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (n, c_in, h, w) = self.dims4(input, "conv2d input")?;
        let (c_out, kc, kh, kw) = self.dims4(kernel, "conv2d kernel")?;
        if spec.groups == 0 || spec.stride == 0 {
            return Err(config_err!("conv2d needs positive stride and groups"));
        }
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(config_err!(
                "groups {} must divide input channels {c_in} and output channels {c_out}",
                spec.groups
            ));
        }
        if ![1, 3].contains(&kh) || kh != kw {
            return Err(dim_err!("conv2d kernel must be 1x1 or 3x3, got {kh}x{kw}"));
        }
        if kc != c_in / spec.groups {
            return Err(dim_err!(
                "kernel expects {kc} input channels per group, input provides {}",
                c_in / spec.groups
            ));
        }
        if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return Err(dim_err!("conv2d input {h}x{w} smaller than kernel"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(dim_err!("bias shape {:?}, expected [{c_out}]", self.shape(b)));
            }
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&[n, c_out, geom.out_h(), geom.out_w()], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            "conv2d",
        )
    }

    /// Upsamples by an integer factor with a transposed convolution.
    pub fn upsample(&mut self, input: Var, factor: usize, kernel: UpsampleKernel) -> Result<Var> {
        if factor < 1 {
            return Err(config_err!("upsample factor must be >= 1"));
        }
        let (n, c, h, w) = self.dims4(input, "upsample input")?;
        let geom = UpGeom { n, c, h, w, factor };
        let k = geom.k();
        let base = kernels::bilinear_kernel(k);
        let (kernel_var, kernel_value) = match kernel {
            UpsampleKernel::Bilinear => (None, Arc::new(base.repeat(c))),
            UpsampleKernel::Learned(kv) => {
                if self.shape(kv) != [c, k, k] {
                    return Err(dim_err!(
                        "upsample kernel shape {:?}, expected [{c}, {k}, {k}]",
                        self.shape(kv)
                    ));
                }
                (Some(kv), Arc::new(self.value(kv).data().to_vec()))
            }
        };
        let scale = Arc::new(geom.border_scale(&base));
        let out = kernels::upsample_forward(&geom, self.value(input).data(), &kernel_value, &scale);
        let value = Tensor::new(&[n, c, geom.out_h(), geom.out_w()], out)?;
        self.push(
            value,
            Op::Upsample {
                input,
                kernel: kernel_var,
                kernel_value,
                scale,
                geom,
            },
            "upsample",
        )
    }

    /// Batch normalization over every axis except the channel axis (1).
    /// In train mode also returns the updated running statistics.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &BnRunning,
        cfg: BnConfig,
        mode: Mode,
    ) -> Result<(Var, Option<BnRunning>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(dim_err!("batch_norm input must have a channel axis, got {shape:?}"));
        }
        let (n, c, s) = (shape[0], shape[1], spatial(&shape));
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!("batch_norm gamma/beta must be [{c}]"));
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(dim_err!("batch_norm running stats must have {c} channels"));
        }
        if cfg.eps <= 0.0 {
            return Err(config_err!("batch_norm eps must be positive"));
        }
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let count = (n * s) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        match mode {
            Mode::Train => {
                for ni in 0..n {
                    for (ci, m) in mean.iter_mut().enumerate() {
                        *m += x[(ni * c + ci) * s..][..s].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for ni in 0..n {
                    for ci in 0..c {
                        let m = mean[ci];
                        var[ci] += x[(ni * c + ci) * s..][..s]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
            }
            Mode::Eval => {
                mean.copy_from_slice(&running.mean);
                var.copy_from_slice(&running.var);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * s;
                for i in base..base + s {
                    xhat[i] = (x[i] - mean[ci]) * inv_std[ci];
                    out[i] = g[ci] * xhat[i] + b[ci];
                }
            }
        }
        let updated = (mode == Mode::Train).then(|| {
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            BnRunning {
                mean: running
                    .mean
                    .iter()
                    .zip(&mean)
                    .map(|(r, m)| (1.0 - cfg.momentum) * r + cfg.momentum * m)
                    .collect(),
                var: running
                    .var
                    .iter()
                    .zip(&var)
                    .map(|(r, v)| (1.0 - cfg.momentum) * r + cfg.momentum * v * unbias)
                    .collect(),
            }
        });
        let value = Tensor::new(&shape, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            "batch_norm",
        )?;
        Ok((v, updated))
    }

    /// Spatial mean per channel: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(input, "global_avg_pool input")?;
        let hw = (h * w) as f64;
        let out: Vec<f64> = self
            .value(input)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        self.push(Tensor::new(&[n, c], out)?, Op::GlobalAvgPool(input), "global_avg_pool")
    }

    /// `y = x·Wᵀ + b` with `x: N×Cin`, `W: Cout×Cin`, `b: Cout`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, c_in) = match *self.shape(input) {
            [n, c] => (n, c),
            ref s => return Err(dim_err!("linear input must be N×C, got {s:?}")),
        };
        let c_out = match *self.shape(weight) {
            [o, i] if i == c_in => o,
            ref s => return Err(dim_err!("linear weight {s:?} incompatible with input width {c_in}")),
        };
        if self.shape(bias) != [c_out] {
            return Err(dim_err!("linear bias must be [{c_out}]"));
        }
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; n * c_out];
        for ni in 0..n {
            let row = &x[ni * c_in..(ni + 1) * c_in];
            for o in 0..c_out {
                out[ni * c_out + o] =
                    b[o] + row.iter().zip(&wt[o * c_in..(o + 1) * c_in]).map(|(a, w)| a * w).sum::<f64>();
            }
        }
        self.push(
            Tensor::new(&[n, c_out], out)?,
            Op::Linear {
                input,
                weight,
                bias,
            },
            "linear",
        )
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let t = self.value(input);
        match kind {
            Activation::Relu => {
                let out = Tensor::new(t.shape(), t.data().iter().map(|v| v.max(0.0)).collect())?;
                self.push(out, Op::Relu(input), "relu")
            }
            Activation::Sigmoid => {
                let out = Tensor::new(t.shape(), t.data().iter().map(|&v| sigmoid(v)).collect())?;
                self.push(out, Op::Sigmoid(input), "sigmoid")
            }
            Activation::SoftmaxGroup(group) => {
                let shape = t.shape().to_vec();
                if shape.len() < 2 {
                    return Err(dim_err!("softmax_group needs a channel axis"));
                }
                let (n, c, s) = (shape[0], shape[1], spatial(&shape));
                if group == 0 || c % group != 0 {
                    return Err(config_err!("channel count {c} not divisible by group size {group}"));
                }
                let x = t.data();
                let mut out = vec![0.0; x.len()];
                for ni in 0..n {
                    for g0 in (0..c).step_by(group) {
                        for si in 0..s {
                            let idx = |j: usize| (ni * c + g0 + j) * s + si;
                            let m = (0..group).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = (0..group).map(|j| (x[idx(j)] - m).exp()).sum();
                            for j in 0..group {
                                out[idx(j)] = (x[idx(j)] - m).exp() / z;
                            }
                        }
                    }
                }
                self.push(Tensor::new(&shape, out)?, Op::SoftmaxGroup(input, group), "softmax_group")
            }
        }
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect())?;
        self.push(out, Op::Add(a, b), "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (x, y) = (self.value(a), self.value(b));
        let out = Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect())?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|v| v * factor).collect())?;
        self.push(out, Op::Scale(a, factor), "scale")
    }

    /// Sum of all elements as a 1-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::new(&[1], vec![s])?, Op::Sum(a), "sum")
    }

    /// Builds an NCHW tensor whose channel `c` is `sources[c].1` of `sources[c].0`.
    pub fn gather_channels(&mut self, sources: &[(Var, usize)]) -> Result<Var> {
        let first = sources
            .first()
            .ok_or_else(|| Error::Dimension("gather_channels needs at least one source".into()))?;
        let (n, _, h, w) = self.dims4(first.0, "gather_channels source")?;
        let hw = h * w;
        let mut out = vec![0.0; n * sources.len() * hw];
        for (oc, &(src, ch)) in sources.iter().enumerate() {
            let (sn, sc, sh, sw) = self.dims4(src, "gather_channels source")?;
            if (sn, sh, sw) != (n, h, w) {
                return Err(dim_err!(
                    "gather_channels: source {:?} does not match N={n}, H={h}, W={w}",
                    self.shape(src)
                ));
            }
            if ch >= sc {
                return Err(dim_err!("gather_channels: channel {ch} out of range {sc}"));
            }
            let data = self.value(src).data();
            for ni in 0..n {
                out[(ni * sources.len() + oc) * hw..][..hw]
                    .copy_from_slice(&data[(ni * sc + ch) * hw..][..hw]);
            }
        }
        let value = Tensor::new(&[n, sources.len(), h, w], out)?;
        self.push(value, Op::GatherChannels(sources.to_vec()), "gather_channels")
    }

    /// `N×C → N×C×H×W`, copying each value across the spatial grid.
    pub fn broadcast_spatial(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let (n, c) = match *self.shape(input) {
            [n, c] => (n, c),
            ref s => return Err(dim_err!("broadcast_spatial input must be N×C, got {s:?}")),
        };
        let mut out = Vec::with_capacity(n * c * h * w);
        for &v in self.value(input).data() {
            out.extend(std::iter::repeat(v).take(h * w));
        }
        self.push(Tensor::new(&[n, c, h, w], out)?, Op::BroadcastSpatial(input), "broadcast_spatial")
    }

    /// Sums consecutive channel groups: `N×(G·g)×H×W → N×G×H×W`.
    pub fn group_sum(&mut self, input: Var, group: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(input, "group_sum input")?;
        if group == 0 || c % group != 0 {
            return Err(config_err!("channel count {c} not divisible by group size {group}"));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let groups = c / group;
        let mut out = vec![0.0; n * groups * hw];
        for ni in 0..n {
            for gi in 0..groups {
                let dst = &mut out[(ni * groups + gi) * hw..][..hw];
                for j in 0..group {
                    let src = &x[(ni * c + gi * group + j) * hw..][..hw];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        self.push(Tensor::new(&[n, groups, h, w], out)?, Op::GroupSum(input, group), "group_sum")
    }

    /// Class-balanced multi-label binary cross-entropy on logits.
    ///
    /// For every image and class, β is the fraction of non-edge pixels of that
    /// class map; positives are weighted by β and negatives by 1−β. A class
    /// map with no positive pixel uses the fraction of pixels that are not
    /// edges of any class instead. The sum over pixels and classes is averaged
    /// over the batch.
    pub fn reweighted_bce(&mut self, logits: Var, labels: &Tensor, opts: BceOptions) -> Result<Var> {
        let (n, k, h, w) = self.dims4(logits, "bce logits")?;
        if labels.shape() != self.shape(logits) {
            return Err(dim_err!(
                "labels {:?} do not match logits {:?}",
                labels.shape(),
                self.shape(logits)
            ));
        }
        if labels.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("edge labels must be binary".into()));
        }
        let hw = h * w;
        let z = self.value(logits).data();
        let y = labels.data();
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; z.len()];
        for ni in 0..n {
            let img = &y[ni * k * hw..(ni + 1) * k * hw];
            let any_edge = (0..hw).filter(|&p| (0..k).any(|c| img[c * hw + p] == 1.0)).count();
            let image_beta = 1.0 - any_edge as f64 / hw as f64;
            for ci in 0..k {
                let base = (ni * k + ci) * hw;
                let pos = y[base..base + hw].iter().filter(|&&v| v == 1.0).count();
                let beta = opts.beta_override.unwrap_or(if pos == 0 {
                    image_beta
                } else {
                    1.0 - pos as f64 / hw as f64
                });
                for i in base..base + hw {
                    let (zi, yi) = (z[i], y[i]);
                    // -log σ(z) = softplus(-z); -log(1-σ(z)) = softplus(z)
                    loss += beta * yi * softplus(-zi) + (1.0 - beta) * (1.0 - yi) * softplus(zi);
                    let s = sigmoid(zi);
                    dlogits[i] = ((1.0 - beta) * (1.0 - yi) * s - beta * yi * (1.0 - s)) / n as f64;
                }
            }
        }
        let value = Tensor::new(&[1], vec![loss / n as f64])?;
        self.push(value, Op::Bce { logits, dlogits }, "reweighted_bce")
    }

    /// Back-propagates from a single-element `loss`, adding ∂loss/∂leaf into
    /// every leaf that requires a gradient. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if self.checked && gout.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of node {idx}")));
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gout);
                continue;
            }
            for (v, g) in self.local_grads(node, &gout) {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => grads[v.0] = Some(g),
                }
            }
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let (Some(g), Some(acc)) = (g, self.nodes[idx].grad.as_mut()) {
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of one recorded op.
    fn local_grads(&self, node: &Node, gout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (dx, dk, db) =
                    kernels::conv2d_backward(geom, val(*input), val(*kernel), gout, rg(*input), rg(*kernel));
                let mut out = Vec::new();
                out.extend(dx.map(|g| (*input, g)));
                out.extend(dk.map(|g| (*kernel, g)));
                out.extend(bias.map(|b| (b, db)));
                out
            }
            Op::Upsample {
                input,
                kernel,
                kernel_value,
                scale,
                geom,
            } => {
                let want_k = kernel.is_some_and(rg);
                let (dx, dk) =
                    kernels::upsample_backward(geom, val(*input), kernel_value, scale, gout, want_k);
                let mut out = vec![(*input, dx)];
                if let (Some(kv), Some(dk)) = (kernel, dk) {
                    out.push((*kv, dk));
                }
                out
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.nodes[input.0].value.shape();
                let (n, c, s) = (shape[0], shape[1], spatial(shape));
                let g = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        for i in base..base + s {
                            dgamma[ci] += gout[i] * xhat[i];
                            dbeta[ci] += gout[i];
                        }
                    }
                }
                let m = (n * s) as f64;
                let mut dx = vec![0.0; gout.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * s;
                        for i in base..base + s {
                            dx[i] = if *train {
                                // dxhat = gout·γ; Σdxhat = γ·dβ; Σdxhat·xhat = γ·dγ
                                g[ci] * inv_std[ci] / m * (m * gout[i] - dbeta[ci] - xhat[i] * dgamma[ci])
                            } else {
                                g[ci] * inv_std[ci] * gout[i]
                            };
                        }
                    }
                }
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::GlobalAvgPool(input) => {
                let shape = self.nodes[input.0].value.shape();
                let hw = shape[2] * shape[3];
                let mut dx = Vec::with_capacity(gout.len() * hw);
                for &g in gout {
                    dx.extend(std::iter::repeat(g / hw as f64).take(hw));
                }
                vec![(*input, dx)]
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = val(*input);
                let wt = val(*weight);
                let c_out = self.nodes[bias.0].value.len();
                let c_in = wt.len() / c_out;
                let n = x.len() / c_in;
                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; wt.len()];
                let mut db = vec![0.0; c_out];
                for ni in 0..n {
                    for o in 0..c_out {
                        let go = gout[ni * c_out + o];
                        db[o] += go;
                        for i in 0..c_in {
                            dx[ni * c_in + i] += go * wt[o * c_in + i];
                            dw[o * c_in + i] += go * x[ni * c_in + i];
                        }
                    }
                }
                vec![(*input, dx), (*weight, dw), (*bias, db)]
            }
            Op::Relu(input) => {
                let x = val(*input);
                let dx = gout.iter().zip(x).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                vec![(*input, dx)]
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                let dx = gout.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                vec![(*input, dx)]
            }
            Op::SoftmaxGroup(input, group) => {
                let shape = node.value.shape();
                let (n, c, s) = (shape[0], shape[1], spatial(shape));
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ni in 0..n {
                    for g0 in (0..c).step_by(*group) {
                        for si in 0..s {
                            let idx = |j: usize| (ni * c + g0 + j) * s + si;
                            let dot: f64 = (0..*group).map(|j| gout[idx(j)] * y[idx(j)]).sum();
                            for j in 0..*group {
                                dx[idx(j)] = y[idx(j)] * (gout[idx(j)] - dot);
                            }
                        }
                    }
                }
                vec![(*input, dx)]
            }
            Op::Add(a, b) => vec![(*a, gout.to_vec()), (*b, gout.to_vec())],
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                vec![
                    (*a, gout.iter().zip(y).map(|(g, v)| g * v).collect()),
                    (*b, gout.iter().zip(x).map(|(g, v)| g * v).collect()),
                ]
            }
            Op::Scale(a, f) => vec![(*a, gout.iter().map(|g| g * f).collect())],
            Op::Sum(a) => vec![(*a, vec![gout[0]; self.nodes[a.0].value.len()])],
            Op::GatherChannels(sources) => {
                let shape = node.value.shape();
                let (n, c_out, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
                for (oc, &(src, ch)) in sources.iter().enumerate() {
                    if !rg(src) {
                        continue;
                    }
                    let sc = self.nodes[src.0].value.shape()[1];
                    let pos = match out.iter().position(|(v, _)| *v == src) {
                        Some(p) => p,
                        None => {
                            out.push((src, vec![0.0; self.nodes[src.0].value.len()]));
                            out.len() - 1
                        }
                    };
                    let acc = &mut out[pos].1;
                    for ni in 0..n {
                        let d = &mut acc[(ni * sc + ch) * hw..][..hw];
                        let g = &gout[(ni * c_out + oc) * hw..][..hw];
                        d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                }
                out
            }
            Op::BroadcastSpatial(input) => {
                let len = self.nodes[input.0].value.len();
                let hw = gout.len() / len;
                let dx = gout.chunks(hw).map(|p| p.iter().sum()).collect();
                vec![(*input, dx)]
            }
            Op::GroupSum(input, group) => {
                let shape = self.nodes[input.0].value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let groups = c / group;
                let mut dx = vec![0.0; n * c * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        let src = &gout[(ni * groups + ci / group) * hw..][..hw];
                        dx[(ni * c + ci) * hw..][..hw].copy_from_slice(src);
                    }
                }
                vec![(*input, dx)]
            }
            Op::Bce { logits, dlogits } => {
                vec![(*logits, dlogits.iter().map(|d| d * gout[0]).collect())]
            }
        }
    }
}
