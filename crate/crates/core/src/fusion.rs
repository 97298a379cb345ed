//! Multi-level side-output fusion.
//!
//! Side maps from three low-level stages (one channel each) and the top
//! stage (`K` channels, one per category) are arranged by [`shared_concat`]
//! into `K` groups of four channels: `(A_side5^i, A_side1, A_side2, A_side3)`.
//! Each group is reduced to one output channel either with fixed learned
//! weights ([`fixed_fuse`], a `K`-grouped 1×1 convolution) or with weights
//! predicted from the input by a weight learner ([`dynamic_fuse`]).
//!
//! The weight learners come in two flavours. [`InvariantWeightLearner`]
//! pools the feature map globally and predicts one 4K-vector per image, so
//! every location shares it. [`AdaptiveWeightLearner`] uses only 1×1
//! convolutions, predicting 4K weights at every location from the features
//! at that location. Neither ends in an activation; [`softmax_constrain`]
//! exists for the ablation that forces each group of four to sum to one.

use rand::Rng;

use crate::autograd::{Activation, Conv2dSpec, Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{BatchNorm, Conv, Ctx, Linear, ParamStore, Upsampler};
use crate::tensor::Tensor;

/// Channels per category group in the concatenated map.
pub const GROUP: usize = 4;

/// The four normalized side maps, all at input resolution.
#[derive(Clone, Copy, Debug)]
pub struct SideOutputs {
    /// N×1×H×W
    pub a_side1: Var,
    pub a_side2: Var,
    pub a_side3: Var,
    /// N×K×H×W
    pub a_side5: Var,
}

/// `N×4K×H×W` map; group `i` holds `(A_side5^i, A_side1, A_side2, A_side3)`.
#[derive(Clone, Copy, Debug)]
pub struct ConcatMap {
    pub var: Var,
    pub num_classes: usize,
}

/// Per-category fusion weights `(w1..w4)` and an optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedFusionParams {
    /// `4K` values, category-major.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl FixedFusionParams {
    pub fn num_classes(&self) -> usize {
        self.weights.len() / GROUP
    }

    /// Weights as a `K×4×1×1` grouped-convolution kernel.
    pub fn kernel(&self) -> Result<Tensor> {
        if self.weights.is_empty() || self.weights.len() % GROUP != 0 {
            return Err(dim_err!("fixed fusion needs 4K weights, got {}", self.weights.len()));
        }
        Tensor::new(&[self.num_classes(), GROUP, 1, 1], self.weights.clone())
    }
}

/// Fusion weight field `Ψ(x)`, `N×4K×H×W`.
#[derive(Clone, Copy, Debug)]
pub struct FusionWeights {
    pub psi: Var,
    /// Set when every location of a sample carries the same weights.
    pub spatially_constant: bool,
}

pub fn shared_concat(g: &mut Graph, sides: &SideOutputs) -> Result<ConcatMap> {
    let (n, k, h, w) = g
        .value(sides.a_side5)
        .dims4()
        .map_err(|_| dim_err!("A_side5 must be NCHW"))?;
    for (name, v) in [("A_side1", sides.a_side1), ("A_side2", sides.a_side2), ("A_side3", sides.a_side3)] {
        if g.shape(v) != [n, 1, h, w] {
            return Err(dim_err!(
                "{name} has shape {:?}, expected [{n}, 1, {h}, {w}]",
                g.shape(v)
            ));
        }
    }
    let mut sources = Vec::with_capacity(GROUP * k);
    for i in 0..k {
        sources.extend([(sides.a_side5, i), (sides.a_side1, 0), (sides.a_side2, 0), (sides.a_side3, 0)]);
    }
    Ok(ConcatMap {
        var: g.gather_channels(&sources)?,
        num_classes: k,
    })
}

/// `A_fuse^i = w1·A_side5^i + w2·A_side1 + w3·A_side2 + w4·A_side3 (+ b_i)`
/// as a K-grouped 1×1 convolution; `weight` is `K×4×1×1`.
pub fn fixed_fuse(g: &mut Graph, cat: &ConcatMap, weight: Var, bias: Option<Var>) -> Result<Var> {
    let k = cat.num_classes;
    if g.shape(weight) != [k, GROUP, 1, 1] {
        return Err(dim_err!(
            "fixed fusion weight {:?} does not match K={k}",
            g.shape(weight)
        ));
    }
    let spec = Conv2dSpec {
        groups: k,
        ..Default::default()
    };
    g.conv2d(cat.var, weight, bias, spec)
}

/// [`fixed_fuse`] with constant weights.
pub fn fixed_fuse_params(g: &mut Graph, cat: &ConcatMap, params: &FixedFusionParams) -> Result<Var> {
    if params.num_classes() != cat.num_classes {
        return Err(dim_err!(
            "fusion params for K={} applied to K={}",
            params.num_classes(),
            cat.num_classes
        ));
    }
    let w = g.constant(params.kernel()?);
    let b = match &params.bias {
        Some(b) => Some(g.constant(Tensor::new(&[b.len()], b.clone())?)),
        None => None,
    };
    fixed_fuse(g, cat, w, b)
}

/// Elementwise product of `Ψ` and `A_cat`, summed within each category group.
pub fn dynamic_fuse(g: &mut Graph, cat: &ConcatMap, w: &FusionWeights) -> Result<Var> {
    if g.shape(cat.var) != g.shape(w.psi) {
        return Err(dim_err!(
            "fusion weights {:?} do not match concatenated map {:?}",
            g.shape(w.psi),
            g.shape(cat.var)
        ));
    }
    let prod = g.mul(w.psi, cat.var)?;
    g.group_sum(prod, GROUP)
}

/// Softmax within every 4-channel category group at every location.
pub fn softmax_constrain(g: &mut Graph, w: &FusionWeights) -> Result<FusionWeights> {
    Ok(FusionWeights {
        psi: g.activation(w.psi, Activation::SoftmaxGroup(GROUP))?,
        spatially_constant: w.spatially_constant,
    })
}

/// 1×1 conv → BN (optional) → upsample to input resolution.
#[derive(Clone, Debug)]
pub struct SideNormBlock {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
    pub up: Upsampler,
    pub out_channels: usize,
}

impl SideNormBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        out_channels: usize,
        factor: usize,
        normalizer: bool,
        learned_upsample: bool,
    ) -> Result<Self> {
        // BN's shift makes a conv bias redundant
        let conv = Conv::new(store, rng, &format!("{name}.conv"), c_in, out_channels, 1, Conv2dSpec::default(), !normalizer)?;
        let bn = normalizer.then(|| BatchNorm::new(store, &format!("{name}.bn"), out_channels));
        let up = Upsampler::new(store, &format!("{name}.up"), out_channels, factor, learned_upsample)?;
        Ok(Self {
            conv,
            bn,
            up,
            out_channels,
        })
    }

    /// Runs the block and checks that the output reaches `target` (H, W).
    pub fn forward(&self, ctx: &mut Ctx, feature: Var, target: (usize, usize)) -> Result<Var> {
        let mut x = self.conv.forward(ctx, feature)?;
        if let Some(bn) = &self.bn {
            x = bn.forward(ctx, x)?;
        }
        let y = self.up.forward(ctx, x)?;
        let s = ctx.graph.shape(y);
        if (s[2], s[3]) != target {
            return Err(Error::Config(format!(
                "side block upsampling by {} yields {}x{}, expected {}x{}",
                self.up.factor, s[2], s[3], target.0, target.1
            )));
        }
        Ok(y)
    }
}

/// Final learner BN: zero scale and a 1/4 shift, so a fresh learner emits the
/// uniform averaging weights that fixed fusion also starts from.
fn output_bn(store: &mut ParamStore, name: &str, channels: usize) -> BatchNorm {
    BatchNorm::with_affine(store, &format!("{name}.bn3"), channels, 0.0, 1.0 / GROUP as f64)
}

/// GAP → [FC → BN → ReLU]×2 → FC → BN, broadcast over all locations.
#[derive(Clone, Debug)]
pub struct InvariantWeightLearner {
    pub channels: usize,
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub fc2: Linear,
    pub bn2: BatchNorm,
    pub fc3: Linear,
    pub bn3: BatchNorm,
}

impl InvariantWeightLearner {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            channels,
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), channels, hidden)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, hidden)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), hidden),
            fc3: Linear::new(store, rng, &format!("{name}.fc3"), hidden, channels)?,
            bn3: output_bn(store, name, channels),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<FusionWeights> {
        let (_, c, h, w) = ctx.graph.value(x).dims4()?;
        if c != self.channels {
            return Err(dim_err!("invariant learner expects {} channels, got {c}", self.channels));
        }
        let mut v = ctx.graph.global_avg_pool(x)?;
        for (fc, bn) in [(&self.fc1, &self.bn1), (&self.fc2, &self.bn2)] {
            v = fc.forward(ctx, v)?;
            v = bn.forward(ctx, v)?;
            v = ctx.graph.relu(v)?;
        }
        v = self.fc3.forward(ctx, v)?;
        v = self.bn3.forward(ctx, v)?;
        Ok(FusionWeights {
            psi: ctx.graph.broadcast_spatial(v, h, w)?,
            spatially_constant: true,
        })
    }
}

/// [1×1 conv → BN → ReLU]×2 → 1×1 conv → BN, applied at every location.
#[derive(Clone, Debug)]
pub struct AdaptiveWeightLearner {
    pub channels: usize,
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub conv3: Conv,
    pub bn3: BatchNorm,
}

impl AdaptiveWeightLearner {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize, hidden: usize) -> Result<Self> {
        let spec = Conv2dSpec::default();
        Ok(Self {
            channels,
            conv1: Conv::new(store, rng, &format!("{name}.conv1"), channels, hidden, 1, spec, false)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), hidden),
            conv2: Conv::new(store, rng, &format!("{name}.conv2"), hidden, hidden, 1, spec, false)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), hidden),
            conv3: Conv::new(store, rng, &format!("{name}.conv3"), hidden, channels, 1, spec, false)?,
            bn3: output_bn(store, name, channels),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<FusionWeights> {
        let c = ctx.graph.value(x).dims4()?.1;
        if c != self.channels {
            return Err(dim_err!("adaptive learner expects {} channels, got {c}", self.channels));
        }
        let mut v = x;
        for (conv, bn) in [(&self.conv1, &self.bn1), (&self.conv2, &self.bn2)] {
            v = conv.forward(ctx, v)?;
            v = bn.forward(ctx, v)?;
            v = ctx.graph.relu(v)?;
        }
        v = self.conv3.forward(ctx, v)?;
        v = self.bn3.forward(ctx, v)?;
        Ok(FusionWeights {
            psi: v,
            spatially_constant: false,
        })
    }
}

/// Either learner, chosen by the model configuration.
#[derive(Clone, Debug)]
pub enum WeightLearner {
    Invariant(InvariantWeightLearner),
    Adaptive(AdaptiveWeightLearner),
}

impl WeightLearner {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<FusionWeights> {
        match self {
            WeightLearner::Invariant(l) => l.forward(ctx, x),
            WeightLearner::Adaptive(l) => l.forward(ctx, x),
        }
    }
}
