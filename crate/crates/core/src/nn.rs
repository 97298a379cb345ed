//! Named parameters and the layers built from them.

use rand::Rng;

use crate::autograd::{kernels, BnConfig, BnRunning, Conv2dSpec, Graph, Mode, UpsampleKernel, Var};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
    UpKernel,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
            Role::BnGamma => "bn_gamma",
            Role::BnBeta => "bn_beta",
            Role::BnMean => "bn_mean",
            Role::BnVar => "bn_var",
            Role::UpKernel => "up_kernel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Role::Weight,
            Role::Bias,
            Role::BnGamma,
            Role::BnBeta,
            Role::BnMean,
            Role::BnVar,
            Role::UpKernel,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: Role,
    pub value: Tensor,
    /// Updated by the optimizer; running statistics and frozen kernels are not.
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: Role, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            role,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Replaces every value from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(dim_err!("parameter count {} vs {}", other.len(), self.len()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(dim_err!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                ));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BnRunning,
}

/// Forward-pass context: binds parameters into a graph on first use.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    pub mode: Mode,
    pub bn: BnConfig,
    bn_updates: Vec<BnUpdate>,
}

/// Parameter bindings and side effects of a finished forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    pub vars: Vec<(ParamId, Var)>,
    pub bn_updates: Vec<BnUpdate>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.vars.iter().find(|(p, _)| *p == id).map(|(_, v)| *v)
    }
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, mode: Mode, bn: BnConfig) -> Self {
        Self {
            graph,
            store,
            bound: vec![None; store.len()],
            mode,
            bn,
            bn_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.graph.leaf(p.value.clone(), p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn finish(self) -> Bindings {
        Bindings {
            vars: self
                .bound
                .iter()
                .enumerate()
                .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
                .collect(),
            bn_updates: self.bn_updates,
        }
    }
}

/// Uniform He-style initialization: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Result<Self> {
        if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
            return Err(Error::Config(format!("{name}: groups must divide channel counts")));
        }
        let cin_g = c_in / spec.groups;
        let w = he_uniform(&[c_out, cin_g, kernel, kernel], cin_g * kernel * kernel, rng)?;
        let weight = store.add(format!("{name}.weight"), Role::Weight, w, true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Role::Bias, Tensor::zeros(&[c_out]).unwrap(), true));
        Ok(Self { weight, bias, spec })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.graph.conv2d(x, w, b, self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self::with_affine(store, name, channels, 1.0, 0.0)
    }

    /// Batch norm whose scale and shift start at the given constants.
    pub fn with_affine(store: &mut ParamStore, name: &str, channels: usize, gamma: f64, beta: f64) -> Self {
        let t = |v: f64| Tensor::full(&[channels], v).unwrap();
        Self {
            gamma: store.add(format!("{name}.gamma"), Role::BnGamma, t(gamma), true),
            beta: store.add(format!("{name}.beta"), Role::BnBeta, t(beta), true),
            mean: store.add(format!("{name}.running_mean"), Role::BnMean, t(0.0), false),
            var: store.add(format!("{name}.running_var"), Role::BnVar, t(1.0), false),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let running = BnRunning {
            mean: ctx.store.get(self.mean).value.data().to_vec(),
            var: ctx.store.get(self.var).value.data().to_vec(),
        };
        let (y, upd) = ctx.graph.batch_norm(x, g, b, &running, ctx.bn, ctx.mode)?;
        if let Some(stats) = upd {
            ctx.bn_updates.push(BnUpdate {
                mean: self.mean,
                var: self.var,
                stats,
            });
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), Role::Weight, he_uniform(&[c_out, c_in], c_in, rng)?, true),
            bias: store.add(format!("{name}.bias"), Role::Bias, Tensor::zeros(&[c_out])?, true),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.linear(x, w, b)
    }
}

/// Integer-factor upsampling; the kernel is either frozen bilinear or a
/// trainable copy initialized to it.
#[derive(Clone, Debug)]
pub struct Upsampler {
    pub factor: usize,
    pub kernel: Option<ParamId>,
}

impl Upsampler {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, factor: usize, learned: bool) -> Result<Self> {
        if factor < 1 {
            return Err(Error::Config(format!("{name}: upsample factor must be >= 1")));
        }
        let kernel = if learned {
            let (k, _) = kernels::upsample_geometry(factor);
            let init = Tensor::new(&[channels, k, k], kernels::bilinear_kernel(k).repeat(channels))?;
            Some(store.add(format!("{name}.kernel"), Role::UpKernel, init, true))
        } else {
            None
        };
        Ok(Self { factor, kernel })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let kind = match self.kernel {
            Some(id) => UpsampleKernel::Learned(ctx.param(id)),
            None => UpsampleKernel::Bilinear,
        };
        ctx.graph.upsample(x, self.factor, kind)
    }
}
