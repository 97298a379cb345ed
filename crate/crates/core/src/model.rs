//! Toy residual backbone with side branches and the three fusion heads.
//!
//! Layout (total stride 8):
//!
//! ```text
//! image ─ stem(3×3) ─ s1 ─ s2(/2) ─ s3(/2) ─ s5(/2)
//!                     │     │        │        ├─ Side5   (K ch, ×8)
//!                     │     │        │        └─ Side5-w (4K ch, ×8) ─ learner ─ Ψ
//!                     │     │        └─ Side3 (1 ch, ×4)
//!                     │     └─ Side2 (1 ch, ×2)
//!                     └─ Side1 (1 ch, ×1)
//! ```
//!
//! Each stack holds two basic residual blocks. Stage 4 of the usual ResNet
//! layout is left out since its side output is never fused.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BceOptions, BnConfig, Conv2dSpec, Graph, Mode, Var};
use crate::error::{config_err, dim_err, Error, Result};
use crate::fusion::{
    self, AdaptiveWeightLearner, ConcatMap, FusionWeights, InvariantWeightLearner, SideNormBlock, SideOutputs,
    WeightLearner, GROUP,
};
use crate::io;
use crate::nn::{BatchNorm, Bindings, Conv, Ctx, ParamId, ParamStore, Role};
use crate::tensor::Tensor;

pub const TOTAL_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    Fixed,
    Invariant,
    Adaptive,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Fixed => "fixed",
            FusionMode::Invariant => "invariant",
            FusionMode::Adaptive => "adaptive",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(FusionMode::Fixed),
            "invariant" => Ok(FusionMode::Invariant),
            "adaptive" => Ok(FusionMode::Adaptive),
            other => Err(config_err!("unknown fusion mode `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub fusion_mode: FusionMode,
    /// Softmax over each category's four fusion weights (dynamic modes only).
    pub softmax: bool,
    /// Batch norm inside the side blocks.
    pub normalizer: bool,
    /// Channel widths of stacks s1, s2, s3, s5.
    pub widths: [usize; 4],
    pub height: usize,
    pub width: usize,
    pub learned_upsample: bool,
    /// Hidden width of the weight learners; `None` means 4K.
    pub learner_hidden: Option<usize>,
    pub fixed_bias: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            fusion_mode: FusionMode::Adaptive,
            softmax: false,
            normalizer: true,
            widths: [8, 16, 32, 64],
            height: 64,
            width: 64,
            learned_upsample: false,
            learner_hidden: None,
            fixed_bias: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err!("bad value `{v}` for `{key}`"))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 1 {
            return Err(config_err!("num_classes must be >= 1"));
        }
        if self.softmax && self.fusion_mode == FusionMode::Fixed {
            return Err(config_err!("softmax constraint requires a dynamic fusion mode"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(config_err!("backbone widths must be positive"));
        }
        if self.learner_hidden == Some(0) {
            return Err(config_err!("learner_hidden must be positive"));
        }
        if self.height % TOTAL_STRIDE != 0 || self.width % TOTAL_STRIDE != 0 || self.height == 0 || self.width == 0 {
            return Err(config_err!(
                "input size {}x{} must be a positive multiple of {TOTAL_STRIDE}",
                self.height,
                self.width
            ));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(config_err!("bn_eps must be > 0 and bn_momentum in [0, 1]"));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.learner_hidden.unwrap_or(GROUP * self.num_classes)
    }

    pub fn bn(&self) -> BnConfig {
        BnConfig {
            momentum: self.bn_momentum,
            eps: self.bn_eps,
        }
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let w = self.widths;
        vec![
            ("num_classes", self.num_classes.to_string()),
            ("fusion_mode", self.fusion_mode.to_string()),
            ("softmax", self.softmax.to_string()),
            ("normalizer", self.normalizer.to_string()),
            ("widths", format!("{},{},{},{}", w[0], w[1], w[2], w[3])),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("learned_upsample", self.learned_upsample.to_string()),
            ("learner_hidden", self.learner_hidden.map_or("auto".into(), |h| h.to_string())),
            ("fixed_bias", self.fixed_bias.to_string()),
            ("bn_momentum", format!("{:?}", self.bn_momentum)),
            ("bn_eps", format!("{:?}", self.bn_eps)),
        ]
    }

    /// Applies recognised keys; returns false for keys this config does not own.
    pub fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "num_classes" => self.num_classes = parse_value(key, v)?,
            "fusion_mode" => self.fusion_mode = v.parse()?,
            "softmax" => self.softmax = parse_value(key, v)?,
            "normalizer" => self.normalizer = parse_value(key, v)?,
            "widths" => {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| parse_value(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.widths = parts
                    .try_into()
                    .map_err(|_| config_err!("`widths` needs exactly four values"))?;
            }
            "height" => self.height = parse_value(key, v)?,
            "width" => self.width = parse_value(key, v)?,
            "learned_upsample" => self.learned_upsample = parse_value(key, v)?,
            "learner_hidden" => {
                self.learner_hidden = if v == "auto" { None } else { Some(parse_value(key, v)?) }
            }
            "fixed_bias" => self.fixed_bias = parse_value(key, v)?,
            "bn_momentum" => self.bn_momentum = parse_value(key, v)?,
            "bn_eps" => self.bn_eps = parse_value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            if !cfg.apply(k, v)? {
                return Err(config_err!("unknown model key `{k}`"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    proj: Option<(Conv, BatchNorm)>,
}

impl BasicBlock {
    fn new<R: rand::Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        let k3 = |stride| Conv2dSpec {
            stride,
            padding: 1,
            groups: 1,
        };
        let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, k3(stride), false)?;
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), c_out);
        let conv2 = Conv::new(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, k3(1), false)?;
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), c_out);
        let proj = if stride != 1 || c_in != c_out {
            let spec = Conv2dSpec {
                stride,
                padding: 0,
                groups: 1,
            };
            Some((
                Conv::new(store, rng, &format!("{name}.proj"), c_in, c_out, 1, spec, false)?,
                BatchNorm::new(store, &format!("{name}.proj_bn"), c_out),
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            proj,
        })
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut y = self.conv1.forward(ctx, x)?;
        y = self.bn1.forward(ctx, y)?;
        y = ctx.graph.relu(y)?;
        y = self.conv2.forward(ctx, y)?;
        y = self.bn2.forward(ctx, y)?;
        let skip = match &self.proj {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.graph.add(y, skip)?;
        ctx.graph.relu(sum)
    }
}

#[derive(Clone, Debug)]
struct Stack(Vec<BasicBlock>);

impl Stack {
    fn new<R: rand::Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c_in: usize, c_out: usize, stride: usize) -> Result<Self> {
        Ok(Self(vec![
            BasicBlock::new(store, rng, &format!("{name}.0"), c_in, c_out, stride)?,
            BasicBlock::new(store, rng, &format!("{name}.1"), c_out, c_out, 1)?,
        ]))
    }

    fn forward(&self, ctx: &mut Ctx, mut x: Var) -> Result<Var> {
        for b in &self.0 {
            x = b.forward(ctx, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub enum FusionHead {
    Fixed {
        weight: ParamId,
        bias: Option<ParamId>,
    },
    Dynamic {
        side5_w: SideNormBlock,
        learner: WeightLearner,
    },
}

#[derive(Clone, Debug)]
pub struct DffModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    stem: (Conv, BatchNorm),
    stacks: [Stack; 4],
    pub side1: SideNormBlock,
    pub side2: SideNormBlock,
    pub side3: SideNormBlock,
    pub side5: SideNormBlock,
    pub head: FusionHead,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub image: Var,
    pub sides: SideOutputs,
    pub cat: ConcatMap,
    /// Fusion weights before any softmax constraint (dynamic modes).
    pub raw_weights: Option<FusionWeights>,
    /// Weights actually used for fusion (dynamic modes).
    pub weights: Option<FusionWeights>,
    /// Logits of the top side output.
    pub a_side5: Var,
    /// Logits of the fused output.
    pub a_fuse: Var,
}

pub fn build_model(config: &ModelConfig, seed: u64) -> Result<DffModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let [w1, w2, w3, w5] = config.widths;
    let k = config.num_classes;
    let stem_spec = Conv2dSpec {
        stride: 1,
        padding: 1,
        groups: 1,
    };
    let stem = (
        Conv::new(&mut store, &mut rng, "stem.conv", 3, w1, 3, stem_spec, false)?,
        BatchNorm::new(&mut store, "stem.bn", w1),
    );
    let stacks = [
        Stack::new(&mut store, &mut rng, "s1", w1, w1, 1)?,
        Stack::new(&mut store, &mut rng, "s2", w1, w2, 2)?,
        Stack::new(&mut store, &mut rng, "s3", w2, w3, 2)?,
        Stack::new(&mut store, &mut rng, "s5", w3, w5, 2)?,
    ];
    let (norm, lu) = (config.normalizer, config.learned_upsample);
    let side1 = SideNormBlock::new(&mut store, &mut rng, "side1", w1, 1, 1, norm, lu)?;
    let side2 = SideNormBlock::new(&mut store, &mut rng, "side2", w2, 1, 2, norm, lu)?;
    let side3 = SideNormBlock::new(&mut store, &mut rng, "side3", w3, 1, 4, norm, lu)?;
    let side5 = SideNormBlock::new(&mut store, &mut rng, "side5", w5, k, 8, norm, lu)?;
    let head = match config.fusion_mode {
        FusionMode::Fixed => {
            // averaging start: every level contributes equally before training
            let weight = store.add("fuse.weight", Role::Weight, Tensor::full(&[k, GROUP, 1, 1], 0.25)?, true);
            let bias = config
                .fixed_bias
                .then(|| store.add("fuse.bias", Role::Bias, Tensor::zeros(&[k]).unwrap(), true));
            FusionHead::Fixed { weight, bias }
        }
        mode => {
            let c = GROUP * k;
            let side5_w = SideNormBlock::new(&mut store, &mut rng, "side5w", w5, c, 8, norm, lu)?;
            let learner = if mode == FusionMode::Invariant {
                WeightLearner::Invariant(InvariantWeightLearner::new(&mut store, &mut rng, "learner", c, config.hidden())?)
            } else {
                WeightLearner::Adaptive(AdaptiveWeightLearner::new(&mut store, &mut rng, "learner", c, config.hidden())?)
            };
            FusionHead::Dynamic { side5_w, learner }
        }
    };
    Ok(DffModel {
        config: config.clone(),
        params: store,
        stem,
        stacks,
        side1,
        side2,
        side3,
        side5,
        head,
    })
}

/// Sum of the class-balanced losses on the side-5 and fused heads.
pub fn total_loss(g: &mut Graph, out: &ForwardOutput, labels: &Tensor, opts: BceOptions) -> Result<Var> {
    let l5 = g.reweighted_bce(out.a_side5, labels, opts)?;
    let lf = g.reweighted_bce(out.a_fuse, labels, opts)?;
    g.add(l5, lf)
}

/// Result of one loss evaluation with gradients.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub loss: f64,
    /// Gradient per trainable parameter (indexed like the store), `None` when unused.
    pub grads: Vec<Option<Vec<f64>>>,
    pub bindings: Bindings,
}

impl DffModel {
    pub fn forward(&self, g: &mut Graph, image: &Tensor, mode: Mode) -> Result<(ForwardOutput, Bindings)> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(dim_err!("image must have 3 channels, got {c}"));
        }
        if h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 {
            return Err(dim_err!("image {h}x{w} not divisible by total stride {TOTAL_STRIDE}"));
        }
        let image_var = g.constant(image.clone());
        let mut ctx = Ctx::new(g, &self.params, mode, self.config.bn());
        let mut x = self.stem.0.forward(&mut ctx, image_var)?;
        x = self.stem.1.forward(&mut ctx, x)?;
        x = ctx.graph.relu(x)?;
        let f1 = self.stacks[0].forward(&mut ctx, x)?;
        let f2 = self.stacks[1].forward(&mut ctx, f1)?;
        let f3 = self.stacks[2].forward(&mut ctx, f2)?;
        let f5 = self.stacks[3].forward(&mut ctx, f3)?;
        let target = (h, w);
        let sides = SideOutputs {
            a_side1: self.side1.forward(&mut ctx, f1, target)?,
            a_side2: self.side2.forward(&mut ctx, f2, target)?,
            a_side3: self.side3.forward(&mut ctx, f3, target)?,
            a_side5: self.side5.forward(&mut ctx, f5, target)?,
        };
        let cat = fusion::shared_concat(ctx.graph, &sides)?;
        let (raw_weights, weights, a_fuse) = match &self.head {
            FusionHead::Fixed { weight, bias } => {
                let wv = ctx.param(*weight);
                let bv = bias.map(|b| ctx.param(b));
                (None, None, fusion::fixed_fuse(ctx.graph, &cat, wv, bv)?)
            }
            FusionHead::Dynamic { side5_w, learner } => {
                let xw = side5_w.forward(&mut ctx, f5, target)?;
                let raw = learner.forward(&mut ctx, xw)?;
                let used = if self.config.softmax {
                    fusion::softmax_constrain(ctx.graph, &raw)?
                } else {
                    raw
                };
                let fused = fusion::dynamic_fuse(ctx.graph, &cat, &used)?;
                (Some(raw), Some(used), fused)
            }
        };
        let bindings = ctx.finish();
        Ok((
            ForwardOutput {
                image: image_var,
                sides,
                cat,
                raw_weights,
                weights,
                a_side5: sides.a_side5,
                a_fuse,
            },
            bindings,
        ))
    }

    /// Forward, loss and backward on one batch.
    pub fn loss_and_grads(&self, image: &Tensor, labels: &Tensor, mode: Mode, checked: bool) -> Result<StepResult> {
        let mut g = if checked { Graph::checked() } else { Graph::new() };
        let (out, bindings) = self.forward(&mut g, image, mode)?;
        let loss = total_loss(&mut g, &out, labels, BceOptions::default())?;
        let loss_value = g.value(loss).data()[0];
        g.backward(loss)?;
        let mut grads = vec![None; self.params.len()];
        for &(id, v) in &bindings.vars {
            if let Some(gr) = g.grad(v) {
                grads[id.index()] = Some(gr.to_vec());
            }
        }
        Ok(StepResult {
            loss: loss_value,
            grads,
            bindings,
        })
    }

    /// Writes running statistics collected by a train-mode forward pass.
    pub fn commit_bn_updates(&mut self, bindings: &Bindings) -> Result<()> {
        for u in &bindings.bn_updates {
            let c = u.stats.mean.len();
            self.params.get_mut(u.mean).value = Tensor::new(&[c], u.stats.mean.clone())?;
            self.params.get_mut(u.var).value = Tensor::new(&[c], u.stats.var.clone())?;
        }
        Ok(())
    }

    /// Eval-mode logits `(a_side5, a_fuse)` for a batch.
    pub fn predict_logits(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let (out, _) = self.forward(&mut g, image, Mode::Eval)?;
        Ok((g.value(out.a_side5).clone(), g.value(out.a_fuse).clone()))
    }

    /// Learned fixed fusion weights as `K` rows of `(w1, w2, w3, w4)`.
    pub fn fixed_weights(&self) -> Option<Vec<[f64; 4]>> {
        match &self.head {
            FusionHead::Fixed { weight, .. } => Some(
                self.params
                    .get(*weight)
                    .value
                    .data()
                    .chunks(GROUP)
                    .map(|c| [c[0], c[1], c[2], c[3]])
                    .collect(),
            ),
            FusionHead::Dynamic { .. } => None,
        }
    }

    /// Stores parameters as `<name>.dft`, plus `manifest.txt` and `config.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (_, p) in self.params.iter() {
            io::write_dft(&dir.join(format!("{}.dft", p.name)), &p.value)?;
            let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{} {} {}\n", p.name, shape.join("x"), p.role.as_str()));
        }
        let manifest_path = dir.join("manifest.txt");
        fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
        let cfg_path = dir.join("config.txt");
        fs::write(&cfg_path, io::format_kv(self.config.to_pairs())).map_err(|e| Error::io(&cfg_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = ModelConfig::from_map(&io::read_kv(&dir.join("config.txt"))?)?;
        let mut model = build_model(&cfg, 0)?;
        let manifest_path = dir.join("manifest.txt");
        let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut listed = 0;
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let (Some(name), Some(shape), Some(role)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(&manifest_path, format!("bad line `{line}`")));
            };
            let id = model
                .params
                .find(name)
                .ok_or_else(|| Error::format(&manifest_path, format!("unexpected parameter {name}")))?;
            let t = io::read_dft(&dir.join(format!("{name}.dft")))?;
            let p = model.params.get_mut(id);
            let want: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            if want.join("x") != shape || t.shape() != p.value.shape() || Role::parse(role) != Some(p.role) {
                return Err(Error::format(&manifest_path, format!("parameter {name} does not match the model layout")));
            }
            p.value = t;
            listed += 1;
        }
        if listed != model.params.len() {
            return Err(Error::format(
                &manifest_path,
                format!("lists {listed} parameters, model has {}", model.params.len()),
            ));
        }
        Ok(model)
    }
}
