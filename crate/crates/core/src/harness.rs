//! Synthetic data, the training loop, evaluation of checkpoints and the ablation runner.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Mode;
use crate::error::{config_err, Error, Result};
use crate::eval::{self, EdgeLabel, EvalOptions, EvalReport, SegSample};
use crate::io::{self, Pnm};
use crate::model::{build_model, DffModel, FusionMode, ModelConfig, TOTAL_STRIDE};
use crate::optim::{poly_lr, OptState, SgdConfig};
use crate::par;
use crate::tensor::Tensor;

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err!("bad value `{v}` for `{key}`"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Ellipse, ShapeKind::Rectangle, ShapeKind::Triangle];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| config_err!("unknown shape kind `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub kinds: Vec<ShapeKind>,
    pub allow_overlap: bool,
    pub seed: u64,
    /// Standard deviation of per-pixel Gaussian noise on [0, 1] intensities.
    pub noise: f64,
    /// Per-instance uniform colour offset around the class base colour.
    pub color_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 250,
            height: 64,
            width: 64,
            num_classes: 3,
            min_shapes: 2,
            max_shapes: 4,
            kinds: ShapeKind::ALL.to_vec(),
            allow_overlap: true,
            seed: 0,
            noise: 0.05,
            color_jitter: 0.08,
        }
    }
}

const MAX_COVERAGE_ATTEMPTS: u64 = 20;
const MAX_PLACEMENT_TRIES: usize = 100;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % TOTAL_STRIDE != 0 || self.width % TOTAL_STRIDE != 0 {
            return Err(config_err!("image size must be a positive multiple of {TOTAL_STRIDE}"));
        }
        if self.num_classes < 2 {
            return Err(config_err!("num_classes must be >= 2"));
        }
        if self.num_images < 1 || self.min_shapes < 1 || self.max_shapes < self.min_shapes {
            return Err(config_err!("need num_images >= 1 and 1 <= min_shapes <= max_shapes"));
        }
        if self.kinds.is_empty() {
            return Err(config_err!("at least one shape kind is required"));
        }
        if !(self.noise >= 0.0) || !(self.color_jitter >= 0.0) {
            return Err(config_err!("noise and color_jitter must be non-negative"));
        }
        Ok(())
    }

    pub fn num_train(&self) -> usize {
        self.num_images - self.num_images / 5
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let kinds: Vec<&str> = self.kinds.iter().map(|k| k.as_str()).collect();
        vec![
            ("num_images", self.num_images.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("min_shapes", self.min_shapes.to_string()),
            ("max_shapes", self.max_shapes.to_string()),
            ("kinds", kinds.join(",")),
            ("allow_overlap", self.allow_overlap.to_string()),
            ("seed", self.seed.to_string()),
            ("noise", format!("{:?}", self.noise)),
            ("color_jitter", format!("{:?}", self.color_jitter)),
        ]
    }

    pub fn from_map(map: &std::collections::BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in map {
            match k.as_str() {
                "num_images" => c.num_images = parse_value(k, v)?,
                "height" => c.height = parse_value(k, v)?,
                "width" => c.width = parse_value(k, v)?,
                "num_classes" => c.num_classes = parse_value(k, v)?,
                "min_shapes" => c.min_shapes = parse_value(k, v)?,
                "max_shapes" => c.max_shapes = parse_value(k, v)?,
                "kinds" => c.kinds = v.split(',').map(|s| ShapeKind::parse(s.trim())).collect::<Result<_>>()?,
                "allow_overlap" => c.allow_overlap = parse_value(k, v)?,
                "seed" => c.seed = parse_value(k, v)?,
                "noise" => c.noise = parse_value(k, v)?,
                "color_jitter" => c.color_jitter = parse_value(k, v)?,
                // written by gen-data next to the generator keys
                "num_train" | "num_val" => {}
                _ => return Err(config_err!("unknown data key `{k}`")),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// One generated image: RGB bytes plus class and instance maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub rgb: Vec<u8>,
    pub seg: SegSample,
}

fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    // evenly spaced hues at saturation 0.8, value 0.85
    let h = (class - 1) as f64 / num_classes as f64 * 6.0;
    let (s, v) = (0.8, 0.85);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn shape_mask<R: Rng>(kind: ShapeKind, h: usize, w: usize, rng: &mut R) -> Vec<bool> {
    let (hf, wf) = (h as f64, w as f64);
    let size = hf.min(wf);
    let (cy, cx) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
    let inside: Box<dyn Fn(f64, f64) -> bool> = match kind {
        ShapeKind::Ellipse => {
            let (ry, rx) = (rng.gen_range(size / 12.0..size / 4.0), rng.gen_range(size / 12.0..size / 4.0));
            let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let (s, c) = th.sin_cos();
            Box::new(move |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            })
        }
        ShapeKind::Rectangle => {
            let (hh, hw) = (rng.gen_range(size / 12.0..size / 4.0), rng.gen_range(size / 12.0..size / 4.0));
            Box::new(move |y, x| (y - cy).abs() <= hh && (x - cx).abs() <= hw)
        }
        ShapeKind::Triangle => {
            let base: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let verts: Vec<(f64, f64)> = (0..3)
                .map(|i| {
                    let a = base + i as f64 * std::f64::consts::TAU / 3.0 + rng.gen_range(-0.4..0.4);
                    let r = rng.gen_range(size / 8.0..size / 3.5);
                    (cy + r * a.sin(), cx + r * a.cos())
                })
                .collect();
            Box::new(move |y, x| {
                let cross = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [
                    cross(verts[0], verts[1]),
                    cross(verts[1], verts[2]),
                    cross(verts[2], verts[0]),
                ];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            })
        }
    };
    (0..h * w)
        .map(|i| inside((i / w) as f64 + 0.5, (i % w) as f64 + 0.5))
        .collect()
}

fn gen_image(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SynthImage> {
    let (h, w, k) = (cfg.height, cfg.width, cfg.num_classes);
    let n = h * w;
    let mut class_map = vec![0u16; n];
    let mut instance_map = vec![0u16; n];
    let grey = rng.gen_range(0.35..0.65);
    let bg: [f64; 3] = [
        grey + rng.gen_range(-0.05..0.05),
        grey + rng.gen_range(-0.05..0.05),
        grey + rng.gen_range(-0.05..0.05),
    ];
    let mut color = vec![bg; n];
    let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let mut next_instance = 1u16;
    for _ in 0..count {
        let class = rng.gen_range(1..=k);
        let kind = *cfg.kinds.choose(rng).expect("kinds checked non-empty");
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0) * cfg.color_jitter);
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let m = shape_mask(kind, h, w, rng);
            let empty = !m.iter().any(|&b| b);
            let clash = !cfg.allow_overlap && m.iter().zip(&instance_map).any(|(&b, &i)| b && i != 0);
            if !empty && !clash {
                placed = Some(m);
                break;
            }
        }
        let Some(mask) = placed else { continue };
        let base = class_color(class, k);
        for (p, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
            class_map[p] = class as u16;
            instance_map[p] = next_instance;
            color[p] = std::array::from_fn(|c| base[c] + jitter[c]);
        }
        next_instance += 1;
    }
    let normal = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).map_err(|e| config_err!("noise: {e}"))?;
    let mut rgb = Vec::with_capacity(3 * n);
    for px in &color {
        for &v in px {
            let noisy = if cfg.noise > 0.0 { v + normal.sample(rng) } else { v };
            rgb.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(SynthImage {
        rgb,
        seg: SegSample::new(h, w, class_map, instance_map)?,
    })
}

/// Generates the whole dataset in memory; resamples until every class is visible somewhere.
pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<SynthImage>> {
    cfg.validate()?;
    for attempt in 0..MAX_COVERAGE_ATTEMPTS {
        let mut images = Vec::with_capacity(cfg.num_images);
        for i in 0..cfg.num_images {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(attempt << 32 | i as u64);
            images.push(gen_image(cfg, &mut rng)?);
        }
        let mut seen = vec![false; cfg.num_classes + 1];
        for img in &images {
            for &c in &img.seg.class_map {
                seen[c as usize] = true;
            }
        }
        if seen[1..].iter().all(|&s| s) {
            return Ok(images);
        }
        log::info!("synthetic set attempt {attempt} misses a class; resampling");
    }
    Err(config_err!(
        "could not cover all {} classes in {MAX_COVERAGE_ATTEMPTS} attempts",
        cfg.num_classes
    ))
}

pub fn image_name(i: usize) -> String {
    format!("img_{i:04}")
}

/// Writes `manifest.txt` and `train/`, `val/` folders of
/// `<name>.ppm`, `<name>_class.pgm`, `<name>_inst.pgm`.
pub fn gen_dataset(cfg: &SynthConfig, out: &Path) -> Result<()> {
    let images = synthesize(cfg)?;
    let n_train = cfg.num_train();
    for split in ["train", "val"] {
        let d = out.join(split);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (i, img) in images.iter().enumerate() {
        let dir = out.join(if i < n_train { "train" } else { "val" });
        let name = image_name(i);
        let (h, w) = (cfg.height, cfg.width);
        Pnm {
            width: w,
            height: h,
            channels: 3,
            maxval: 255,
            samples: img.rgb.iter().map(|&b| b as u16).collect(),
        }
        .write(&dir.join(format!("{name}.ppm")))?;
        Pnm::gray(w, h, 65535, img.seg.class_map.clone()).write(&dir.join(format!("{name}_class.pgm")))?;
        Pnm::gray(w, h, 65535, img.seg.instance_map.clone()).write(&dir.join(format!("{name}_inst.pgm")))?;
    }
    let mut pairs = cfg.to_pairs();
    pairs.push(("num_train", n_train.to_string()));
    pairs.push(("num_val", (cfg.num_images - n_train).to_string()));
    let path = out.join("manifest.txt");
    fs::write(&path, io::format_kv(pairs)).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    /// `1 × 3 × H × W`, intensities in [0, 1].
    pub image: Tensor,
    pub seg: SegSample,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: SynthConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Reads an 8-bit P6 image into a `1 × 3 × H × W` tensor.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = Pnm::read(path)?;
    let (h, w, c) = (img.height, img.width, img.channels);
    let max = img.maxval as f64;
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for ch in 0..3 {
            // grey input is replicated across the three channels
            let s = img.samples[p * c + if c == 3 { ch } else { 0 }];
            data[ch * h * w + p] = s as f64 / max;
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

fn read_label_map(path: &Path, h: usize, w: usize) -> Result<Vec<u16>> {
    let img = Pnm::read(path)?;
    if img.channels != 1 || img.height != h || img.width != w {
        return Err(Error::format(path, format!("expected a {h}x{w} grey label map")));
    }
    Ok(img.samples)
}

fn load_split(dir: &Path) -> Result<Vec<Sample>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".ppm")).map(String::from))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let image = read_image(&dir.join(format!("{name}.ppm")))?;
            let (_, _, h, w) = image.dims4()?;
            let class_map = read_label_map(&dir.join(format!("{name}_class.pgm")), h, w)?;
            let instance_map = read_label_map(&dir.join(format!("{name}_inst.pgm")), h, w)?;
            Ok(Sample {
                name,
                image,
                seg: SegSample::new(h, w, class_map, instance_map)?,
            })
        })
        .collect()
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = SynthConfig::from_map(&io::read_kv(&dir.join("manifest.txt"))?)?;
        Ok(Self {
            train: load_split(&dir.join("train"))?,
            val: load_split(&dir.join("val"))?,
            config,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Architecture; `num_classes`, `height` and `width` are taken from the dataset.
    pub model: ModelConfig,
    pub base_lr: f64,
    pub lr_power: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Square training crop; 0 trains on full images.
    pub crop: usize,
    pub mirror: bool,
    /// Nearest-neighbour rescaling by a factor in [0.75, 2] before cropping.
    pub random_scale: bool,
    pub instance_sensitive: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            base_lr: 1e-3,
            lr_power: 0.9,
            epochs: 30,
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 1e-4,
            crop: 32,
            mirror: true,
            random_scale: false,
            instance_sensitive: true,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, image_h: usize, image_w: usize) -> Result<()> {
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(config_err!("base_lr must be a non-negative number"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.lr_power > 0.0) {
            return Err(config_err!("need momentum in [0, 1), weight_decay >= 0, lr_power > 0"));
        }
        if self.crop != 0 && (self.crop % TOTAL_STRIDE != 0 || self.crop > image_h.min(image_w)) {
            return Err(config_err!(
                "crop {} must be a multiple of {TOTAL_STRIDE} no larger than {image_h}x{image_w}",
                self.crop
            ));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut p = vec![
            ("base_lr", format!("{:?}", self.base_lr)),
            ("lr_power", format!("{:?}", self.lr_power)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("momentum", format!("{:?}", self.momentum)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("crop", self.crop.to_string()),
            ("mirror", self.mirror.to_string()),
            ("random_scale", self.random_scale.to_string()),
            ("instance_sensitive", self.instance_sensitive.to_string()),
            ("seed", self.seed.to_string()),
        ];
        p.extend(self.model.to_pairs());
        p
    }

    pub fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "base_lr" => self.base_lr = parse_value(key, v)?,
            "lr_power" => self.lr_power = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "crop" => self.crop = parse_value(key, v)?,
            "mirror" => self.mirror = parse_value(key, v)?,
            "random_scale" => self.random_scale = parse_value(key, v)?,
            "instance_sensitive" => self.instance_sensitive = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            _ => {
                if !self.model.apply(key, v)? {
                    return Err(config_err!("unknown training key `{key}`"));
                }
            }
        }
        Ok(())
    }

    pub fn from_map(map: &std::collections::BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in map {
            c.apply(k, v)?;
        }
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_map(&io::read_kv(path)?)
    }

    fn model_config(&self, data: &SynthConfig) -> ModelConfig {
        ModelConfig {
            num_classes: data.num_classes,
            height: data.height,
            width: data.width,
            ..self.model.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Loss of the very first batch, before any update.
    pub initial_loss: f64,
    pub checkpoint: PathBuf,
    pub config: TrainConfig,
    pub wall_clock: Duration,
    pub model: DffModel,
}

fn resize_nearest_u16(m: &[u16], h: usize, w: usize, nh: usize, nw: usize) -> Vec<u16> {
    (0..nh * nw)
        .map(|i| {
            let (y, x) = (i / nw, i % nw);
            m[(y * h / nh).min(h - 1) * w + (x * w / nw).min(w - 1)]
        })
        .collect()
}

fn resize_nearest(t: &Tensor, nh: usize, nw: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    let mut data = Vec::with_capacity(n * c * nh * nw);
    for plane in t.data().chunks(h * w) {
        for i in 0..nh * nw {
            let (y, x) = (i / nw, i % nw);
            data.push(plane[(y * h / nh).min(h - 1) * w + (x * w / nw).min(w - 1)]);
        }
    }
    Tensor::new(&[n, c, nh, nw], data)
}

/// Random mirror, optional rescale and crop applied identically to image and labels.
/// `labels` is the `1 × K × H × W` edge map of the un-augmented sample.
pub fn augment<R: Rng>(
    sample: &Sample,
    labels: &Tensor,
    cfg: &TrainConfig,
    num_classes: usize,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let (mut img, mut lab) = (sample.image.clone(), labels.clone());
    let (_, _, mut h, mut w) = img.dims4()?;
    if cfg.random_scale {
        let lo = 0.75f64.max(cfg.crop as f64 / h.min(w) as f64);
        let s = rng.gen_range(lo..=2.0f64.max(lo));
        let (nh, nw) = (((h as f64 * s).round() as usize).max(cfg.crop), ((w as f64 * s).round() as usize).max(cfg.crop));
        img = resize_nearest(&img, nh, nw)?;
        let seg = SegSample::new(
            nh,
            nw,
            resize_nearest_u16(&sample.seg.class_map, h, w, nh, nw),
            resize_nearest_u16(&sample.seg.instance_map, h, w, nh, nw),
        )?;
        let e = eval::seg_to_edges(&seg, num_classes, cfg.instance_sensitive)?;
        lab = e.to_tensor().reshape(&[1, num_classes, nh, nw])?;
        (h, w) = (nh, nw);
    }
    if cfg.mirror && rng.gen_bool(0.5) {
        img = img.flip_width();
        lab = lab.flip_width();
    }
    if cfg.crop != 0 && (cfg.crop < h || cfg.crop < w) {
        let top = rng.gen_range(0..=h - cfg.crop);
        let left = rng.gen_range(0..=w - cfg.crop);
        img = img.crop(top, left, cfg.crop, cfg.crop)?;
        lab = lab.crop(top, left, cfg.crop, cfg.crop)?;
    }
    Ok((img, lab))
}

/// Edge labels of a sample as a `1 × K × H × W` tensor.
pub fn label_tensor(seg: &SegSample, num_classes: usize, instance_sensitive: bool) -> Result<Tensor> {
    eval::seg_to_edges(seg, num_classes, instance_sensitive)?
        .to_tensor()
        .reshape(&[1, num_classes, seg.height, seg.width])
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// SGD training with the poly schedule; writes `checkpoint/`, `loss_trace.csv`
/// and `train_config.txt` under `out`.
pub fn train(cfg: &TrainConfig, data: &Dataset, out: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let synth = &data.config;
    cfg.validate(synth.height, synth.width)?;
    if data.train.is_empty() {
        return Err(config_err!("training split is empty"));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join("train_config.txt"), &io::format_kv(cfg.to_pairs()))?;
    let k = synth.num_classes;
    let mut model = build_model(&cfg.model_config(synth), cfg.seed)?;
    let labels: Vec<Tensor> = data
        .train
        .iter()
        .map(|s| label_tensor(&s.seg, k, cfg.instance_sensitive))
        .collect::<Result<_>>()?;
    let sgd = SgdConfig {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut opt = OptState::new(sgd, model.params.iter().map(|(_, p)| p.value.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let batches = data.train.len().div_ceil(cfg.batch_size);
    let max_iter = cfg.epochs * batches;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = f64::NAN;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut labs = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (im, lb) = augment(&data.train[i], &labels[i], cfg, k, &mut rng)?;
                imgs.push(im);
                labs.push(lb);
            }
            let (x, y) = (Tensor::stack_batch(&imgs)?, Tensor::stack_batch(&labs)?);
            let res = model.loss_and_grads(&x, &y, Mode::Train, false)?;
            let bad_grad = res.grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite()));
            if !res.loss.is_finite() || bad_grad {
                let names: Vec<&str> = chunk.iter().map(|&i| data.train[i].name.as_str()).collect();
                let detail = format!("loss {} on samples {}", res.loss, names.join(","));
                write_text(
                    &out.join("divergence.txt"),
                    &format!("step = {step}\nepoch = {epoch}\nbatch = {b}\ndetail = {detail}\n"),
                )?;
                return Err(Error::Divergence {
                    step,
                    epoch,
                    batch: b,
                    detail,
                });
            }
            if step == 0 {
                initial_loss = res.loss;
            }
            epoch_loss += res.loss;
            model.commit_bn_updates(&res.bindings)?;
            let lr = poly_lr(cfg.base_lr, step, max_iter, cfg.lr_power);
            for (id, grad) in model.params.ids().zip(&res.grads) {
                let (Some(grad), true) = (grad, model.params.get(id).trainable) else {
                    continue;
                };
                opt.step(id.index(), model.params.get_mut(id).value.data_mut(), grad, lr)?;
            }
            step += 1;
        }
        let mean = epoch_loss / batches as f64;
        log::info!("epoch {epoch}: loss {mean:.4}");
        loss_trace.push(mean);
    }
    let checkpoint = out.join("checkpoint");
    model.save(&checkpoint)?;
    let mut trace = String::from("epoch,loss\n");
    for (e, l) in loss_trace.iter().enumerate() {
        let _ = writeln!(trace, "{e},{l:?}");
    }
    write_text(&out.join("loss_trace.csv"), &trace)?;
    Ok(RunRecord {
        loss_trace,
        initial_loss,
        checkpoint,
        config: cfg.clone(),
        wall_clock: start.elapsed(),
        model,
    })
}

fn sigmoid_tensor(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect()).expect("same shape")
}

/// Reports for the fused head and for side 5 alone.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub fuse: EvalReport,
    pub side5: EvalReport,
}

/// Eval-mode predictions (`K × H × W` probabilities) for the fused head and side 5.
pub fn predict(model: &DffModel, images: &[&Tensor]) -> Result<Vec<(Tensor, Tensor)>> {
    let k = model.config.num_classes;
    par::map_slice(images, |img| {
        let (a5, af) = model.predict_logits(img)?;
        let (_, _, h, w) = img.dims4()?;
        Ok((
            sigmoid_tensor(&af).reshape(&[k, h, w])?,
            sigmoid_tensor(&a5).reshape(&[k, h, w])?,
        ))
    })
    .into_iter()
    .collect()
}

/// Evaluates on `samples`; with `dump`, writes `<name>.dft` and per-class PGMs of the fused probabilities.
pub fn evaluate_model(
    model: &DffModel,
    samples: &[Sample],
    opts: &EvalOptions,
    instance_sensitive: bool,
    dump: Option<&Path>,
) -> Result<Evaluation> {
    let k = model.config.num_classes;
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let preds = predict(model, &images)?;
    let gts: Vec<EdgeLabel> = samples
        .iter()
        .map(|s| eval::seg_to_edges(&s.seg, k, instance_sensitive))
        .collect::<Result<_>>()?;
    if let Some(dir) = dump {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (s, (fuse, _)) in samples.iter().zip(&preds) {
            io::write_dft(&dir.join(format!("{}.dft", s.name)), fuse)?;
            eval::write_prediction_pgms(dir, &s.name, fuse)?;
        }
    }
    let (fuse, side5): (Vec<Tensor>, Vec<Tensor>) = preds.into_iter().unzip();
    Ok(Evaluation {
        fuse: eval::mf_ods(&fuse, &gts, opts)?,
        side5: eval::mf_ods(&side5, &gts, opts)?,
    })
}

/// Loads a checkpoint and evaluates it on the validation split of `data_dir`.
pub fn evaluate(ckpt: &Path, data_dir: &Path, opts: &EvalOptions, dump: Option<&Path>) -> Result<Evaluation> {
    let model = DffModel::load(ckpt)?;
    let data = Dataset::load(data_dir)?;
    if data.config.num_classes != model.config.num_classes {
        return Err(config_err!(
            "checkpoint has {} classes, dataset {}",
            model.config.num_classes,
            data.config.num_classes
        ));
    }
    evaluate_model(&model, &data.val, opts, true, dump)
}

/// Evaluates stored predictions (`<name>.dft` or `<name>_<class>.pgm`) against the validation split.
pub fn evaluate_predictions(pred_dir: &Path, data: &Dataset, opts: &EvalOptions, instance_sensitive: bool) -> Result<EvalReport> {
    let k = data.config.num_classes;
    let mut preds = Vec::with_capacity(data.val.len());
    let mut gts = Vec::with_capacity(data.val.len());
    for s in &data.val {
        preds.push(eval::read_prediction(pred_dir, &s.name, k)?);
        gts.push(eval::seg_to_edges(&s.seg, k, instance_sensitive)?);
    }
    eval::mf_ods(&preds, &gts, opts)
}

/// One configuration of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub fusion_mode: FusionMode,
    pub normalizer: bool,
    pub softmax: bool,
}

/// Baseline, +normalizer, +invariant, +adaptive with softmax, +adaptive, adaptive without normalizer.
pub fn ablation_rows() -> Vec<AblationRow> {
    let row = |label, fusion_mode, normalizer, softmax| AblationRow {
        label,
        fusion_mode,
        normalizer,
        softmax,
    };
    vec![
        row("baseline", FusionMode::Fixed, false, false),
        row("+normalizer", FusionMode::Fixed, true, false),
        row("+normalizer +invariant", FusionMode::Invariant, true, false),
        row("+normalizer +adaptive +softmax", FusionMode::Adaptive, true, true),
        row("+normalizer +adaptive", FusionMode::Adaptive, true, false),
        row("+adaptive w/o normalizer", FusionMode::Adaptive, false, false),
    ]
}

pub const BASELINE_ROW: usize = 0;
pub const ADAPTIVE_ROW: usize = 4;
pub const ADAPTIVE_NO_NORM_ROW: usize = 5;

#[derive(Clone, Debug)]
pub struct RowResult {
    pub row: AblationRow,
    /// Mean MF of the fused head per seed.
    pub mf: Vec<f64>,
    pub mf_side5: Vec<f64>,
    /// Fixed fusion weights per seed (fixed rows only).
    pub fixed_weights: Vec<Option<Vec<[f64; 4]>>>,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<RowResult>,
    pub wall_clock: Duration,
}

/// Mean and sample standard deviation.
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Whether `|w1|` exceeds the magnitude of the other three weights for more than half the classes.
pub fn side5_dominates(weights: &[[f64; 4]]) -> bool {
    let wins = weights
        .iter()
        .filter(|w| w[0].abs() > w[1].abs().max(w[2].abs()).max(w[3].abs()))
        .count();
    2 * wins > weights.len()
}

impl AblationReport {
    /// Seeds on which row `a` scores strictly higher than row `b`.
    pub fn wins(&self, a: usize, b: usize) -> usize {
        self.rows[a].mf.iter().zip(&self.rows[b].mf).filter(|(x, y)| x > y).count()
    }

    /// Seeds on which the given fixed-fusion row shows side-5 weight dominance.
    pub fn dominance_seeds(&self, row: usize) -> usize {
        self.rows[row]
            .fixed_weights
            .iter()
            .filter(|w| w.as_deref().is_some_and(side5_dominates))
            .count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,label,seed,mf_fuse,mf_side5\n");
        for (i, r) in self.rows.iter().enumerate() {
            for (j, seed) in self.seeds.iter().enumerate() {
                let _ = writeln!(s, "{},{},{seed},{:.6},{:.6}", i + 1, r.row.label, r.mf[j], r.mf_side5[j]);
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("row  method                           normalizer  learner     mean MF (%)      side5 MF (%)\n");
        for (i, r) in self.rows.iter().enumerate() {
            let (m, sd) = mean_sd(&r.mf);
            let (m5, sd5) = mean_sd(&r.mf_side5);
            let learner = match (r.row.fusion_mode, r.row.softmax) {
                (FusionMode::Fixed, _) => "-",
                (FusionMode::Invariant, _) => "invariant",
                (FusionMode::Adaptive, true) => "adaptive+sm",
                (FusionMode::Adaptive, false) => "adaptive",
            };
            let _ = writeln!(
                s,
                "{:>3}  {:<32} {:<11} {:<11} {:>6.2} ± {:<5.2}   {:>6.2} ± {:.2}",
                i + 1,
                r.row.label,
                if r.row.normalizer { "yes" } else { "no" },
                learner,
                100.0 * m,
                100.0 * sd,
                100.0 * m5,
                100.0 * sd5
            );
        }
        let n = self.seeds.len();
        // Trend lines only make sense for the standard row set.
        if self.rows.iter().map(|r| &r.row).eq(ablation_rows().iter()) {
            let _ = write!(
                s,
                "\nadaptive > baseline on {}/{n} seeds\nadaptive w/o normalizer < adaptive on {}/{n} seeds\nbaseline |w1| dominance on {}/{n} seeds\n",
                self.wins(ADAPTIVE_ROW, BASELINE_ROW),
                self.wins(ADAPTIVE_ROW, ADAPTIVE_NO_NORM_ROW),
                self.dominance_seeds(BASELINE_ROW),
            );
        }
        let _ = writeln!(s, "wall clock {:.1}s", self.wall_clock.as_secs_f64());
        s
    }
}

/// Trains and evaluates every row under every seed. Runs go to `out/row<i>/seed<s>/`;
/// the summary to `out/ablation.csv` and `out/ablation.txt`.
pub fn ablation(
    data: &Dataset,
    out: &Path,
    base: &TrainConfig,
    rows: &[AblationRow],
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<AblationReport> {
    let start = Instant::now();
    let mut results = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let mut res = RowResult {
            row: row.clone(),
            mf: Vec::new(),
            mf_side5: Vec::new(),
            fixed_weights: Vec::new(),
        };
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.fusion_mode = row.fusion_mode;
            cfg.model.normalizer = row.normalizer;
            cfg.model.softmax = row.softmax;
            let run = train(&cfg, data, &out.join(format!("row{}", i + 1)).join(format!("seed{seed}")))?;
            let ev = evaluate_model(&run.model, &data.val, opts, cfg.instance_sensitive, None)?;
            log::info!(
                "{} seed {seed}: MF {:.4} (side5 {:.4}) in {:.1}s",
                row.label,
                ev.fuse.mean_mf,
                ev.side5.mean_mf,
                run.wall_clock.as_secs_f64()
            );
            res.mf.push(ev.fuse.mean_mf);
            res.mf_side5.push(ev.side5.mean_mf);
            res.fixed_weights.push(run.model.fixed_weights());
        }
        results.push(res);
    }
    let report = AblationReport {
        seeds: seeds.to_vec(),
        rows: results,
        wall_clock: start.elapsed(),
    };
    write_text(&out.join("ablation.csv"), &report.to_csv())?;
    write_text(&out.join("ablation.txt"), &report.to_table())?;
    Ok(report)
}
