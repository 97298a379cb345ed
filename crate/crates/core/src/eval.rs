//! Ground-truth edge extraction, tolerant matching and MF at optimal dataset scale.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{config_err, dim_err, Error, Result};
use crate::io::{self, Pnm};
use crate::par;
use crate::tensor::Tensor;

/// Per-pixel class and instance labels of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegSample {
    pub height: usize,
    pub width: usize,
    /// Class per pixel in `[0, K]`; 0 is unlabeled.
    pub class_map: Vec<u16>,
    /// Instance id per pixel; 0 is background.
    pub instance_map: Vec<u16>,
}

impl SegSample {
    pub fn new(height: usize, width: usize, class_map: Vec<u16>, instance_map: Vec<u16>) -> Result<Self> {
        let n = height * width;
        if class_map.len() != n || instance_map.len() != n {
            return Err(dim_err!(
                "class map {} / instance map {} values for a {height}x{width} sample",
                class_map.len(),
                instance_map.len()
            ));
        }
        Ok(Self {
            height,
            width,
            class_map,
            instance_map,
        })
    }

    pub fn flip_width(&self) -> Self {
        let flip = |m: &[u16]| -> Vec<u16> {
            m.chunks(self.width)
                .flat_map(|row| row.iter().rev().copied())
                .collect()
        };
        Self {
            height: self.height,
            width: self.width,
            class_map: flip(&self.class_map),
            instance_map: flip(&self.instance_map),
        }
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(dim_err!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height,
                self.width
            ));
        }
        let cut = |m: &[u16]| -> Vec<u16> {
            (top..top + h)
                .flat_map(|y| m[y * self.width + left..y * self.width + left + w].iter().copied())
                .collect()
        };
        Self::new(h, w, cut(&self.class_map), cut(&self.instance_map))
    }
}

/// Binary multi-label edge maps, `K × H × W`; channel `k` holds class `k + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeLabel {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl EdgeLabel {
    pub fn channel(&self, k: usize) -> &[bool] {
        let n = self.height * self.width;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.num_classes, self.height, self.width],
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("edge label shape")
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// An in-class pixel is an edge when some in-bounds 8-neighbour has a
/// different class, or a different instance id if `instance_sensitive`.
pub fn seg_to_edges(sample: &SegSample, num_classes: usize, instance_sensitive: bool) -> Result<EdgeLabel> {
    let (h, w) = (sample.height, sample.width);
    if sample.class_map.len() != h * w || sample.instance_map.len() != h * w {
        return Err(dim_err!("class/instance maps do not match {h}x{w}"));
    }
    if let Some(&bad) = sample.class_map.iter().find(|&&c| c as usize > num_classes) {
        return Err(Error::Contract(format!("class id {bad} outside [0, {num_classes}]")));
    }
    let mut data = vec![false; num_classes * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let c = sample.class_map[p];
            if c == 0 {
                continue;
            }
            let inst = sample.instance_map[p];
            let mut edge = false;
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if (dy == 0 && dx == 0) || ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if sample.class_map[q] != c || (instance_sensitive && sample.instance_map[q] != inst) {
                        edge = true;
                        break 'scan;
                    }
                }
            }
            if edge {
                data[(c as usize - 1) * h * w + p] = true;
            }
        }
    }
    Ok(EdgeLabel {
        num_classes,
        height: h,
        width: w,
        data,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::AddAssign for MatchResult {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Maximum match distance in pixels for a tolerance given as a fraction of the diagonal.
pub fn match_distance(tolerance: f64, height: usize, width: usize) -> f64 {
    tolerance * ((height * height + width * width) as f64).sqrt()
}

/// Pixel offsets within distance `d`.
fn offsets(d: f64) -> Vec<(i64, i64)> {
    let r = d.floor() as i64;
    let d2 = d * d;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= d2 {
                out.push((dy, dx));
            }
        }
    }
    // nearest first so the greedy initial pass picks short pairs
    out.sort_by_key(|&(dy, dx)| dy * dy + dx * dx);
    out
}

/// Maximum-cardinality one-to-one matching between predicted and ground-truth
/// pixels no farther apart than `tolerance · diagonal`.
pub fn match_edges(pred: &[bool], gt: &[bool], height: usize, width: usize, tolerance: f64) -> Result<MatchResult> {
    if pred.len() != height * width || gt.len() != height * width {
        return Err(dim_err!(
            "pred {} / gt {} pixels for a {height}x{width} map",
            pred.len(),
            gt.len()
        ));
    }
    if !(tolerance > 0.0 && tolerance < 1.0) {
        return Err(config_err!("tolerance must lie in (0, 1), got {tolerance}"));
    }
    let offs = offsets(match_distance(tolerance, height, width));
    Ok(match_with_offsets(pred, gt, height, width, &offs))
}

const NONE: u32 = u32::MAX;

fn match_with_offsets(pred: &[bool], gt: &[bool], h: usize, w: usize, offs: &[(i64, i64)]) -> MatchResult {
    let mut gt_index = vec![NONE; h * w];
    let mut n_gt = 0u32;
    for (i, &g) in gt.iter().enumerate() {
        if g {
            gt_index[i] = n_gt;
            n_gt += 1;
        }
    }
    // the pixel grid is the spatial bucket: neighbours are found by offset lookup
    let mut adj_start = vec![0usize];
    let mut adj = Vec::new();
    for (i, _) in pred.iter().enumerate().filter(|(_, &p)| p) {
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        for &(dy, dx) in offs {
            let (ny, nx) = (y + dy, x + dx);
            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                continue;
            }
            let g = gt_index[ny as usize * w + nx as usize];
            if g != NONE {
                adj.push(g);
            }
        }
        adj_start.push(adj.len());
    }
    let n_pred = adj_start.len() - 1;
    let tp = hopcroft_karp(n_pred, n_gt as usize, &adj_start, &adj);
    MatchResult {
        tp,
        fp: n_pred - tp,
        fn_: n_gt as usize - tp,
    }
}

fn hopcroft_karp(n_left: usize, n_right: usize, start: &[usize], adj: &[u32]) -> usize {
    let mut match_l = vec![NONE; n_left];
    let mut match_r = vec![NONE; n_right];
    let mut size = 0;
    for u in 0..n_left {
        for &v in &adj[start[u]..start[u + 1]] {
            if match_r[v as usize] == NONE {
                match_l[u] = v;
                match_r[v as usize] = u as u32;
                size += 1;
                break;
            }
        }
    }
    let mut dist = vec![u32::MAX; n_left];
    let mut queue = VecDeque::new();
    loop {
        queue.clear();
        for u in 0..n_left {
            if match_l[u] == NONE {
                dist[u] = 0;
                queue.push_back(u);
            } else {
                dist[u] = u32::MAX;
            }
        }
        let mut found = false;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[start[u]..start[u + 1]] {
                let m = match_r[v as usize];
                if m == NONE {
                    found = true;
                } else if dist[m as usize] == u32::MAX {
                    dist[m as usize] = dist[u] + 1;
                    queue.push_back(m as usize);
                }
            }
        }
        if !found {
            break;
        }
        let mut cursor: Vec<usize> = start[..n_left].to_vec();
        for u in 0..n_left {
            if match_l[u] == NONE && augment(u, start, adj, &mut cursor, &mut dist, &mut match_l, &mut match_r) {
                size += 1;
            }
        }
    }
    size
}

/// Iterative layered DFS from a free left vertex.
fn augment(
    root: usize,
    start: &[usize],
    adj: &[u32],
    cursor: &mut [usize],
    dist: &mut [u32],
    match_l: &mut [u32],
    match_r: &mut [u32],
) -> bool {
    let mut stack = vec![root];
    while let Some(&u) = stack.last() {
        if cursor[u] == start[u + 1] {
            dist[u] = u32::MAX;
            stack.pop();
            continue;
        }
        let v = adj[cursor[u]] as usize;
        cursor[u] += 1;
        let m = match_r[v];
        if m == NONE {
            // flip the path root → … → u → v
            let mut v = v as u32;
            while let Some(u) = stack.pop() {
                let prev = match_l[u];
                match_l[u] = v;
                match_r[v as usize] = u as u32;
                v = prev;
            }
            return true;
        }
        if dist[m as usize] == dist[u] + 1 {
            stack.push(m as usize);
        }
    }
    false
}

/// One-pixel-wide 8-connected skeleton (Zhang–Suen).
pub fn thin(map: &[bool], height: usize, width: usize) -> Vec<bool> {
    let mut img = map.to_vec();
    let at = |img: &[bool], y: i64, x: i64| -> bool {
        y >= 0 && x >= 0 && y < height as i64 && x < width as i64 && img[y as usize * width + x as usize]
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..height as i64 {
                for x in 0..width as i64 {
                    if !img[y as usize * width + x as usize] {
                        continue;
                    }
                    // P2..P9 clockwise from north
                    let p = [
                        at(&img, y - 1, x),
                        at(&img, y - 1, x + 1),
                        at(&img, y, x + 1),
                        at(&img, y + 1, x + 1),
                        at(&img, y + 1, x),
                        at(&img, y + 1, x - 1),
                        at(&img, y, x - 1),
                        at(&img, y - 1, x - 1),
                    ];
                    let b = p.iter().filter(|&&v| v).count();
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    let (c1, c2) = if pass == 0 {
                        (p[0] && p[2] && p[4], p[2] && p[4] && p[6])
                    } else {
                        (p[0] && p[2] && p[6], p[0] && p[4] && p[6])
                    };
                    if (2..=6).contains(&b) && a == 1 && !c1 && !c2 {
                        remove.push(y as usize * width + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                img[i] = false;
            }
        }
        if !changed {
            return img;
        }
    }
}

/// `0.01, 0.02, …, 0.99`.
pub fn default_thresholds() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub tolerance: f64,
    pub thresholds: Vec<f64>,
    pub thin: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tolerance: 0.02,
            thresholds: default_thresholds(),
            thin: false,
        }
    }
}

/// Precision, recall and F from counts; each is 0 when its denominator is.
pub fn prf(m: MatchResult) -> (f64, f64, f64) {
    let p = if m.tp + m.fp == 0 { 0.0 } else { m.tp as f64 / (m.tp + m.fp) as f64 };
    let r = if m.tp + m.fn_ == 0 { 0.0 } else { m.tp as f64 / (m.tp + m.fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    /// 1-based class id.
    pub class: usize,
    pub counts: Vec<MatchResult>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f: Vec<f64>,
    /// `None` when the class has no ground-truth edges in the dataset.
    pub best_threshold: Option<f64>,
    pub mf: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tolerance: f64,
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// Mean MF over classes that have ground truth.
    pub mean_mf: f64,
}

/// Maximum F-measure at optimal dataset scale. `predictions[i]` is a
/// `K × H × W` probability tensor for image `i`.
pub fn mf_ods(predictions: &[Tensor], gts: &[EdgeLabel], opts: &EvalOptions) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Contract("mf_ods: empty dataset".into()));
    }
    if predictions.len() != gts.len() {
        return Err(dim_err!("{} predictions for {} ground truths", predictions.len(), gts.len()));
    }
    if opts.thresholds.is_empty() || opts.thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(config_err!("thresholds must be a non-empty subset of (0, 1)"));
    }
    if !(opts.tolerance > 0.0 && opts.tolerance < 1.0) {
        return Err(config_err!("tolerance must lie in (0, 1), got {}", opts.tolerance));
    }
    let k = gts[0].num_classes;
    for (p, g) in predictions.iter().zip(gts) {
        if g.num_classes != k || p.shape() != [g.num_classes, g.height, g.width] {
            return Err(dim_err!(
                "prediction {:?} vs ground truth {}x{}x{}",
                p.shape(),
                g.num_classes,
                g.height,
                g.width
            ));
        }
    }
    let nt = opts.thresholds.len();
    let per_image: Vec<Vec<MatchResult>> = par::map_range(predictions.len(), |i| {
        let (p, g) = (&predictions[i], &gts[i]);
        let n = g.height * g.width;
        let offs = offsets(match_distance(opts.tolerance, g.height, g.width));
        let mut out = Vec::with_capacity(k * nt);
        for c in 0..k {
            let prob = &p.data()[c * n..(c + 1) * n];
            let gt = g.channel(c);
            for &t in &opts.thresholds {
                let mut bin: Vec<bool> = prob.iter().map(|&v| v >= t).collect();
                if opts.thin {
                    bin = thin(&bin, g.height, g.width);
                }
                out.push(match_with_offsets(&bin, gt, g.height, g.width, &offs));
            }
        }
        out
    });
    let mut totals = vec![MatchResult::default(); k * nt];
    for img in &per_image {
        for (t, m) in totals.iter_mut().zip(img) {
            *t += *m;
        }
    }
    let mut classes = Vec::with_capacity(k);
    let mut defined = Vec::new();
    for c in 0..k {
        let counts = totals[c * nt..(c + 1) * nt].to_vec();
        let (mut precision, mut recall, mut f) = (Vec::new(), Vec::new(), Vec::new());
        for &m in &counts {
            let (pp, rr, ff) = prf(m);
            precision.push(pp);
            recall.push(rr);
            f.push(ff);
        }
        let has_gt = counts[0].tp + counts[0].fn_ > 0;
        let (best_threshold, mf) = if has_gt {
            let mut best = 0;
            for i in 1..nt {
                if f[i] > f[best] {
                    best = i;
                }
            }
            defined.push(f[best]);
            (Some(opts.thresholds[best]), Some(f[best]))
        } else {
            log::warn!("class {} has no ground-truth edges; excluded from mean MF", c + 1);
            (None, None)
        };
        classes.push(ClassReport {
            class: c + 1,
            counts,
            precision,
            recall,
            f,
            best_threshold,
            mf,
        });
    }
    if defined.is_empty() {
        return Err(Error::Contract("mf_ods: no class has ground-truth edges".into()));
    }
    Ok(EvalReport {
        tolerance: opts.tolerance,
        thresholds: opts.thresholds.clone(),
        classes,
        mean_mf: defined.iter().sum::<f64>() / defined.len() as f64,
    })
}

impl EvalReport {
    /// `class,threshold,precision,recall,f,mf` rows; `mf` is the class MF
    /// (empty when undefined).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,threshold,precision,recall,f,mf\n");
        for c in &self.classes {
            let mf = c.mf.map(|v| format!("{v:.6}")).unwrap_or_default();
            for (i, t) in self.thresholds.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{t:.4},{:.6},{:.6},{:.6},{mf}",
                    c.class, c.precision[i], c.recall[i], c.f[i]
                );
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("tolerance {}\nclass  best_t  MF\n", self.tolerance);
        for c in &self.classes {
            match (c.best_threshold, c.mf) {
                (Some(t), Some(mf)) => {
                    let _ = writeln!(s, "{:>5}  {t:>6.2}  {:.2}", c.class, 100.0 * mf);
                }
                _ => {
                    let _ = writeln!(s, "{:>5}  {:>6}  n/a", c.class, "-");
                }
            }
        }
        let _ = writeln!(s, " mean          {:.2}", 100.0 * self.mean_mf);
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Writes `<image>_<class>.pgm` (16-bit, 1-based class) for a `K × H × W` map.
pub fn write_prediction_pgms(dir: &Path, image: &str, probs: &Tensor) -> Result<()> {
    let [k, h, w] = probs.shape() else {
        return Err(dim_err!("prediction must be K x H x W, got {:?}", probs.shape()));
    };
    let n = h * w;
    for c in 0..*k {
        let samples = probs.data()[c * n..(c + 1) * n]
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        Pnm::gray(*w, *h, 65535, samples).write(&dir.join(format!("{image}_{}.pgm", c + 1)))?;
    }
    Ok(())
}

/// Reads `<image>.dft` if present, else `<image>_<class>.pgm` for classes `1..=K`.
pub fn read_prediction(dir: &Path, image: &str, num_classes: usize) -> Result<Tensor> {
    let dft = dir.join(format!("{image}.dft"));
    if dft.exists() {
        let t = io::read_dft(&dft)?;
        if t.rank() != 3 || t.shape()[0] != num_classes {
            return Err(Error::format(&dft, format!("expected {num_classes} x H x W, got {:?}", t.shape())));
        }
        return Ok(t);
    }
    let mut data = Vec::new();
    let mut dims = None;
    for c in 1..=num_classes {
        let path = dir.join(format!("{image}_{c}.pgm"));
        let img = Pnm::read(&path)?;
        if img.channels != 1 || dims.is_some_and(|d| d != (img.height, img.width)) {
            return Err(Error::format(&path, "expected a grey map matching the other classes".to_string()));
        }
        dims = Some((img.height, img.width));
        let max = img.maxval as f64;
        data.extend(img.samples.iter().map(|&s| s as f64 / max));
    }
    let (h, w) = dims.ok_or_else(|| config_err!("num_classes must be >= 1"))?;
    Tensor::new(&[num_classes, h, w], data)
}
