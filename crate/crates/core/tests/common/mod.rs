//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use dff::autograd::{BceOptions, Graph, Mode, Var};
use dff::fusion::GROUP;
use dff::model::{total_loss, DffModel};
use dff::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// The full network has thousands of ReLU units; a 1e-5 nudge of a stem weight
/// moves enough pre-activations across zero to bias the difference by percents.
pub const MODEL_FD_STEP: f64 = 1e-6;

/// Gradients below this magnitude are compared absolutely; central differences
/// on losses of order 10² carry roundoff near 1e-9.
pub const FD_FLOOR: f64 = 1e-3;

/// Full-model losses sum to ~2e2; their last-bit noise over a 1e-6 step leaves
/// ~1e-6 of absolute noise in the difference quotient.
pub const MODEL_FD_FLOOR: f64 = 2e-2;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_floor(analytic, numeric, FD_FLOOR)
}

pub fn rel_err_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn rand_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng).unwrap()
}

/// Scalar loss `Σ out ⊙ proj` (or `out` itself when scalar).
fn project(g: &mut Graph, out: Var, proj: &Option<Tensor>) -> Var {
    match proj {
        None => out,
        Some(p) => {
            let c = g.constant(p.clone());
            let m = g.mul(out, c).unwrap();
            g.sum(m).unwrap()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
}

/// Compares backward against central differences for every input element
/// (or `per_input` random elements of each input).
pub fn check_op<R: Rng>(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Graph, &[Var]) -> dff::Result<Var>,
    per_input: Option<usize>,
    rng: &mut R,
) -> FdReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars).unwrap();
    let proj = (g.value(out).len() > 1).then(|| rand_tensor(g.shape(out), rng));
    let loss = project(&mut g, out, &proj);
    g.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars).unwrap();
        let loss = project(&mut g, out, &proj);
        g.value(loss).data()[0]
    };
    let mut report = FdReport { max_rel: 0.0, checked: 0 };
    for (i, t) in inputs.iter().enumerate() {
        let mut idx: Vec<usize> = (0..t.len()).collect();
        if let Some(n) = per_input {
            idx.shuffle(rng);
            idx.truncate(n);
        }
        for j in idx {
            let mut vals = inputs.to_vec();
            vals[i].data_mut()[j] += FD_STEP;
            let up = eval(&vals);
            vals[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&vals);
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.max_rel = report.max_rel.max(rel_err(grads[i][j], numeric));
            report.checked += 1;
        }
    }
    report
}

pub fn model_loss(model: &DffModel, image: &Tensor, labels: &Tensor, mode: Mode) -> f64 {
    let mut g = Graph::new();
    let (out, _) = model.forward(&mut g, image, mode).unwrap();
    let loss = total_loss(&mut g, &out, labels, BceOptions::default()).unwrap();
    g.value(loss).data()[0]
}

/// Central differences on `per_param` random entries of every trainable parameter.
pub fn check_model<R: Rng>(
    model: &DffModel,
    image: &Tensor,
    labels: &Tensor,
    mode: Mode,
    per_param: usize,
    rng: &mut R,
) -> FdReport {
    let res = model.loss_and_grads(image, labels, mode, true).unwrap();
    let mut report = FdReport { max_rel: 0.0, checked: 0 };
    let mut probe = model.clone();
    for (id, p) in model.params.iter() {
        if !p.trainable {
            continue;
        }
        let grad = res.grads[id.index()].as_ref().map(|g| g.as_slice());
        for _ in 0..per_param.min(p.value.len()) {
            let j = rng.gen_range(0..p.value.len());
            let orig = p.value.data()[j];
            probe.params.get_mut(id).value.data_mut()[j] = orig + MODEL_FD_STEP;
            let up = model_loss(&probe, image, labels, mode);
            probe.params.get_mut(id).value.data_mut()[j] = orig - MODEL_FD_STEP;
            let down = model_loss(&probe, image, labels, mode);
            probe.params.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * MODEL_FD_STEP);
            let analytic = grad.map_or(0.0, |g| g[j]);
            let e = rel_err_floor(analytic, numeric, MODEL_FD_FLOOR);
            if e > 1e-4 {
                eprintln!("{}[{j}]: analytic {analytic:e} numeric {numeric:e}", p.name);
            }
            report.max_rel = report.max_rel.max(e);
            report.checked += 1;
        }
    }
    report
}

/// `A_cat` slot `j` of category `i` at `(n, y, x)`: side5 channel `i`, then side1..3.
pub fn cat_value(cat: &Tensor, n: usize, i: usize, j: usize, y: usize, x: usize) -> f64 {
    cat.at4(n, i * GROUP + j, y, x)
}

/// Per-pixel evaluation of `Σ_j w[i][j] · A_cat(i, j)` (+ bias).
pub fn fixed_fuse_oracle(cat: &Tensor, w: &[[f64; 4]], bias: Option<&[f64]>) -> Tensor {
    let (n, c, h, wd) = cat.dims4().unwrap();
    let k = c / GROUP;
    let mut out = Tensor::zeros(&[n, k, h, wd]).unwrap();
    for b in 0..n {
        for i in 0..k {
            for y in 0..h {
                for x in 0..wd {
                    let mut s = bias.map_or(0.0, |bb| bb[i]);
                    for j in 0..GROUP {
                        s += w[i][j] * cat_value(cat, b, i, j, y, x);
                    }
                    out.data_mut()[((b * k + i) * h + y) * wd + x] = s;
                }
            }
        }
    }
    out
}

/// Per-pixel evaluation with a location-dependent weight field `psi` (N × 4K × H × W).
pub fn dynamic_fuse_oracle(cat: &Tensor, psi: &Tensor) -> Tensor {
    let (n, c, h, wd) = cat.dims4().unwrap();
    let k = c / GROUP;
    let mut out = Tensor::zeros(&[n, k, h, wd]).unwrap();
    for b in 0..n {
        for i in 0..k {
            for y in 0..h {
                for x in 0..wd {
                    let mut s = 0.0;
                    for j in 0..GROUP {
                        s += psi.at4(b, i * GROUP + j, y, x) * cat_value(cat, b, i, j, y, x);
                    }
                    out.data_mut()[((b * k + i) * h + y) * wd + x] = s;
                }
            }
        }
    }
    out
}

/// Exhaustive maximum matching: memoized search over (pred index, used-gt bitmask).
pub fn brute_force_matching(pred: &[bool], gt: &[bool], h: usize, w: usize, tolerance: f64) -> (usize, usize, usize) {
    let d = tolerance * ((h * h + w * w) as f64).sqrt();
    let pts = |m: &[bool]| -> Vec<(i64, i64)> {
        m.iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| ((i / w) as i64, (i % w) as i64))
            .collect()
    };
    let (p, g) = (pts(pred), pts(gt));
    assert!(g.len() <= 20, "oracle limited to small instances");
    let feasible: Vec<Vec<usize>> = p
        .iter()
        .map(|&(py, px)| {
            (0..g.len())
                .filter(|&j| {
                    let (dy, dx) = (py - g[j].0, px - g[j].1);
                    ((dy * dy + dx * dx) as f64) <= d * d
                })
                .collect()
        })
        .collect();
    fn best(i: usize, used: u32, feasible: &[Vec<usize>], memo: &mut HashMap<(usize, u32), usize>) -> usize {
        if i == feasible.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, used)) {
            return v;
        }
        let mut v = best(i + 1, used, feasible, memo);
        for &j in &feasible[i] {
            if used & (1 << j) == 0 {
                v = v.max(1 + best(i + 1, used | (1 << j), feasible, memo));
            }
        }
        memo.insert((i, used), v);
        v
    }
    let tp = best(0, 0, &feasible, &mut HashMap::new());
    (tp, p.len() - tp, g.len() - tp)
}

/// Random binary map of size `h × w` with `count` set pixels inside an `r × r` window.
pub fn clustered_map<R: Rng>(h: usize, w: usize, count: usize, r: usize, rng: &mut R) -> Vec<bool> {
    let (oy, ox) = (rng.gen_range(0..h.saturating_sub(r).max(1)), rng.gen_range(0..w.saturating_sub(r).max(1)));
    let mut cells: Vec<usize> = (0..h * w)
        .filter(|&i| (oy..oy + r).contains(&(i / w)) && (ox..ox + r).contains(&(i % w)))
        .collect();
    cells.shuffle(rng);
    let mut m = vec![false; h * w];
    for &c in cells.iter().take(count) {
        m[c] = true;
    }
    m
}

/// Like [`check_op`], for a block whose parameters live in a store: checks the
/// explicit inputs and `per_param` random entries of every trainable parameter.
pub fn check_block<R: Rng>(
    store: &dff::nn::ParamStore,
    inputs: &[Tensor],
    mode: Mode,
    f: &dyn Fn(&mut dff::nn::Ctx, &[Var]) -> dff::Result<Var>,
    per_param: usize,
    rng: &mut R,
) -> FdReport {
    use dff::autograd::BnConfig;
    use dff::nn::Ctx;
    let run = |store: &dff::nn::ParamStore, vals: &[Tensor], proj: &Option<Tensor>, want_grads: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let mut ctx = Ctx::new(&mut g, store, mode, BnConfig::default());
        let out = f(&mut ctx, &vars).unwrap();
        let bindings = ctx.finish();
        let loss = project(&mut g, out, &proj);
        let value = g.value(loss).data()[0];
        if !want_grads {
            return (value, Vec::new(), Vec::new(), g.shape(out).to_vec());
        }
        g.backward(loss).unwrap();
        let gi: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
        let gp: Vec<(dff::nn::ParamId, Vec<f64>)> = bindings
            .vars
            .iter()
            .filter_map(|&(id, v)| g.grad(v).map(|gr| (id, gr.to_vec())))
            .collect();
        (value, gi, gp, g.shape(out).to_vec())
    };
    // the projection shape is only known after one forward pass
    let (_, _, _, shape) = run(store, inputs, &None, false);
    let proj = (shape.iter().product::<usize>() > 1).then(|| rand_tensor(&shape, rng));
    let (_, gi, gp, _) = run(store, inputs, &proj, true);
    let mut report = FdReport { max_rel: 0.0, checked: 0 };
    let mut note = |analytic: f64, numeric: f64| {
        report.max_rel = report.max_rel.max(rel_err(analytic, numeric));
        report.checked += 1;
    };
    for (i, t) in inputs.iter().enumerate() {
        for _ in 0..per_param.min(t.len()) {
            let j = rng.gen_range(0..t.len());
            let mut vals = inputs.to_vec();
            vals[i].data_mut()[j] += FD_STEP;
            let up = run(store, &vals, &proj, false).0;
            vals[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = run(store, &vals, &proj, false).0;
            note(gi[i][j], (up - down) / (2.0 * FD_STEP));
        }
    }
    let mut probe = store.clone();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let grad = gp.iter().find(|(pid, _)| *pid == id).map(|(_, g)| g.as_slice());
        for _ in 0..per_param.min(p.value.len()) {
            let j = rng.gen_range(0..p.value.len());
            let orig = p.value.data()[j];
            probe.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let up = run(&probe, inputs, &proj, false).0;
            probe.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let down = run(&probe, inputs, &proj, false).0;
            probe.get_mut(id).value.data_mut()[j] = orig;
            note(grad.map_or(0.0, |g| g[j]), (up - down) / (2.0 * FD_STEP));
        }
    }
    report
}
