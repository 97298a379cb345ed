//! Acceptance run: one PASS/FAIL line per criterion on stderr, then the usual
//! assertion so `cargo test` reports failures.
//!
//! Criteria 7 and 8 share a single full ablation (six rows, seeds 1..3, the
//! default 250-image 64×64 synthetic set) that takes tens of minutes.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{brute_force_matching, check_model, check_op, clustered_map, dynamic_fuse_oracle, fixed_fuse_oracle, rand_tensor};
use dff::autograd::{Activation, BceOptions, BnConfig, BnRunning, Conv2dSpec, Graph, Mode, UpsampleKernel, Var};
use dff::eval::{match_edges, mf_ods, EdgeLabel, EvalOptions};
use dff::fusion::{self, FixedFusionParams, FusionWeights, SideOutputs, GROUP};
use dff::harness::{
    ablation, ablation_rows, gen_dataset, train, AblationReport, Dataset, SynthConfig, TrainConfig, ADAPTIVE_NO_NORM_ROW,
    ADAPTIVE_ROW, BASELINE_ROW,
};
use dff::model::{build_model, FusionMode, ModelConfig};
use dff::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes straight to the process stderr so the line shows even for passing tests.
fn verdict(n: u32, pass: bool, what: &str) {
    let line = format!("{} criterion {n}: {what}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn conclude(n: u32, pass: bool, what: String) {
    verdict(n, pass, &what);
    assert!(pass, "criterion {n}: {what}");
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> dff::Result<Var>>;

fn spec(stride: usize, padding: usize, groups: usize) -> Conv2dSpec {
    Conv2dSpec { stride, padding, groups }
}

fn sides(v: &[Var]) -> SideOutputs {
    SideOutputs {
        a_side5: v[0],
        a_side1: v[1],
        a_side2: v[2],
        a_side3: v[3],
    }
}

fn op_suite() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let s = |v: &[&[usize]]| v.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    let bn = |mode| -> OpFn {
        Box::new(move |g: &mut Graph, v: &[Var]| {
            let running = BnRunning {
                mean: vec![0.1, -0.2],
                var: vec![0.8, 1.3],
            };
            Ok(g.batch_norm(v[0], v[1], v[2], &running, BnConfig::default(), mode)?.0)
        })
    };
    let k = 2;
    let side_shapes: &[&[usize]] = &[&[1, 2, 3, 3], &[1, 1, 3, 3], &[1, 1, 3, 3], &[1, 1, 3, 3]];
    let with = |extra: &[usize]| {
        let mut v = s(side_shapes);
        v.push(extra.to_vec());
        v
    };
    vec![
        ("conv 3x3", s(&[&[2, 3, 5, 4], &[4, 3, 3, 3], &[4]]), Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), spec(1, 1, 1)))),
        ("conv stride 2", s(&[&[1, 2, 6, 7], &[3, 2, 3, 3]]), Box::new(|g, v| g.conv2d(v[0], v[1], None, spec(2, 1, 1)))),
        ("grouped 1x1", s(&[&[2, 8, 3, 3], &[2, 4, 1, 1], &[2]]), Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), spec(1, 0, 2)))),
        ("bilinear x4", s(&[&[1, 2, 3, 2]]), Box::new(|g, v| g.upsample(v[0], 4, UpsampleKernel::Bilinear))),
        ("learned x2", s(&[&[2, 2, 2, 3], &[2, 4, 4]]), Box::new(|g, v| g.upsample(v[0], 2, UpsampleKernel::Learned(v[1])))),
        ("bn train", s(&[&[3, 2, 2, 3], &[2], &[2]]), bn(Mode::Train)),
        ("bn eval", s(&[&[3, 2, 2, 3], &[2], &[2]]), bn(Mode::Eval)),
        ("gap", s(&[&[2, 3, 4, 5]]), Box::new(|g, v| g.global_avg_pool(v[0]))),
        ("linear", s(&[&[3, 4], &[5, 4], &[5]]), Box::new(|g, v| g.linear(v[0], v[1], v[2]))),
        ("relu", s(&[&[2, 3, 4]]), Box::new(|g, v| g.relu(v[0]))),
        ("sigmoid", s(&[&[2, 3, 4]]), Box::new(|g, v| g.sigmoid(v[0]))),
        ("group softmax", s(&[&[2, 8, 2, 3]]), Box::new(|g, v| g.activation(v[0], Activation::SoftmaxGroup(4)))),
        ("add", s(&[&[2, 3, 2], &[2, 3, 2]]), Box::new(|g, v| g.add(v[0], v[1]))),
        ("mul", s(&[&[2, 3, 2], &[2, 3, 2]]), Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", s(&[&[5]]), Box::new(|g, v| g.scale(v[0], -2.5))),
        ("sum", s(&[&[2, 3, 2]]), Box::new(|g, v| g.sum(v[0]))),
        ("gather", s(&[&[2, 3, 2, 2], &[2, 1, 2, 2]]), Box::new(|g, v| g.gather_channels(&[(v[0], 2), (v[1], 0), (v[0], 0)]))),
        ("broadcast", s(&[&[2, 3]]), Box::new(|g, v| g.broadcast_spatial(v[0], 2, 3))),
        ("group sum", s(&[&[2, 8, 2, 2]]), Box::new(|g, v| g.group_sum(v[0], 4))),
        (
            "fixed fuse",
            with(&[k, 4, 1, 1]),
            Box::new(|g, v| {
                let cat = fusion::shared_concat(g, &sides(v))?;
                fusion::fixed_fuse(g, &cat, v[4], None)
            }),
        ),
        (
            "dynamic fuse",
            with(&[1, 4 * k, 3, 3]),
            Box::new(|g, v| {
                let cat = fusion::shared_concat(g, &sides(v))?;
                fusion::dynamic_fuse(g, &cat, &FusionWeights { psi: v[4], spatially_constant: false })
            }),
        ),
        (
            "reweighted bce",
            s(&[&[2, 2, 3, 3]]),
            Box::new(|g, v| {
                let labels = Tensor::from_fn(&[2, 2, 3, 3], |i| ((i * 7) % 5 == 0) as u8 as f64)?;
                g.reweighted_bce(v[0], &labels, BceOptions::default())
            }),
        ),
    ]
}

#[test]
fn criterion_1_gradient_correctness() {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checked = 0;
    for (name, shapes, f) in op_suite() {
        for t in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(t);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
            let r = check_op(&inputs, f.as_ref(), None, &mut rng);
            checked += r.checked;
            if r.max_rel >= worst.0 {
                worst = (r.max_rel, name.to_string());
            }
        }
    }
    for (i, mode) in [FusionMode::Adaptive, FusionMode::Invariant, FusionMode::Fixed].into_iter().enumerate() {
        let cfg = ModelConfig {
            num_classes: 2,
            fusion_mode: mode,
            height: 16,
            width: 16,
            ..Default::default()
        };
        let mut model = build_model(&cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50 + i as u64);
        // Fresh learners emit constant weights; a nonzero output scale exercises their gradients too.
        if let Some(gamma) = model.params.find("learner.bn3.gamma") {
            model.params.get_mut(gamma).value = rand_tensor(&[GROUP * 2], &mut rng);
        }
        let image = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng).unwrap();
        let labels = Tensor::from_fn(&[1, 2, 16, 16], |_| if rng.gen_bool(0.2) { 1.0 } else { 0.0 }).unwrap();
        let r = check_model(&model, &image, &labels, Mode::Train, 3, &mut rng);
        checked += r.checked;
        if r.max_rel >= worst.0 {
            worst = (r.max_rel, format!("model ({mode})"));
        }
    }
    let elapsed = start.elapsed();
    let pass = worst.0 < 1e-4 && elapsed < Duration::from_secs(60);
    conclude(
        1,
        pass,
        format!(
            "{checked} gradient entries, max relative error {:.2e} ({}), {:.1}s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    );
}

fn random_sides(n: usize, k: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> [Tensor; 4] {
    [
        rand_tensor(&[n, k, h, w], rng),
        rand_tensor(&[n, 1, h, w], rng),
        rand_tensor(&[n, 1, h, w], rng),
        rand_tensor(&[n, 1, h, w], rng),
    ]
}

fn cat_of(g: &mut Graph, s: &[Tensor; 4]) -> fusion::ConcatMap {
    let v: Vec<Var> = s.iter().map(|t| g.constant(t.clone())).collect();
    fusion::shared_concat(g, &sides(&v)).unwrap()
}

fn rand_weights(k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 4]> {
    (0..k).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect()
}

#[test]
fn criterion_2_reduction_equivalence() {
    let mut worst = 0.0f64;
    for t in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + t);
        let (n, k, h, w) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(1..7));
        let s = random_sides(n, k, h, w, &mut rng);
        let weights = rand_weights(k, &mut rng);
        let mut g = Graph::new();
        let cat = cat_of(&mut g, &s);
        let params = FixedFusionParams {
            weights: weights.iter().flatten().copied().collect(),
            bias: None,
        };
        let fixed = fusion::fixed_fuse_params(&mut g, &cat, &params).unwrap();
        let psi = Tensor::from_fn(&[n, GROUP * k, h, w], |idx| {
            let c = (idx / (h * w)) % (GROUP * k);
            weights[c / GROUP][c % GROUP]
        })
        .unwrap();
        let psi = g.constant(psi);
        let dynamic = fusion::dynamic_fuse(&mut g, &cat, &FusionWeights { psi, spatially_constant: true }).unwrap();
        worst = worst.max(g.value(fixed).max_abs_diff(g.value(dynamic)).unwrap());
    }
    conclude(2, worst <= 1e-12, format!("100 instances, max |dynamic - fixed| = {worst:.2e}"));
}

#[test]
fn criterion_3_fusion_oracle() {
    let mut worst = 0.0f64;
    for t in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + t);
        let (n, k, h, w) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..7), rng.gen_range(1..7));
        let s = random_sides(n, k, h, w, &mut rng);
        let weights = rand_weights(k, &mut rng);
        let bias: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let psi = rand_tensor(&[n, GROUP * k, h, w], &mut rng);
        let mut g = Graph::new();
        let cat = cat_of(&mut g, &s);
        let params = FixedFusionParams {
            weights: weights.iter().flatten().copied().collect(),
            bias: Some(bias.clone()),
        };
        let fixed = fusion::fixed_fuse_params(&mut g, &cat, &params).unwrap();
        let pv = g.constant(psi.clone());
        let dynamic = fusion::dynamic_fuse(&mut g, &cat, &FusionWeights { psi: pv, spatially_constant: false }).unwrap();
        // Brute force straight from the side maps, slot order (side5^i, side1, side2, side3).
        for b in 0..n {
            for i in 0..k {
                for y in 0..h {
                    for x in 0..w {
                        let r = [s[0].at4(b, i, y, x), s[1].at4(b, 0, y, x), s[2].at4(b, 0, y, x), s[3].at4(b, 0, y, x)];
                        let f: f64 = bias[i] + (0..4).map(|j| weights[i][j] * r[j]).sum::<f64>();
                        let d: f64 = (0..4).map(|j| psi.at4(b, GROUP * i + j, y, x) * r[j]).sum();
                        worst = worst.max((g.value(fixed).at4(b, i, y, x) - f).abs());
                        worst = worst.max((g.value(dynamic).at4(b, i, y, x) - d).abs());
                    }
                }
            }
        }
        let cv = g.value(cat.var);
        worst = worst.max(g.value(fixed).max_abs_diff(&fixed_fuse_oracle(cv, &weights, Some(&bias))).unwrap());
        worst = worst.max(g.value(dynamic).max_abs_diff(&dynamic_fuse_oracle(cv, &psi)).unwrap());
    }
    conclude(3, worst <= 1e-12, format!("100 instances, max deviation from per-pixel evaluation {worst:.2e}"));
}

#[test]
fn criterion_4_softmax_groups_sum_to_one() {
    let mut worst = 0.0f64;
    let mut groups = 0;
    for (i, mode) in [FusionMode::Adaptive, FusionMode::Invariant].into_iter().enumerate() {
        let cfg = ModelConfig {
            num_classes: 3,
            fusion_mode: mode,
            softmax: true,
            height: 16,
            width: 16,
            ..Default::default()
        };
        let mut model = build_model(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        // Spread the raw weights so the softmax is far from uniform.
        let gamma = model.params.find("learner.bn3.gamma").unwrap();
        model.params.get_mut(gamma).value = Tensor::uniform(&[GROUP * 3], -20.0, 20.0, &mut rng).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let image = Tensor::uniform(&[2, 3, 16, 16], 0.0, 1.0, &mut rng).unwrap();
            let mut g = Graph::new();
            let (out, _) = model.forward(&mut g, &image, mode).unwrap();
            let psi = g.value(out.weights.unwrap().psi);
            let (n, c, h, w) = psi.dims4().unwrap();
            for b in 0..n {
                for grp in 0..c / GROUP {
                    for y in 0..h {
                        for x in 0..w {
                            let s: f64 = (0..GROUP).map(|j| psi.at4(b, grp * GROUP + j, y, x)).sum();
                            worst = worst.max((s - 1.0).abs());
                            groups += 1;
                        }
                    }
                }
            }
        }
    }
    conclude(4, worst <= 1e-9, format!("{groups} weight groups, max |sum - 1| = {worst:.2e}"));
}

#[test]
fn criterion_5_matching_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut cases = 0;
    for _ in 0..100 {
        let (h, w, r) = (rng.gen_range(2..=16), rng.gen_range(2..=16), rng.gen_range(2..=6));
        let pred = clustered_map(h, w, rng.gen_range(0..=14), r, &mut rng);
        let gt = clustered_map(h, w, rng.gen_range(0..=14), r, &mut rng);
        for tol in [0.0035, 0.02, 0.1] {
            let m = match_edges(&pred, &gt, h, w, tol).unwrap();
            if (m.tp, m.fp, m.fn_) != brute_force_matching(&pred, &gt, h, w, tol) {
                mismatches += 1;
            }
            cases += 1;
        }
    }
    conclude(5, mismatches == 0, format!("{cases} cases, {mismatches} tp/fp/fn disagreements"));
}

#[test]
fn criterion_6_protocol_sanity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let label = |rng: &mut ChaCha8Rng| EdgeLabel {
        num_classes: 2,
        height: 20,
        width: 20,
        data: (0..800).map(|_| rng.gen_bool(0.08)).collect(),
    };
    let gts: Vec<EdgeLabel> = (0..4).map(|_| label(&mut rng)).collect();
    let preds: Vec<Tensor> = gts.iter().map(|g| g.to_tensor()).collect();
    let gt_mf = mf_ods(&preds, &gts, &EvalOptions::default()).unwrap().mean_mf;
    let mut violations = 0;
    for _ in 0..20 {
        let gts: Vec<EdgeLabel> = (0..3).map(|_| label(&mut rng)).collect();
        let preds: Vec<Tensor> = gts
            .iter()
            .map(|g| {
                // ground truth shifted one column, plus clutter
                Tensor::from_fn(&[2, 20, 20], |i| {
                    let (c, y, x) = (i / 400, (i / 20) % 20, i % 20);
                    let on = g.channel(c)[y * 20 + (x + 19) % 20];
                    if on {
                        rng.gen_range(0.5..1.0)
                    } else {
                        rng.gen_range(0.0..0.6)
                    }
                })
                .unwrap()
            })
            .collect();
        let mf = |tolerance| {
            mf_ods(&preds, &gts, &EvalOptions { tolerance, ..Default::default() }).unwrap().mean_mf
        };
        if mf(0.0035) > mf(0.02) || mf(0.02) > mf(0.1) {
            violations += 1;
        }
    }
    conclude(
        6,
        gt_mf == 1.0 && violations == 0,
        format!("GT-as-prediction MF {gt_mf}, {violations}/20 prediction sets where stricter tolerance raised MF"),
    );
}

struct AblationRun {
    report: AblationReport,
    /// (first-batch loss, last-epoch mean loss) of the adaptive row, seed 1.
    adaptive_loss: (f64, f64),
}

fn shared_ablation() -> &'static Result<AblationRun, String> {
    static RUN: OnceLock<Result<AblationRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let data_dir = dir.path().join("data");
        gen_dataset(&SynthConfig::default(), &data_dir).map_err(|e| e.to_string())?;
        let data = Dataset::load(&data_dir).map_err(|e| e.to_string())?;
        assert_eq!((data.train.len(), data.val.len()), (200, 50));
        let base = TrainConfig::default();
        let out = dir.path().join("ablation");
        let report = ablation(&data, &out, &base, &ablation_rows(), &[1, 2, 3], &EvalOptions::default())
            .map_err(|e| e.to_string())?;
        let _ = std::io::stderr().write_all(report.to_table().as_bytes());
        let trace = fs::read_to_string(out.join(format!("row{}/seed1/loss_trace.csv", ADAPTIVE_ROW + 1))).map_err(|e| e.to_string())?;
        let last: f64 = trace.lines().last().and_then(|l| l.split(',').nth(1)).and_then(|v| v.parse().ok()).ok_or("bad trace")?;
        // The first-batch loss is recomputed by a short rerun of the same configuration.
        let mut cfg = base.clone();
        cfg.model.fusion_mode = FusionMode::Adaptive;
        cfg.epochs = 1;
        let first = train(&cfg, &data, &dir.path().join("probe")).map_err(|e| e.to_string())?.initial_loss;
        Ok(AblationRun {
            report,
            adaptive_loss: (first, last),
        })
    })
}

#[test]
fn criterion_7_trend_reproduction() {
    let run = match shared_ablation() {
        Ok(r) => r,
        Err(e) => return conclude(7, false, format!("ablation failed: {e}")),
    };
    let r = &run.report;
    let n = r.seeds.len();
    let ada_vs_base = r.wins(ADAPTIVE_ROW, BASELINE_ROW);
    let ada_vs_nonorm = r.wins(ADAPTIVE_ROW, ADAPTIVE_NO_NORM_ROW);
    let minutes = r.wall_clock.as_secs_f64() / 60.0;
    let (first, last) = run.adaptive_loss;
    let pass = r.rows.len() == 6 && 3 * ada_vs_base >= 2 * n && 3 * ada_vs_nonorm >= 2 * n && minutes < 30.0;
    let halved = last <= 0.5 * first;
    let _ = std::io::stderr().write_all(
        format!("{} adaptive train loss {first:.2} -> {last:.2}\n", if halved { "PASS" } else { "FAIL" }).as_bytes(),
    );
    conclude(
        7,
        pass && halved,
        format!(
            "adaptive > baseline on {ada_vs_base}/{n} seeds, adaptive > adaptive w/o normalizer on {ada_vs_nonorm}/{n}, {minutes:.1} min"
        ),
    );
}

#[test]
fn criterion_8_fixed_fusion_favours_side5() {
    let run = match shared_ablation() {
        Ok(r) => r,
        Err(e) => return conclude(8, false, format!("ablation failed: {e}")),
    };
    let r = &run.report;
    let n = r.seeds.len();
    let seeds = r.dominance_seeds(BASELINE_ROW);
    let weights: Vec<String> = r.rows[BASELINE_ROW]
        .fixed_weights
        .iter()
        .flatten()
        .map(|w| format!("{:.3?}", w))
        .collect();
    conclude(
        8,
        3 * seeds >= 2 * n,
        format!("|w1| dominates on {seeds}/{n} seeds; weights per seed {}", weights.join(" | ")),
    );
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(root)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect()
}

#[test]
fn criterion_9_determinism() {
    let d = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        num_images: 30,
        height: 32,
        width: 32,
        ..Default::default()
    };
    gen_dataset(&cfg, &d.path().join("data")).unwrap();
    let data = Dataset::load(&d.path().join("data")).unwrap();
    let tc = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    train(&tc, &data, &d.path().join("a")).unwrap();
    train(&tc, &data, &d.path().join("b")).unwrap();
    let (ca, cb) = (files(&d.path().join("a/checkpoint")), files(&d.path().join("b/checkpoint")));
    let ta = fs::read(d.path().join("a/loss_trace.csv")).unwrap();
    let tb = fs::read(d.path().join("b/loss_trace.csv")).unwrap();
    let bytes: usize = ca.values().map(|v| v.len()).sum();
    conclude(
        9,
        !ca.is_empty() && ca == cb && ta == tb,
        format!("{} checkpoint files ({bytes} bytes) and loss traces byte-identical: {}", ca.len(), ca == cb && ta == tb),
    );
}
