//! Fusion ops against per-pixel brute force, plus the algebraic properties
//! tying dynamic fusion to fixed fusion.

mod common;

use common::{dynamic_fuse_oracle, fixed_fuse_oracle, rand_tensor};
use dff::autograd::{BnConfig, Graph, Mode, Var};
use dff::fusion::{
    self, AdaptiveWeightLearner, FixedFusionParams, FusionWeights, InvariantWeightLearner, SideNormBlock, SideOutputs,
    GROUP,
};
use dff::nn::{Ctx, ParamStore};
use dff::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Sides {
    s5: Tensor,
    s1: Tensor,
    s2: Tensor,
    s3: Tensor,
}

impl Sides {
    fn random(n: usize, k: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            s5: rand_tensor(&[n, k, h, w], rng),
            s1: rand_tensor(&[n, 1, h, w], rng),
            s2: rand_tensor(&[n, 1, h, w], rng),
            s3: rand_tensor(&[n, 1, h, w], rng),
        }
    }

    fn leaves(&self, g: &mut Graph) -> SideOutputs {
        SideOutputs {
            a_side5: g.constant(self.s5.clone()),
            a_side1: g.constant(self.s1.clone()),
            a_side2: g.constant(self.s2.clone()),
            a_side3: g.constant(self.s3.clone()),
        }
    }

    /// The four responses feeding category `i` at one pixel, in weight order.
    fn responses(&self, b: usize, i: usize, y: usize, x: usize) -> [f64; 4] {
        [self.s5.at4(b, i, y, x), self.s1.at4(b, 0, y, x), self.s2.at4(b, 0, y, x), self.s3.at4(b, 0, y, x)]
    }
}

fn rand_weights(k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 4]> {
    let t = rand_tensor(&[k, 4], rng);
    t.data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect()
}

fn fixed_params(w: &[[f64; 4]], bias: Option<Vec<f64>>) -> FixedFusionParams {
    FixedFusionParams {
        weights: w.iter().flatten().copied().collect(),
        bias,
    }
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Broadcasting fixed weights over every location makes dynamic fusion
    /// reproduce fixed fusion without bias.
    #[test]
    fn dynamic_fusion_with_constant_weights_reduces_to_fixed(seed in any::<u64>(), n in 1usize..3, k in 1usize..5, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sides = Sides::random(n, k, h, w, &mut rng);
        let weights = rand_weights(k, &mut rng);
        let mut g = Graph::new();
        let so = sides.leaves(&mut g);
        let cat = fusion::shared_concat(&mut g, &so).unwrap();
        let fixed = fusion::fixed_fuse_params(&mut g, &cat, &fixed_params(&weights, None)).unwrap();
        let psi = Tensor::from_fn(&[n, GROUP * k, h, w], |idx| {
            let c = (idx / (h * w)) % (GROUP * k);
            weights[c / GROUP][c % GROUP]
        }).unwrap();
        let psi = g.constant(psi);
        let dynamic = fusion::dynamic_fuse(&mut g, &cat, &FusionWeights { psi, spatially_constant: true }).unwrap();
        prop_assert!(max_diff(g.value(fixed), g.value(dynamic)) < 1e-12);
    }

    #[test]
    fn fixed_fusion_matches_per_pixel_sum(seed in any::<u64>(), k in 1usize..5, h in 1usize..6, w in 1usize..6, with_bias in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sides = Sides::random(2, k, h, w, &mut rng);
        let weights = rand_weights(k, &mut rng);
        let bias = with_bias.then(|| rand_tensor(&[k], &mut rng).into_data());
        let mut g = Graph::new();
        let so = sides.leaves(&mut g);
        let cat = fusion::shared_concat(&mut g, &so).unwrap();
        let out = fusion::fixed_fuse_params(&mut g, &cat, &fixed_params(&weights, bias.clone())).unwrap();
        let out = g.value(out);
        for b in 0..2 {
            for i in 0..k {
                for y in 0..h {
                    for x in 0..w {
                        let r = sides.responses(b, i, y, x);
                        let mut expect = bias.as_ref().map_or(0.0, |bb| bb[i]);
                        for j in 0..4 {
                            expect += weights[i][j] * r[j];
                        }
                        prop_assert!((out.at4(b, i, y, x) - expect).abs() < 1e-12);
                    }
                }
            }
        }
        // The concatenated-map oracle agrees too.
        let oracle = fixed_fuse_oracle(g.value(cat.var), &weights, bias.as_deref());
        prop_assert!(max_diff(out, &oracle) < 1e-12);
    }

    #[test]
    fn dynamic_fusion_matches_per_pixel_sum(seed in any::<u64>(), k in 1usize..5, h in 1usize..6, w in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sides = Sides::random(2, k, h, w, &mut rng);
        let psi = rand_tensor(&[2, GROUP * k, h, w], &mut rng);
        let mut g = Graph::new();
        let so = sides.leaves(&mut g);
        let cat = fusion::shared_concat(&mut g, &so).unwrap();
        let pv = g.constant(psi.clone());
        let out = fusion::dynamic_fuse(&mut g, &cat, &FusionWeights { psi: pv, spatially_constant: false }).unwrap();
        let out = g.value(out);
        for b in 0..2 {
            for i in 0..k {
                for y in 0..h {
                    for x in 0..w {
                        let r = sides.responses(b, i, y, x);
                        let expect: f64 = (0..4).map(|j| psi.at4(b, GROUP * i + j, y, x) * r[j]).sum();
                        prop_assert!((out.at4(b, i, y, x) - expect).abs() < 1e-12);
                    }
                }
            }
        }
        prop_assert!(max_diff(out, &dynamic_fuse_oracle(g.value(cat.var), &psi)) < 1e-12);
    }

    #[test]
    fn softmax_constrained_groups_sum_to_one(seed in any::<u64>(), k in 1usize..5, scale in 0.1f64..60.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::uniform(&[2, GROUP * k, 3, 4], -scale, scale, &mut rng).unwrap();
        let mut g = Graph::new();
        let psi = g.constant(logits.clone());
        let out = fusion::softmax_constrain(&mut g, &FusionWeights { psi, spatially_constant: false }).unwrap();
        let out = g.value(out.psi);
        for b in 0..2 {
            for i in 0..k {
                for y in 0..3 {
                    for x in 0..4 {
                        let e: Vec<f64> = (0..4).map(|j| logits.at4(b, GROUP * i + j, y, x).exp()).collect();
                        let z: f64 = e.iter().sum();
                        let total: f64 = (0..4).map(|j| out.at4(b, GROUP * i + j, y, x)).sum();
                        prop_assert!((total - 1.0).abs() < 1e-9);
                        if z.is_finite() {
                            for j in 0..4 {
                                prop_assert!((out.at4(b, GROUP * i + j, y, x) - e[j] / z).abs() < 1e-12);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn one_hot_weight_selects_a_single_side(seed in any::<u64>(), k in 1usize..4, slot in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sides = Sides::random(1, k, 3, 3, &mut rng);
        let psi = Tensor::from_fn(&[1, GROUP * k, 3, 3], |idx| if (idx / 9) % GROUP == slot { 1.0 } else { 0.0 }).unwrap();
        let mut g = Graph::new();
        let so = sides.leaves(&mut g);
        let cat = fusion::shared_concat(&mut g, &so).unwrap();
        let pv = g.constant(psi);
        let out = fusion::dynamic_fuse(&mut g, &cat, &FusionWeights { psi: pv, spatially_constant: false }).unwrap();
        let out = g.value(out);
        for i in 0..k {
            for y in 0..3 {
                for x in 0..3 {
                    prop_assert_eq!(out.at4(0, i, y, x), sides.responses(0, i, y, x)[slot]);
                }
            }
        }
    }

    /// Only the pixel that changed sees different weights.
    #[test]
    fn adaptive_weights_are_local(seed in any::<u64>(), py in 0usize..4, px in 0usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let learner = AdaptiveWeightLearner::new(&mut store, &mut rng, "l", 8, 8).unwrap();
        set(&mut store, learner.bn3.gamma, 1.0);
        let x = rand_tensor(&[1, 8, 4, 5], &mut rng);
        let mut x2 = x.clone();
        for c in 0..8 {
            x2.data_mut()[(c * 4 + py) * 5 + px] += 0.5 + c as f64;
        }
        let a = learner_eval(&store, &x, |ctx, v| learner.forward(ctx, v));
        let b = learner_eval(&store, &x2, |ctx, v| learner.forward(ctx, v));
        let mut changed = false;
        for c in 0..8 {
            for y in 0..4 {
                for xx in 0..5 {
                    let d = (a.at4(0, c, y, xx) - b.at4(0, c, y, xx)).abs();
                    if (y, xx) == (py, px) {
                        changed |= d > 1e-9;
                    } else {
                        prop_assert_eq!(d, 0.0);
                    }
                }
            }
        }
        prop_assert!(changed);
    }

    /// Global pooling makes the invariant learner blind to pixel order.
    #[test]
    fn invariant_weights_ignore_spatial_permutation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let learner = InvariantWeightLearner::new(&mut store, &mut rng, "l", 8, 8).unwrap();
        set(&mut store, learner.bn3.gamma, 1.0);
        let x = rand_tensor(&[2, 8, 3, 4], &mut rng);
        let mut perm: Vec<usize> = (0..12).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let mut xp = x.clone();
        for plane in 0..16 {
            for (dst, &src) in perm.iter().enumerate() {
                xp.data_mut()[plane * 12 + dst] = x.data()[plane * 12 + src];
            }
        }
        for mode in [Mode::Train, Mode::Eval] {
            let a = learner_run(&store, &x, mode, |ctx, v| learner.forward(ctx, v));
            let b = learner_run(&store, &xp, mode, |ctx, v| learner.forward(ctx, v));
            prop_assert!(max_diff(&a, &b) < 1e-12);
        }
    }
}

fn learner_run(
    store: &ParamStore,
    x: &Tensor,
    mode: Mode,
    f: impl FnOnce(&mut Ctx, Var) -> dff::Result<FusionWeights>,
) -> Tensor {
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), false);
    let mut ctx = Ctx::new(&mut g, store, mode, BnConfig::default());
    let w = f(&mut ctx, v).unwrap();
    ctx.finish();
    g.value(w.psi).clone()
}

fn learner_eval(store: &ParamStore, x: &Tensor, f: impl FnOnce(&mut Ctx, Var) -> dff::Result<FusionWeights>) -> Tensor {
    learner_run(store, x, Mode::Eval, f)
}

fn set(store: &mut ParamStore, id: dff::nn::ParamId, v: f64) {
    store.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x = v);
}

fn set_values(store: &mut ParamStore, id: dff::nn::ParamId, vals: &[f64]) {
    store.get_mut(id).value.data_mut().copy_from_slice(vals);
}

#[test]
fn invariant_weights_are_spatially_constant_and_input_dependent() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let learner = InvariantWeightLearner::new(&mut store, &mut rng, "l", 8, 8).unwrap();
    set(&mut store, learner.bn3.gamma, 1.0);
    let x1 = rand_tensor(&[2, 8, 4, 4], &mut rng);
    let x2 = rand_tensor(&[2, 8, 4, 4], &mut rng);
    let a = learner_eval(&store, &x1, |ctx, v| learner.forward(ctx, v));
    let b = learner_eval(&store, &x2, |ctx, v| learner.forward(ctx, v));
    for plane in a.data().chunks(16) {
        let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo < 1e-12);
    }
    assert!(max_diff(&a, &b) > 1e-6);
}

#[test]
fn zeroed_final_layer_yields_the_bn_shift() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shift: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
    let x = rand_tensor(&[2, 8, 3, 3], &mut rng);

    let mut store = ParamStore::new();
    let inv = InvariantWeightLearner::new(&mut store, &mut rng, "inv", 8, 8).unwrap();
    set(&mut store, inv.fc3.weight, 0.0);
    set(&mut store, inv.fc3.bias, 0.0);
    set_values(&mut store, inv.bn3.beta, &shift);
    let psi = learner_eval(&store, &x, |ctx, v| inv.forward(ctx, v));
    for (idx, v) in psi.data().iter().enumerate() {
        assert!((v - shift[(idx / 9) % 8]).abs() < 1e-15);
    }

    let mut store = ParamStore::new();
    let ada = AdaptiveWeightLearner::new(&mut store, &mut rng, "ada", 8, 8).unwrap();
    set(&mut store, ada.conv3.weight, 0.0);
    set_values(&mut store, ada.bn3.beta, &shift);
    let psi = learner_eval(&store, &x, |ctx, v| ada.forward(ctx, v));
    for (idx, v) in psi.data().iter().enumerate() {
        assert!((v - shift[(idx / 9) % 8]).abs() < 1e-15);
    }
}

#[test]
fn fresh_learners_start_at_uniform_averaging() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut store = ParamStore::new();
    let inv = InvariantWeightLearner::new(&mut store, &mut rng, "inv", 8, 8).unwrap();
    let ada = AdaptiveWeightLearner::new(&mut store, &mut rng, "ada", 8, 8).unwrap();
    let x = rand_tensor(&[2, 8, 3, 3], &mut rng);
    for mode in [Mode::Train, Mode::Eval] {
        let a = learner_run(&store, &x, mode, |ctx, v| inv.forward(ctx, v));
        let b = learner_run(&store, &x, mode, |ctx, v| ada.forward(ctx, v));
        assert!(a.data().iter().chain(b.data()).all(|&v| v == 0.25));
    }
}

#[test]
fn learners_reject_wrong_channel_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let inv = InvariantWeightLearner::new(&mut store, &mut rng, "inv", 8, 8).unwrap();
    let ada = AdaptiveWeightLearner::new(&mut store, &mut rng, "ada", 8, 8).unwrap();
    let x = Tensor::zeros(&[1, 12, 2, 2]).unwrap();
    let mut g = Graph::new();
    let v = g.leaf(x, false);
    let mut ctx = Ctx::new(&mut g, &store, Mode::Eval, BnConfig::default());
    assert!(matches!(inv.forward(&mut ctx, v), Err(dff::Error::Dimension(_))));
    assert!(matches!(ada.forward(&mut ctx, v), Err(dff::Error::Dimension(_))));
}

#[test]
fn side_block_reaches_full_resolution_and_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let block = SideNormBlock::new(&mut store, &mut rng, "side3", 5, 1, 4, true, false).unwrap();
    let feature = Tensor::uniform(&[2, 5, 4, 4], -30.0, 30.0, &mut rng).unwrap();

    let mut g = Graph::new();
    let v = g.leaf(feature.clone(), false);
    let mut ctx = Ctx::new(&mut g, &store, Mode::Train, BnConfig::default());
    let pre = block.conv.forward(&mut ctx, v).unwrap();
    let normed = block.bn.as_ref().unwrap().forward(&mut ctx, pre).unwrap();
    let out = block.forward(&mut ctx, v, (16, 16)).unwrap();
    ctx.finish();
    assert_eq!(g.shape(out), &[2, 1, 16, 16]);
    let vals = g.value(normed).data();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-6, "var {var}");

    let mut g = Graph::new();
    let v = g.leaf(feature, false);
    let mut ctx = Ctx::new(&mut g, &store, Mode::Train, BnConfig::default());
    assert!(matches!(block.forward(&mut ctx, v, (32, 32)), Err(dff::Error::Config(_))));
}
