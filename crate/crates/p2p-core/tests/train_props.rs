//! Training-side oracles: loss formulas against direct recomputation,
//! matching invariances, and a single-batch overfit sanity run.

mod common;

use ndarray::Array2;
use p2p_core::data::TrainingTarget;
use p2p_core::geom::PrimitiveKind;
use p2p_core::model::Model;
use p2p_core::nn::adamw::{AdamW, AdamWConfig};
use p2p_core::nn::Tape;
use p2p_core::train::{
    self, hungarian, losses_with_match, matching_cost, train_step, MatchResult, TrainConfig,
    TrainSample,
};
use rand::Rng;

/// Direct (test-local) recomputation of all loss parts from plain arrays.
fn recompute_losses(
    coords: &Array2<f64>,
    score_logits: &Array2<f64>,
    order_logits: &Array2<f64>,
    target: &TrainingTarget,
    mres: &MatchResult,
    cfg: &TrainConfig,
) -> (f64, f64, f64, f64) {
    let n = coords.nrows();
    let mut seg_reg = 0.0;
    let mut seg_cls = 0.0;
    let mut order = 0.0;
    let mut matched = 0usize;
    for i in 0..n {
        let is_m = mres.is_matched(i);
        // 2-class CE against the matched indicator.
        let (bg, fg) = (score_logits[[i, 0]], score_logits[[i, 1]]);
        let m = bg.max(fg);
        let lse = m + ((bg - m).exp() + (fg - m).exp()).ln();
        seg_cls += if is_m { lse - fg } else { lse - bg };
        if is_m {
            matched += 1;
            let t = mres.sigma[i];
            for k in 0..coords.ncols() {
                seg_reg += (coords[[i, k]] - target.coords[[t, k]]).abs();
            }
            let row = order_logits.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse_o = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            order += lse_o - row[target.orders[t]];
        }
    }
    seg_reg /= n as f64;
    seg_cls /= n as f64;
    order /= matched.max(1) as f64;
    let total = cfg.alpha * (cfg.lambda1 * seg_reg + cfg.lambda2 * seg_cls) + cfg.beta * order;
    (total, seg_reg, seg_cls, order)
}

fn random_instance(
    rng: &mut rand_chacha::ChaCha8Rng,
    n: usize,
    m: usize,
    d: usize,
    n_order: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, TrainingTarget) {
    let coords = Array2::from_shape_fn((n, d), |_| rng.random_range(0.0..1.0));
    let scores = Array2::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
    let orders_logits = Array2::from_shape_fn((n, n_order), |_| rng.random_range(-2.0..2.0));
    let t_coords = Array2::from_shape_fn((m, d), |_| rng.random_range(0.0..1.0));
    let t_orders: Vec<usize> = (0..m).map(|_| rng.random_range(0..n_order)).collect();
    (coords, scores, orders_logits, TrainingTarget { coords: t_coords, orders: t_orders })
}

#[test]
fn loss_formulas_match_direct_recomputation() {
    let cfg = TrainConfig::default();
    let dummy = Model::new(common::tiny_model_cfg(PrimitiveKind::Vertex), 0).unwrap();
    let mut rng = common::rng(12);
    for trial in 0..100 {
        let n = rng.random_range(3..=10);
        let m = rng.random_range(1..=n);
        let d = 2 * (1 + (trial % 3));
        let (coords, scores, orders, target) = random_instance(&mut rng, n, m, d, 36);

        let probs: Vec<f64> = (0..n)
            .map(|i| {
                let (bg, fg) = (scores[[i, 0]], scores[[i, 1]]);
                let mx = bg.max(fg);
                (fg - mx).exp() / ((bg - mx).exp() + (fg - mx).exp())
            })
            .collect();
        let cost = matching_cost(&coords, &probs, &target.coords, cfg.lambda1, cfg.lambda2).unwrap();
        // Element-wise hand formula for the cost grid.
        for i in 0..n {
            for j in 0..m {
                let mut l1 = 0.0;
                for k in 0..d {
                    l1 += (coords[[i, k]] - target.coords[[j, k]]).abs();
                }
                let want = cfg.lambda1 * l1 - cfg.lambda2 * probs[i];
                assert!((cost[[i, j]] - want).abs() <= 1e-9 * want.abs().max(1.0));
            }
        }
        let mres = hungarian(&cost).unwrap();

        let mut tape = Tape::new(&dummy.params);
        let coords_v = tape.constant2(coords.clone());
        let scores_v = tape.constant2(scores.clone());
        let orders_v = tape.constant2(orders.clone());
        let fwd = p2p_core::model::RoiForward {
            coords: coords_v,
            q_prim: coords_v,
            score_logits: scores_v,
            order_logits: orders_v,
            ca_probs: vec![],
        };
        let (_, report) = losses_with_match(&mut tape, &fwd, &target, &mres, &cfg).unwrap();
        let (total, seg_reg, seg_cls, order) =
            recompute_losses(&coords, &scores, &orders, &target, &mres, &cfg);
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
        assert!(rel(report.seg_reg, seg_reg) <= 1e-9, "seg_reg trial {trial}");
        assert!(rel(report.seg_cls, seg_cls) <= 1e-9, "seg_cls trial {trial}");
        assert!(rel(report.order, order) <= 1e-9, "order trial {trial}");
        assert!(rel(report.total, total) <= 1e-9, "total trial {trial}");
        // total = lambda1*reg + lambda2*cls + beta*order with alpha folded in.
        let explicit = cfg.lambda1 * report.seg_reg + cfg.lambda2 * report.seg_cls
            + cfg.beta * report.order;
        assert!(rel(report.total, explicit) <= 1e-12);
    }
}

#[test]
fn known_loss_values() {
    let cfg = TrainConfig::default();
    let dummy = Model::new(common::tiny_model_cfg(PrimitiveKind::Vertex), 0).unwrap();

    // Uniform score logits give ln 2; uniform order logits give ln 36.
    let n = 5;
    let coords = Array2::from_elem((n, 2), 0.5);
    let scores = Array2::zeros((n, 2));
    let orders = Array2::zeros((n, 36));
    let target = TrainingTarget {
        coords: Array2::from_elem((n, 2), 0.5),
        orders: vec![7; n],
    };
    let mres = MatchResult { sigma: (0..n).collect(), target_count: n };
    let mut tape = Tape::new(&dummy.params);
    let fwd = p2p_core::model::RoiForward {
        coords: tape.constant2(coords),
        q_prim: tape.constant2(Array2::zeros((n, 2))),
        score_logits: tape.constant2(scores),
        order_logits: tape.constant2(orders),
        ca_probs: vec![],
    };
    let (_, report) = losses_with_match(&mut tape, &fwd, &target, &mres, &cfg).unwrap();
    assert!(report.seg_reg.abs() < 1e-15, "perfect coordinates give zero reg");
    assert!((report.seg_cls - (2.0f64).ln()).abs() < 1e-12);
    assert!((report.order - (36.0f64).ln()).abs() < 1e-12);
    // Fixed arithmetic: 5*0.1 + 1*0.2 + 0.1*1.0 = 0.8.
    let total = cfg.alpha * (cfg.lambda1 * 0.1 + cfg.lambda2 * 0.2) + cfg.beta * 1.0;
    assert!((total - 0.8).abs() < 1e-12);
}

#[test]
fn loss_invariant_under_target_permutation() {
    let cfg = TrainConfig::default();
    let model = Model::new(common::tiny_model_cfg(PrimitiveKind::Corner), 60).unwrap();
    let mut rng = common::rng(61);
    let n = model.cfg.queries;
    let (coords, scores, orders, target) = random_instance(&mut rng, n, 3, 6, 36);

    let eval_with_targets = |t: &TrainingTarget| -> train::LossReport {
        let probs: Vec<f64> = (0..n)
            .map(|i| {
                let (bg, fg) = (scores[[i, 0]], scores[[i, 1]]);
                let mx = bg.max(fg);
                (fg - mx).exp() / ((bg - mx).exp() + (fg - mx).exp())
            })
            .collect();
        let cost = matching_cost(&coords, &probs, &t.coords, cfg.lambda1, cfg.lambda2).unwrap();
        let mres = hungarian(&cost).unwrap();
        let mut tape = Tape::new(&model.params);
        let fwd = p2p_core::model::RoiForward {
            coords: tape.constant2(coords.clone()),
            q_prim: tape.constant2(coords.clone()),
            score_logits: tape.constant2(scores.clone()),
            order_logits: tape.constant2(orders.clone()),
            ca_probs: vec![],
        };
        let (_, report) = losses_with_match(&mut tape, &fwd, t, &mres, &cfg).unwrap();
        report
    };

    let base = eval_with_targets(&target);
    // Reverse the target order (a global permutation).
    let m = target.count();
    let permuted = TrainingTarget {
        coords: Array2::from_shape_fn((m, target.coords.ncols()), |(i, k)| {
            target.coords[[m - 1 - i, k]]
        }),
        orders: target.orders.iter().rev().copied().collect(),
    };
    let perm = eval_with_targets(&permuted);
    assert!((base.total - perm.total).abs() < 1e-9);
    assert!((base.seg_reg - perm.seg_reg).abs() < 1e-9);
    assert!((base.seg_cls - perm.seg_cls).abs() < 1e-9);
    assert!((base.order - perm.order).abs() < 1e-9);
}

#[test]
fn hungarian_equals_bruteforce_on_1000_grids() {
    let mut rng = common::rng(62);
    for _ in 0..1000 {
        let n = rng.random_range(1..=7);
        let m = rng.random_range(1..=n);
        let cost = Array2::from_shape_fn((n, m), |_| rng.random_range(-3.0..3.0));
        let got = hungarian(&cost).unwrap();
        let got_cost = train::assignment_cost(&cost, &got);
        // Exhaustive minimum over injective target->prediction maps.
        let mut best = f64::INFINITY;
        let mut preds: Vec<usize> = (0..n).collect();
        permute(&mut preds, 0, &mut |perm| {
            let c: f64 = (0..m).map(|j| cost[[perm[j], j]]).sum();
            if c < best {
                best = c;
            }
        });
        assert!((got_cost - best).abs() < 1e-9);

        // Optimality certificate: no single swap improves the total.
        for a in 0..n {
            for b in (a + 1)..n {
                let mut swapped = got.sigma.clone();
                swapped.swap(a, b);
                let cost_of = |sig: &[usize]| -> f64 {
                    sig.iter()
                        .enumerate()
                        .filter(|(_, &s)| s < m)
                        .map(|(i, &s)| cost[[i, s]])
                        .sum()
                };
                assert!(cost_of(&swapped) >= got_cost - 1e-9);
            }
        }
    }
}

#[test]
fn m_greater_than_n_truncates() {
    let cost = Array2::from_shape_fn((2, 5), |(i, j)| (i + j) as f64);
    let m = hungarian(&cost).unwrap();
    assert_eq!(m.target_count, 2);
    assert_eq!(m.matched_count(), 2);
}

fn permute(items: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == items.len() {
        f(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permute(items, k + 1, f);
        items.swap(k, i);
    }
}

fn tiny_overfit_batch(model: &Model) -> Vec<TrainSample> {
    let ring = p2p_core::geom::normalize_ring(&[
        p2p_core::geom::Point2::new(8.0, 7.0),
        p2p_core::geom::Point2::new(24.0, 7.0),
        p2p_core::geom::Point2::new(24.0, 24.0),
        p2p_core::geom::Point2::new(8.0, 24.0),
    ])
    .unwrap();
    let mask = p2p_core::eval::rasterize(&ring, 32, 32);
    let image = Array2::from_shape_fn((32, 32), |(y, x)| {
        if mask.data[y * 32 + x] {
            0.8
        } else {
            0.2
        }
    });
    let ann = p2p_core::data::Annotation::from_ring(ring);
    let roi = p2p_core::data::make_roi(&ann.bbox, 1.1, None, 32.0, 32.0).unwrap();
    let target =
        p2p_core::data::make_targets(&ann, &roi, model.cfg.kind, model.cfg.order_classes).unwrap();
    vec![TrainSample { image, buildings: vec![(roi, target)] }]
}

#[test]
fn overfitting_a_single_batch_halves_the_loss() {
    let mut model = Model::new(common::tiny_model_cfg(PrimitiveKind::Corner), 70).unwrap();
    let mut opt = AdamW::new(&model.params, AdamWConfig::default());
    let cfg = TrainConfig { lr: 1e-3, ..Default::default() };
    let batch = tiny_overfit_batch(&model);
    let first = train_step(&mut model, &mut opt, &batch, &cfg, cfg.lr).unwrap();
    let mut last = first;
    for _ in 0..199 {
        last = train_step(&mut model, &mut opt, &batch, &cfg, cfg.lr).unwrap();
    }
    assert!(
        last.total <= 0.5 * first.total,
        "loss {} -> {} did not halve",
        first.total,
        last.total
    );
}

#[test]
fn zero_lr_keeps_parameters() {
    let mut model = Model::new(common::tiny_model_cfg(PrimitiveKind::Corner), 71).unwrap();
    let before: Vec<_> =
        model.params.ids().map(|id| model.params.value(id).clone()).collect();
    let mut opt = AdamW::new(
        &model.params,
        AdamWConfig { weight_decay: 0.0, ..Default::default() },
    );
    let cfg = TrainConfig::default();
    let batch = tiny_overfit_batch(&model);
    train_step(&mut model, &mut opt, &batch, &cfg, 0.0).unwrap();
    for (id, b) in model.params.ids().zip(&before) {
        assert_eq!(model.params.value(id), b);
    }
    assert!(opt.m.iter().any(|m| m.iter().any(|&v| v != 0.0)));
}

#[test]
fn train_step_is_deterministic() {
    let run = || -> Vec<f64> {
        let mut model = Model::new(common::tiny_model_cfg(PrimitiveKind::Corner), 72).unwrap();
        let mut opt = AdamW::new(&model.params, AdamWConfig::default());
        let cfg = TrainConfig::default();
        let batch = tiny_overfit_batch(&model);
        let mut losses = Vec::new();
        for _ in 0..3 {
            losses.push(train_step(&mut model, &mut opt, &batch, &cfg, cfg.lr).unwrap().total);
        }
        losses
    };
    assert_eq!(run(), run());
}
