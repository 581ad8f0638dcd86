mod common;

use common::*;
use moe_laplace::curvature::ExpertId;
use moe_laplace::linalg::Matrix;
use moe_laplace::model::{forward, top_k_gate, Activation, MoEConfig, MoEModel, ParamGroup};
use moe_laplace::predictive::{expert_jacobians, linearized_logits, linearized_mean};
use moe_laplace_oracle::straight_line_forward;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn every_group_matches_finite_differences() {
    for (i, cfg) in gradient_configs().into_iter().enumerate() {
        let m = model(cfg.clone());
        let batch = dataset(6, cfg.d_input, cfg.num_classes, 100 + i as u64);
        let errs = gradient_check(&m, &batch, 0.1, 1e-5);
        let groups: Vec<ParamGroup> = errs.iter().map(|e| e.0).collect();
        for g in [
            ParamGroup::Encoder,
            ParamGroup::Gate,
            ParamGroup::ExpertW1,
            ParamGroup::ExpertW2,
            ParamGroup::Head,
        ] {
            assert!(groups.contains(&g), "config {i} lacks {g:?}");
        }
        for (g, e) in errs {
            assert!(e <= 1e-5, "config {i}, {g:?}: relative error {e:e}");
        }
    }
}

fn sweep() -> Vec<MoEConfig> {
    let mut out = Vec::new();
    for (ai, act) in [Activation::Relu, Activation::Gelu, Activation::Silu]
        .into_iter()
        .enumerate()
    {
        for (li, (l, e, k)) in [(1, 1, 1), (2, 4, 2), (3, 5, 3)].into_iter().enumerate() {
            for (ri, (residual, d_model, d_ff)) in [(true, 4, 6), (false, 3, 5), (true, 8, 16)].into_iter().enumerate()
            {
                out.push(MoEConfig {
                    num_layers: l,
                    num_experts: e,
                    top_k: k,
                    d_input: 3,
                    d_model,
                    d_ff,
                    num_classes: 3,
                    activation: act,
                    residual,
                    seed: (ai * 9 + li * 3 + ri) as u64,
                });
            }
        }
    }
    out
}

#[test]
fn forward_agrees_with_straight_line_oracle() {
    let configs = sweep();
    assert_eq!(configs.len(), 27);
    let mut r = rng(77);
    for cfg in configs {
        let m = model(cfg.clone());
        for _ in 0..5 {
            let x: Vec<f64> = (0..cfg.d_input).map(|_| r.random_range(-2.0..2.0)).collect();
            let ours = forward(&m, &x, false).unwrap().0;
            let theirs = straight_line_forward(&m, &x).unwrap();
            for (a, b) in ours.iter().zip(&theirs) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{cfg:?}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn reference_configuration_agrees_with_oracle() {
    let cfg = MoEConfig {
        num_layers: 2,
        num_experts: 4,
        top_k: 2,
        d_input: 5,
        d_model: 8,
        d_ff: 16,
        num_classes: 3,
        activation: Activation::Gelu,
        residual: true,
        seed: 9,
    };
    let m = model(cfg);
    let x = [0.3, -1.0, 0.7, 2.0, -0.4];
    let ours = forward(&m, &x, false).unwrap().0;
    let theirs = straight_line_forward(&m, &x).unwrap();
    for (a, b) in ours.iter().zip(&theirs) {
        assert!((a - b).abs() <= 1e-12);
    }
    let zero = MoEModel::zeros(m.config().clone()).unwrap();
    assert!(straight_line_forward(&zero, &x).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn expert_jacobians_match_finite_differences() {
    let cfg = small_config(31);
    let m = model(cfg.clone());
    let x = [0.4, -0.9, 1.3];
    let (_, trace) = forward(&m, &x, true).unwrap();
    let jac = expert_jacobians(&m, &trace.unwrap()).unwrap();
    assert_eq!(jac.len(), cfg.num_layers * cfg.top_k);
    let h = 1e-5;
    for j in &jac {
        let (rows, cols) = (cfg.d_model, cfg.d_ff);
        for i in 0..cfg.num_classes {
            let mut diff = 0.0;
            let mut norm = 0.0;
            for p in 0..rows {
                for q in 0..cols {
                    let f = |delta: f64| {
                        let mut m2 = m.clone();
                        let w2 = &mut m2.expert_mut(j.id.layer, j.id.expert).w2;
                        w2.set(p, q, w2.get(p, q) + delta);
                        forward(&m2, &x, false).unwrap().0[i]
                    };
                    let fd = (f(h) - f(-h)) / (2.0 * h);
                    diff += (fd - j.g[i].get(p, q)).powi(2);
                    norm += fd * fd;
                }
            }
            assert!(diff.sqrt() <= 1e-5 * norm.sqrt().max(1e-12), "{} class {i}", j.id);
        }
    }
}

#[test]
fn zero_head_gives_zero_jacobians() {
    let mut m = model(small_config(5));
    m.head_mut().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let (_, trace) = forward(&m, &[1.0, 0.5, -0.5], true).unwrap();
    for j in expert_jacobians(&m, &trace.unwrap()).unwrap() {
        assert!(j.g.iter().all(|g| g.data().iter().all(|v| *v == 0.0)));
    }
}

#[test]
fn linearization_error_is_second_order() {
    let cfg = MoEConfig {
        num_layers: 3,
        num_experts: 2,
        top_k: 2,
        ..small_config(41)
    };
    let m = model(cfg.clone());
    let x = [0.8, -0.3, 0.6];
    let (_, trace) = forward(&m, &x, true).unwrap();
    let jac = expert_jacobians(&m, &trace.unwrap()).unwrap();
    let mean = linearized_mean(&m, &x).unwrap();
    assert_eq!(mean, forward(&m, &x, false).unwrap().0);
    let mut r = rng(8);
    let base: Vec<(ExpertId, Matrix)> = jac
        .iter()
        .map(|j| (j.id, gaussian(cfg.d_model, cfg.d_ff, &mut r).scaled(0.05)))
        .collect();
    let err = |scale: f64| {
        let deltas: Vec<(ExpertId, Matrix)> = base.iter().map(|(id, d)| (*id, d.scaled(scale))).collect();
        let mut m2 = m.clone();
        for (id, d) in &deltas {
            let w2 = &mut m2.expert_mut(id.layer, id.expert).w2;
            *w2 = w2.add(d).unwrap();
        }
        let exact = forward(&m2, &x, false).unwrap().0;
        let lin = linearized_logits(&mean, &jac, &deltas);
        exact.iter().zip(&lin).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let (e1, e2, e3) = (err(1.0), err(0.5), err(0.25));
    assert!(e1 > 1e-9, "perturbation too small to measure: {e1}");
    for ratio in [e1 / e2, e2 / e3] {
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio} (errors {e1}, {e2}, {e3})");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_weights_sum_to_one_and_shift_invariant(
        scores in proptest::collection::vec(-20.0f64..20.0, 1..9),
        k in 1usize..9,
        shift in -50.0f64..50.0,
    ) {
        let k = k.min(scores.len());
        let g = top_k_gate(&scores, k);
        prop_assert_eq!(g.routed.len(), k);
        let total: f64 = g.routed.iter().map(|&i| g.weights[i]).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        for (i, w) in g.weights.iter().enumerate() {
            if !g.routed.contains(&i) {
                prop_assert_eq!(*w, 0.0);
            }
        }
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let h = top_k_gate(&shifted, k);
        prop_assert_eq!(&g.routed, &h.routed);
        for (a, b) in g.weights.iter().zip(&h.weights) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn captured_forward_gives_identical_logits(seed in any::<u64>(), x in proptest::collection::vec(-3.0f64..3.0, 3)) {
        let m = model(small_config(seed));
        let (a, t) = forward(&m, &x, true).unwrap();
        let (b, _) = forward(&m, &x, false).unwrap();
        prop_assert_eq!(&a, &b);
        for lt in &t.unwrap().layers {
            let s: f64 = lt.gate.routed.iter().map(|&i| lt.gate.weights[i]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}
