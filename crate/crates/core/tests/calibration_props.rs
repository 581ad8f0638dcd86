mod common;

use common::*;
use moe_laplace::calibration::{accuracy, ece, nll, quarter_ranges, run_ablation, AblationPlan};
use moe_laplace::curvature::{accumulate, CurvatureConfig};
use moe_laplace::laplace::LaplacePosterior;
use moe_laplace::model::MoEConfig;
use moe_laplace::predictive::{predict_dataset, McConfig};
use proptest::prelude::*;

fn confident(conf: f64, pred: usize, k: usize) -> Vec<f64> {
    let rest = (1.0 - conf) / (k - 1) as f64;
    (0..k).map(|i| if i == pred { conf } else { rest }).collect()
}

#[test]
fn calibrated_bins_have_zero_error() {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    // 9 of 10 right at 0.9, 6 of 10 right at 0.6, 7 of 20 right at 0.35.
    for (conf, n, right) in [(0.9, 10, 9), (0.6, 10, 6), (0.35, 20, 7)] {
        for i in 0..n {
            probs.push(confident(conf, 1, 4));
            labels.push(if i < right { 1 } else { 2 });
        }
    }
    let (e, bins) = ece(&probs, &labels, 10).unwrap();
    assert!(e <= 1e-12, "{e}");
    assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), probs.len());
    assert_eq!(bins.iter().filter(|b| b.count > 0).count(), 3);
}

#[test]
fn nll_decreases_as_true_class_gains_mass() {
    let mut prev = f64::INFINITY;
    for i in 1..=20 {
        let p = i as f64 / 20.0;
        let v = nll(&[vec![1.0 - p, p]], &[1]).unwrap();
        assert!(v < prev);
        prev = v;
    }
    assert_eq!(prev, 0.0);
}

#[test]
fn six_layer_quarters_and_ablation_rows() {
    assert_eq!(quarter_ranges(6), [0..1, 1..3, 3..4, 4..6]);
    let cfg = MoEConfig {
        num_layers: 6,
        num_experts: 3,
        top_k: 2,
        ..small_config(21)
    };
    let m = model(cfg.clone());
    let data = dataset(30, cfg.d_input, cfg.num_classes, 22);
    let curv = accumulate(&m, &data, &CurvatureConfig::default(), None).unwrap();
    let post = LaplacePosterior::new(&m, curv, 0.5, None).unwrap();
    let mc = McConfig { samples: 128, seed: 3 };
    let plan = AblationPlan {
        excluded: vec![0, 1, 2, 3],
        include_control: true,
    };
    let rows = run_ablation(&m, &post, &data, &plan, &mc, 10).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["control", "Q1", "Q2", "Q3", "Q4"]);
    let layers: Vec<_> = rows.iter().map(|r| r.excluded_layers).collect();
    assert_eq!(layers, [None, Some((1, 1)), Some((2, 3)), Some((4, 4)), Some((5, 6))]);
    let treated: Vec<usize> = rows.iter().map(|r| r.treated_experts).collect();
    assert_eq!(treated, [18, 15, 12, 15, 12]);

    let bayes: Vec<Vec<f64>> = predict_dataset(&m, &post, &data, &mc)
        .unwrap()
        .into_iter()
        .map(|p| p.probs_bayes)
        .collect();
    let control = &rows[0].report;
    assert_eq!(control.ece, ece(&bayes, &data.labels, 10).unwrap().0);
    assert_eq!(control.nll, nll(&bayes, &data.labels).unwrap());
    assert_eq!(control.accuracy, accuracy(&bayes, &data.labels));
}

#[test]
fn empty_quarter_reproduces_control() {
    // With two layers the first and third quarters hold no layers.
    let cfg = small_config(23);
    let m = model(cfg.clone());
    let data = dataset(20, cfg.d_input, cfg.num_classes, 24);
    let curv = accumulate(&m, &data, &CurvatureConfig::default(), None).unwrap();
    let post = LaplacePosterior::new(&m, curv, 0.5, None).unwrap();
    let plan = AblationPlan {
        excluded: vec![0, 2],
        include_control: true,
    };
    let rows = run_ablation(&m, &post, &data, &plan, &McConfig { samples: 64, seed: 1 }, 10).unwrap();
    assert_eq!(rows[1].report, rows[0].report);
    assert_eq!(rows[2].report, rows[0].report);
    assert_eq!(rows[1].excluded_layers, None);
    assert!(run_ablation(
        &m,
        &post,
        &data,
        &AblationPlan {
            excluded: vec![4],
            include_control: false
        },
        &McConfig::default(),
        10
    )
    .is_err());
}

fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.01f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ece_is_permutation_invariant_and_bounded(
        rows in proptest::collection::vec((simplex(3), 0usize..3), 1..60),
        bins in 1usize..20,
        rot in 0usize..60,
    ) {
        let probs: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let (e, b) = ece(&probs, &labels, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert_eq!(b.iter().map(|x| x.count).sum::<usize>(), probs.len());
        let mut perm: Vec<usize> = (0..probs.len()).collect();
        perm.rotate_left(rot % probs.len());
        perm.reverse();
        let p2: Vec<Vec<f64>> = perm.iter().map(|&i| probs[i].clone()).collect();
        let l2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let (e2, _) = ece(&p2, &l2, bins).unwrap();
        prop_assert!((e - e2).abs() <= 1e-12);
        let n = nll(&probs, &labels).unwrap();
        prop_assert!(n >= 0.0 && n.is_finite());
    }
}
