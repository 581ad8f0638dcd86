use moe_laplace_demo::{log_grid, DemoModel};

fn demo() -> DemoModel {
    DemoModel::new(1).unwrap()
}

#[test]
fn interactive_queries_are_consistent() {
    let d = demo();
    assert!(d.lambda() > 0.0);

    for layer in 0..d.num_layers() {
        let w = d.gate_weights(0.5, -1.0, layer).unwrap();
        assert_eq!(w.iter().filter(|v| **v > 0.0).count(), 2);
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    assert!(d.gate_weights(0.0, 0.0, d.num_layers()).is_err());

    // Far from the data the posterior should visibly soften the prediction,
    // and a huge prior precision should collapse it back to the MAP.
    let c = d.confidence_curve(12.0, -12.0, -4.0, 12.0, 17).unwrap();
    assert_eq!(c.lambdas.len(), 17);
    let last = *c.bayes_confidence.last().unwrap();
    assert!(
        (last - c.map_confidence).abs() <= 1e-3,
        "{last} vs {}",
        c.map_confidence
    );
    assert!(c.bayes_confidence[0] < c.map_confidence);

    let e = d.evidence_curve(30).unwrap();
    let best = e.evidence.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(e.evidence_star >= best - 1e-6, "{} < {best}", e.evidence_star);
    assert!((e.lambda_star - d.lambda()).abs() <= 1e-9 * d.lambda());

    let r = d.reliability(d.lambda(), 10).unwrap();
    let n: usize = r.map_bins.iter().map(|b| b.count).sum();
    assert_eq!(n, r.bayes_bins.iter().map(|b| b.count).sum::<usize>());
    assert!(n > 0);
    assert!((0.0..=1.0).contains(&r.map_ece) && (0.0..=1.0).contains(&r.bayes_ece));
    // Collapsed posterior: the two reliability diagrams nearly coincide.
    let tight = d.reliability(1e12, 10).unwrap();
    assert!((tight.map_ece - tight.bayes_ece).abs() <= 1e-3);
    assert_eq!(tight.map_ece, r.map_ece);

    let pts = d.test_points();
    assert!(!pts.is_empty() && pts.features.iter().all(|f| f.len() == 2));
}

#[test]
fn construction_is_deterministic() {
    let a = DemoModel::new(4).unwrap();
    let b = DemoModel::new(4).unwrap();
    assert_eq!(a.lambda(), b.lambda());
    let ca = serde_json::to_string(&a.confidence_curve(1.0, 1.0, -2.0, 2.0, 5).unwrap()).unwrap();
    let cb = serde_json::to_string(&b.confidence_curve(1.0, 1.0, -2.0, 2.0, 5).unwrap()).unwrap();
    assert_eq!(ca, cb);
}

#[test]
fn grid_endpoints() {
    let g = log_grid(-2.0, 3.0, 6);
    assert!((g[0] - 0.01).abs() < 1e-15 && (g[5] - 1000.0).abs() < 1e-9);
    assert_eq!(log_grid(0.0, 1.0, 1).len(), 2);
}
