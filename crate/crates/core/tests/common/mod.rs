//! Shared helpers for the integration tests.
#![allow(dead_code)]

use moe_laplace::data::{Dataset, Split};
use moe_laplace::linalg::Matrix;
use moe_laplace::model::{Activation, MoEConfig, MoEModel};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::random_normal(rows, cols, rng)
}

pub fn to_na(m: &Matrix) -> DMatrix<f64> {
    moe_laplace_oracle::from_matrix(m)
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    (a - b).amax()
}

pub fn small_config(seed: u64) -> MoEConfig {
    MoEConfig {
        num_layers: 2,
        num_experts: 4,
        top_k: 2,
        d_input: 3,
        d_model: 4,
        d_ff: 5,
        num_classes: 3,
        activation: Activation::Gelu,
        residual: true,
        seed,
    }
}

pub fn model(cfg: MoEConfig) -> MoEModel {
    MoEModel::init(cfg).unwrap()
}

/// Random inputs with labels cycling over the classes.
pub fn dataset(n: usize, d_input: usize, classes: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let features = (0..n)
        .map(|_| (0..d_input).map(|_| r.random_range(-1.5..1.5)).collect())
        .collect();
    let labels = (0..n).map(|i| i % classes).collect();
    Dataset::new(features, labels, Split::Train).unwrap()
}

/// Per parameter group, `‖analytic − fd‖ / max(‖analytic‖, ‖fd‖)` for the
/// MAP objective on `batch`, with central differences of step `h`.
pub fn gradient_check(
    model: &MoEModel,
    batch: &Dataset,
    lambda: f64,
    h: f64,
) -> Vec<(moe_laplace::model::ParamGroup, f64)> {
    use moe_laplace::model::ParamGroup;
    use moe_laplace::train::{map_objective, FreezeFlags};
    let free = FreezeFlags::default();
    let (_, grad) = map_objective(model, batch, lambda, &free).unwrap();
    let mut analytic: Vec<(ParamGroup, Vec<f64>)> = Vec::new();
    grad.visit(|g, _, _, m| analytic.push((g, m.data().to_vec())));

    let mut sums: Vec<(ParamGroup, f64, f64, f64)> = Vec::new();
    for (t, (group, a)) in analytic.iter().enumerate() {
        for k in 0..a.len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut idx = 0;
                m.visit_params_mut(|_, _, _, p| {
                    if idx == t {
                        p[k] += delta;
                    }
                    idx += 1;
                });
                map_objective(&m, batch, lambda, &free).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let entry = match sums.iter_mut().find(|s| s.0 == *group) {
                Some(e) => e,
                None => {
                    sums.push((*group, 0.0, 0.0, 0.0));
                    sums.last_mut().unwrap()
                }
            };
            entry.1 += (a[k] - fd).powi(2);
            entry.2 += a[k] * a[k];
            entry.3 += fd * fd;
        }
    }
    sums.into_iter()
        .map(|(g, diff, a, f)| (g, diff.sqrt() / a.sqrt().max(f.sqrt()).max(1e-300)))
        .collect()
}

/// The three configurations used for gradient checks.
pub fn gradient_configs() -> Vec<MoEConfig> {
    vec![
        MoEConfig {
            activation: Activation::Gelu,
            ..small_config(1)
        },
        MoEConfig {
            num_layers: 3,
            num_experts: 5,
            top_k: 1,
            d_model: 3,
            d_ff: 4,
            activation: Activation::Silu,
            ..small_config(2)
        },
        MoEConfig {
            num_layers: 1,
            num_experts: 3,
            top_k: 2,
            residual: false,
            activation: Activation::Relu,
            ..small_config(3)
        },
    ]
}

use moe_laplace::curvature::{CurvatureConfig, CurvatureSet, ExpertCurvature, ExpertId, FisherMode};
use moe_laplace::laplace::LaplacePosterior;
use moe_laplace::linalg::LowRankFactor;

pub fn curvature(id: ExpertId, la: Matrix, lg: Matrix) -> ExpertCurvature {
    ExpertCurvature {
        id,
        la: LowRankFactor::new(la),
        lg: LowRankFactor::new(lg),
        token_count: 1,
        mode: FisherMode::Empirical,
    }
}

/// Random `d_in × r` and `d_out × r` factors.
pub fn random_curvature(id: ExpertId, d_in: usize, d_out: usize, r: usize, rng: &mut ChaCha8Rng) -> ExpertCurvature {
    curvature(id, gaussian(d_in, r, rng), gaussian(d_out, r, rng))
}

/// Posterior assembled from explicit blocks; every block is treated.
pub fn posterior_from(blocks: Vec<(ExpertCurvature, Matrix)>, lambda: f64) -> LaplacePosterior {
    let mut experts = std::collections::BTreeMap::new();
    let mut weights = std::collections::BTreeMap::new();
    for (c, w) in blocks {
        weights.insert(c.id, w);
        experts.insert(c.id, c);
    }
    let treated = experts.keys().copied().collect();
    let set = CurvatureSet {
        experts,
        config: CurvatureConfig::default(),
        source: "assembled".into(),
        warnings: vec![],
    };
    LaplacePosterior::from_parts(weights, set, lambda, treated).unwrap()
}

/// Dense `(L_a L_aᵀ) ⊗ (L_g L_gᵀ)` through the oracle.
pub fn dense_block(c: &ExpertCurvature) -> DMatrix<f64> {
    moe_laplace_oracle::dense_kfac(&to_na(&c.la.factor), &to_na(&c.lg.factor)).unwrap()
}
