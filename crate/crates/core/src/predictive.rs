//! Linearized predictive distribution and Monte-Carlo class probabilities.
//!
//! For a test input the logits are Gaussian with mean `f_MAP(x)` and
//! covariance `Λ_ij = Σ_e vec(G_i)ᵀ H_e⁻¹ vec(G_j)`, where `G_i` is the
//! gradient of logit `i` w.r.t. the expert's `W₂`. `H_e⁻¹` is applied through
//! the Woodbury identity:
//!
//! `Λ_ij = σ²⟨G_i, G_j⟩ − σ⁴ vᵢᵀ M⁻¹ v_j`, `v = vec(L_gᵀ G L_a)`,
//! `M = I + σ² (C_a ⊗ C_g)`,
//!
//! and `M` is diagonal in the eigenbases of the factors, so the correction is
//! a weighted inner product of `w_i = P_gᵀ G_i P_a`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::curvature::ExpertId;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::laplace::LaplacePosterior;
use crate::linalg::{cholesky, Matrix};
use crate::model::{expert_output_grads, forward, softmax, ForwardTrace, MoEModel};
use crate::parallel::map_indexed;
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { samples: 1024, seed: 0 }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config("mc.samples", "must be >= 1"));
        }
        Ok(())
    }

    /// Per-example stream so predictions do not depend on evaluation order.
    pub fn for_example(&self, example: usize) -> McConfig {
        McConfig {
            samples: self.samples,
            seed: derive_seed(self.seed, &[example as u64]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveDistribution {
    pub mean_logits: Vec<f64>,
    pub covariance: Matrix,
    pub chol: Option<Matrix>,
}

impl PredictiveDistribution {
    pub fn new(mean_logits: Vec<f64>, covariance: Matrix) -> Result<Self> {
        let k = mean_logits.len();
        if covariance.shape() != (k, k) {
            return Err(Error::Shape {
                op: "PredictiveDistribution",
                expected: (k, k),
                got: covariance.shape(),
            });
        }
        Ok(Self {
            mean_logits,
            covariance: covariance.symmetrized(),
            chol: None,
        })
    }

    /// Factorizes the covariance (jitter ladder on failure). A zero
    /// covariance gets a zero factor.
    pub fn factorize(&mut self) -> Result<&Matrix> {
        if self.chol.is_none() {
            let l = if self.covariance.data().iter().all(|v| *v == 0.0) {
                self.covariance.clone()
            } else {
                cholesky(&self.covariance)?.l
            };
            self.chol = Some(l);
        }
        Ok(self.chol.as_ref().expect("just set"))
    }
}

/// Per-class `W₂` gradients of one routed expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertJacobian {
    pub id: ExpertId,
    /// `G_i = ∂f_i/∂W₂`, one `d_out × d_in` matrix per class.
    pub g: Vec<Matrix>,
}

/// `G_i^{(e)} = (∂f_i/∂b_e) a_eᵀ` for every routed expert, one backward pass
/// per logit.
pub fn expert_jacobians(model: &MoEModel, trace: &ForwardTrace) -> Result<Vec<ExpertJacobian>> {
    let k = model.config().num_classes;
    let mut out: Vec<ExpertJacobian> = Vec::new();
    for (l, lt) in trace.layers.iter().enumerate() {
        for et in &lt.experts {
            out.push(ExpertJacobian {
                id: ExpertId::new(l, et.expert),
                g: Vec::with_capacity(k),
            });
        }
    }
    let mut e_i = vec![0.0; k];
    for i in 0..k {
        e_i.iter_mut().for_each(|v| *v = 0.0);
        e_i[i] = 1.0;
        let grads = expert_output_grads(model, trace, &e_i)?;
        let mut slot = 0;
        for (layer_grads, lt) in grads.iter().zip(&trace.layers) {
            for ((_, db), et) in layer_grads.iter().zip(&lt.experts) {
                let mut g = Matrix::zeros(db.len(), et.activation.len());
                g.add_outer(1.0, db, &et.activation);
                out[slot].g.push(g);
                slot += 1;
            }
        }
    }
    Ok(out)
}

/// The linearized mean at the expansion point is the MAP forward pass.
pub fn linearized_mean(model: &MoEModel, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward(model, x, false)?.0)
}

/// First-order logits `f_MAP + Σ_e ⟨G_i^{(e)}, ΔW_e⟩` for weight offsets on
/// some of the routed experts.
pub fn linearized_logits(mean: &[f64], jacobians: &[ExpertJacobian], deltas: &[(ExpertId, Matrix)]) -> Vec<f64> {
    let mut f = mean.to_vec();
    for (id, dw) in deltas {
        if let Some(j) = jacobians.iter().find(|j| j.id == *id) {
            for (fi, gi) in f.iter_mut().zip(&j.g) {
                *fi += gi.frobenius_inner(dw);
            }
        }
    }
    f
}

/// `λ`-independent pieces of `Λ` for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTerms {
    /// `Σ_e ⟨G_i, G_j⟩` over treated experts.
    gram: Matrix,
    /// Per treated expert: `w_i` flattened row-major (`r_g × r_a`), and the
    /// matching eigenvalue products `α_a β_b`.
    parts: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl CovarianceTerms {
    pub fn new(post: &LaplacePosterior, jacobians: &[ExpertJacobian], classes: usize) -> Result<Self> {
        let mut gram = Matrix::zeros(classes, classes);
        let mut parts = Vec::new();
        for j in jacobians {
            if !post.is_treated(&j.id) {
                continue;
            }
            if j.g.len() != classes {
                return Err(Error::Shape {
                    op: "predictive_covariance",
                    expected: (classes, 1),
                    got: (j.g.len(), 1),
                });
            }
            let spec = post
                .spectrum(&j.id)
                .ok_or_else(|| Error::Data(format!("no curvature for expert {}", j.id)))?;
            for a in 0..classes {
                for b in a..classes {
                    let v = gram.get(a, b) + j.g[a].frobenius_inner(&j.g[b]);
                    gram.set(a, b, v);
                    gram.set(b, a, v);
                }
            }
            if spec.a.eig.is_empty() || spec.g.eig.is_empty() {
                continue;
            }
            let mut ws = Vec::with_capacity(classes);
            for gi in &j.g {
                if gi.shape() != (spec.d_out, spec.d_in) {
                    return Err(Error::Shape {
                        op: "predictive_covariance",
                        expected: (spec.d_out, spec.d_in),
                        got: gi.shape(),
                    });
                }
                let w = spec.g.p.tmatmul(&gi.matmul(&spec.a.p)?)?;
                ws.push(w.into_data());
            }
            let mut mu = Vec::with_capacity(spec.g.eig.len() * spec.a.eig.len());
            for be in &spec.g.eig {
                for al in &spec.a.eig {
                    mu.push(al * be);
                }
            }
            parts.push((ws, mu));
        }
        Ok(Self { gram, parts })
    }

    pub fn covariance(&self, lambda: f64) -> Matrix {
        let s2 = 1.0 / lambda;
        let k = self.gram.rows();
        let mut out = self.gram.scaled(s2);
        for (ws, mu) in &self.parts {
            let inv: Vec<f64> = mu.iter().map(|m| 1.0 / (1.0 + s2 * m)).collect();
            for a in 0..k {
                for b in a..k {
                    let corr: f64 = ws[a].iter().zip(&ws[b]).zip(&inv).map(|((x, y), d)| x * y * d).sum();
                    let v = out.get(a, b) - s2 * s2 * corr;
                    out.set(a, b, v);
                    if a != b {
                        out.set(b, a, v);
                    }
                }
            }
        }
        out.symmetrized()
    }
}

/// `Λ` restricted to the treated experts among `jacobians`.
pub fn predictive_covariance(post: &LaplacePosterior, jacobians: &[ExpertJacobian]) -> Result<Matrix> {
    let classes = jacobians.first().map(|j| j.g.len()).unwrap_or(0);
    if classes == 0 {
        return Err(Error::Domain("no routed experts to build a covariance from".into()));
    }
    Ok(CovarianceTerms::new(post, jacobians, classes)?.covariance(post.lambda()))
}

/// `(1/S) Σ_s softmax(μ + L ξ_s)` with `ξ_s ~ N(0, I)` drawn from `cfg.seed`.
pub fn mc_predict(dist: &mut PredictiveDistribution, cfg: &McConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let k = dist.mean_logits.len();
    let mean = dist.mean_logits.clone();
    let l = dist.factorize()?;
    if l.data().iter().all(|v| *v == 0.0) {
        return Ok(softmax(&mean));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut acc = vec![0.0; k];
    let mut xi = vec![0.0; k];
    let mut z = vec![0.0; k];
    for _ in 0..cfg.samples {
        for v in xi.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        for i in 0..k {
            let row = l.row(i);
            z[i] = mean[i] + row[..=i].iter().zip(&xi).map(|(a, b)| a * b).sum::<f64>();
        }
        for (a, p) in acc.iter_mut().zip(softmax(&z)) {
            *a += p;
        }
    }
    let s = cfg.samples as f64;
    Ok(acc.into_iter().map(|v| v / s).collect())
}

/// MAP and Bayesian predictions for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean_logits: Vec<f64>,
    pub probs_map: Vec<f64>,
    pub probs_bayes: Vec<f64>,
}

/// Everything about one input that does not depend on `λ`.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub mean_logits: Vec<f64>,
    pub terms: CovarianceTerms,
}

pub fn prepare_example(model: &MoEModel, post: &LaplacePosterior, x: &[f64]) -> Result<PreparedExample> {
    let (mean_logits, trace) = forward(model, x, true)?;
    let jac = expert_jacobians(model, &trace.expect("captured"))?;
    let terms = CovarianceTerms::new(post, &jac, model.config().num_classes)?;
    Ok(PreparedExample { mean_logits, terms })
}

pub fn prepare_dataset(model: &MoEModel, post: &LaplacePosterior, data: &Dataset) -> Result<Vec<PreparedExample>> {
    data.validate(model.config().d_input, model.config().num_classes)?;
    map_indexed(data.len(), |i| prepare_example(model, post, &data.features[i]))
        .into_iter()
        .collect()
}

/// Prediction for a prepared input at prior precision `lambda`; `example`
/// selects the MC stream.
pub fn predict_prepared(p: &PreparedExample, lambda: f64, mc: &McConfig, example: usize) -> Result<Prediction> {
    let cov = p.terms.covariance(lambda);
    let mut dist = PredictiveDistribution::new(p.mean_logits.clone(), cov)?;
    let probs_bayes = mc_predict(&mut dist, &mc.for_example(example))?;
    Ok(Prediction {
        mean_logits: p.mean_logits.clone(),
        probs_map: softmax(&p.mean_logits),
        probs_bayes,
    })
}

pub fn predict_dataset(
    model: &MoEModel,
    post: &LaplacePosterior,
    data: &Dataset,
    mc: &McConfig,
) -> Result<Vec<Prediction>> {
    let prepared = prepare_dataset(model, post, data)?;
    predict_all(&prepared, post.lambda(), mc)
}

pub fn predict_all(prepared: &[PreparedExample], lambda: f64, mc: &McConfig) -> Result<Vec<Prediction>> {
    map_indexed(prepared.len(), |i| predict_prepared(&prepared[i], lambda, mc, i))
        .into_iter()
        .collect()
}

/// Mean MC-predictive NLL of `labels` at `lambda`, for prior tuning.
pub fn validation_nll(prepared: &[PreparedExample], labels: &[usize], lambda: f64, mc: &McConfig) -> Result<f64> {
    let preds = predict_all(prepared, lambda, mc)?;
    let probs: Vec<Vec<f64>> = preds.into_iter().map(|p| p.probs_bayes).collect();
    crate::calibration::nll(&probs, labels)
}
