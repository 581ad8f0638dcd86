//! Laplace posterior over the `W₂` of the treated experts.
//!
//! The precision of expert `e` is `H = (L_a ⊗ L_g)(L_a ⊗ L_g)ᵀ + λI` with a
//! single prior precision `λ` shared by all experts (`σ² = 1/λ`). Everything
//! is evaluated in the eigenbases of `L_a L_aᵀ` and `L_g L_gᵀ`: with
//! `α`, `β` the eigenvalues of the two factors, the low-rank part of `H` has
//! eigenvalues `α_a β_b` and the rest of the spectrum is `λ`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::curvature::{CurvatureSet, ExpertCurvature, ExpertId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{svd, LowRankFactor, Matrix};
use crate::model::{log_softmax, logits, MoEModel};

/// Eigen-decomposition of `L Lᵀ` kept as `P = U·S` and `s²`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSpectrum {
    /// `dim × k`; `P Pᵀ = L Lᵀ`, columns orthogonal.
    pub p: Matrix,
    /// Eigenvalues of `L Lᵀ` (squared singular values), descending, nonzero.
    pub eig: Vec<f64>,
}

impl FactorSpectrum {
    pub fn of(f: &LowRankFactor) -> Result<Self> {
        if f.rank() == 0 || f.is_zero() {
            return Ok(Self {
                p: Matrix::zeros(f.dim(), 0),
                eig: Vec::new(),
            });
        }
        let dec = svd(&f.factor)?;
        let k = dec.s.iter().take_while(|s| **s > 0.0).count();
        let mut p = dec.u.leading_columns(k);
        for i in 0..p.rows() {
            for j in 0..k {
                let v = p.get(i, j) * dec.s[j];
                p.set(i, j, v);
            }
        }
        Ok(Self {
            p,
            eig: dec.s[..k].iter().map(|s| s * s).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSpectrum {
    pub d_in: usize,
    pub d_out: usize,
    pub a: FactorSpectrum,
    pub g: FactorSpectrum,
}

impl ExpertSpectrum {
    pub fn of(c: &ExpertCurvature) -> Result<Self> {
        Ok(Self {
            d_in: c.d_in(),
            d_out: c.d_out(),
            a: FactorSpectrum::of(&c.la)?,
            g: FactorSpectrum::of(&c.lg)?,
        })
    }

    /// Nonzero eigenvalues `α_a β_b` of the low-rank part of `H`.
    pub fn products(&self) -> impl Iterator<Item = f64> + '_ {
        self.a
            .eig
            .iter()
            .flat_map(move |&al| self.g.eig.iter().map(move |&be| al * be))
    }

    pub fn logdet_precision(&self, lambda: f64) -> Result<f64> {
        check_lambda(lambda)?;
        let d = (self.d_in * self.d_out) as f64;
        let bump: f64 = self.products().map(|mu| (mu / lambda).ln_1p()).sum();
        Ok(d * lambda.ln() + bump)
    }

    /// `d/dν logdet H` with `ν = log λ`.
    fn dlogdet_dnu(&self, lambda: f64) -> f64 {
        let d = (self.d_in * self.d_out) as f64;
        d - self.products().map(|mu| mu / (lambda + mu)).sum::<f64>()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Domain(format!(
            "prior precision must be positive and finite, got {lambda}"
        )));
    }
    Ok(())
}

/// `log det((L_a ⊗ L_g)(L_a ⊗ L_g)ᵀ + λI)` via the eigenvalues of the
/// `r × r` Gram matrices.
pub fn logdet_precision(c: &ExpertCurvature, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    ExpertSpectrum::of(c)?.logdet_precision(lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceSign {
    /// `+½ log|Σ| = −½ log|H|`.
    Sigma,
    /// `+½ log|H|`, which makes the evidence a proper function of `λ` with
    /// an interior maximum.
    H,
}

impl EvidenceSign {
    fn factor(self) -> f64 {
        match self {
            EvidenceSign::Sigma => -1.0,
            EvidenceSign::H => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PosteriorRepr {
    map_weights: BTreeMap<ExpertId, Matrix>,
    curvature: CurvatureSet,
    lambda: f64,
    treated: BTreeSet<ExpertId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PosteriorRepr", into = "PosteriorRepr")]
pub struct LaplacePosterior {
    map_weights: BTreeMap<ExpertId, Matrix>,
    curvature: CurvatureSet,
    lambda: f64,
    treated: BTreeSet<ExpertId>,
    spectra: BTreeMap<ExpertId, ExpertSpectrum>,
}

impl TryFrom<PosteriorRepr> for LaplacePosterior {
    type Error = Error;

    fn try_from(r: PosteriorRepr) -> Result<Self> {
        Self::from_parts(r.map_weights, r.curvature, r.lambda, r.treated)
    }
}

impl From<LaplacePosterior> for PosteriorRepr {
    fn from(p: LaplacePosterior) -> Self {
        Self {
            map_weights: p.map_weights,
            curvature: p.curvature,
            lambda: p.lambda,
            treated: p.treated,
        }
    }
}

impl LaplacePosterior {
    /// Posterior around `model` (assumed at its MAP point). `treated` defaults
    /// to every expert the curvature covers.
    pub fn new(
        model: &MoEModel,
        curvature: CurvatureSet,
        lambda: f64,
        treated: Option<BTreeSet<ExpertId>>,
    ) -> Result<Self> {
        let fp = model.fingerprint();
        if curvature.source != fp {
            return Err(Error::Provenance {
                expected: fp,
                found: curvature.source,
            });
        }
        let map_weights = curvature
            .experts
            .keys()
            .map(|id| (*id, model.expert(id.layer, id.expert).w2.clone()))
            .collect();
        let treated = treated.unwrap_or_else(|| curvature.ids());
        Self::from_parts(map_weights, curvature, lambda, treated)
    }

    pub fn from_parts(
        map_weights: BTreeMap<ExpertId, Matrix>,
        curvature: CurvatureSet,
        lambda: f64,
        treated: BTreeSet<ExpertId>,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        let mut spectra = BTreeMap::new();
        for (id, c) in &curvature.experts {
            let w = map_weights
                .get(id)
                .ok_or_else(|| Error::Data(format!("no MAP weights for expert {id}")))?;
            if w.shape() != (c.d_out(), c.d_in()) {
                return Err(Error::Shape {
                    op: "LaplacePosterior",
                    expected: (c.d_out(), c.d_in()),
                    got: w.shape(),
                });
            }
            spectra.insert(*id, ExpertSpectrum::of(c)?);
        }
        if let Some(id) = treated.iter().find(|id| !curvature.experts.contains_key(id)) {
            return Err(Error::Data(format!("treated expert {id} has no curvature")));
        }
        Ok(Self {
            map_weights,
            curvature,
            lambda,
            treated,
            spectra,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sigma2(&self) -> f64 {
        1.0 / self.lambda
    }

    pub fn treated(&self) -> &BTreeSet<ExpertId> {
        &self.treated
    }

    pub fn curvature(&self) -> &CurvatureSet {
        &self.curvature
    }

    pub fn map_weights(&self) -> &BTreeMap<ExpertId, Matrix> {
        &self.map_weights
    }

    pub fn spectrum(&self, id: &ExpertId) -> Option<&ExpertSpectrum> {
        self.spectra.get(id)
    }

    pub fn is_treated(&self, id: &ExpertId) -> bool {
        self.treated.contains(id)
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        check_lambda(lambda)?;
        self.lambda = lambda;
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let mut p = self.clone();
        p.set_lambda(lambda)?;
        Ok(p)
    }

    pub fn with_treated(&self, treated: BTreeSet<ExpertId>) -> Result<Self> {
        if let Some(id) = treated.iter().find(|id| !self.curvature.experts.contains_key(id)) {
            return Err(Error::Data(format!("treated expert {id} has no curvature")));
        }
        let mut p = self.clone();
        p.treated = treated;
        Ok(p)
    }

    /// `Σ_treated ‖W_MAP‖²_F`.
    pub fn weight_sq_norm(&self) -> f64 {
        self.treated
            .iter()
            .map(|id| self.map_weights[id].frobenius_norm().powi(2))
            .sum()
    }

    fn treated_spectra(&self) -> impl Iterator<Item = (&ExpertId, &ExpertSpectrum)> {
        self.treated.iter().map(move |id| (id, &self.spectra[id]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub total: f64,
    /// `log det H` per treated expert.
    pub logdet_h: BTreeMap<ExpertId, f64>,
    /// `Σ log p(yᵢ | xᵢ)` at the MAP weights.
    pub map_fit: f64,
    /// `½ Σ (±log det H)` under the chosen sign.
    pub logdet_term: f64,
    /// `−½ λ Σ ‖W‖²`.
    pub prior_term: f64,
    pub lambda: f64,
    pub sign: EvidenceSign,
}

/// Data log-likelihood at the MAP weights.
pub fn map_log_likelihood(model: &MoEModel, data: &Dataset) -> Result<f64> {
    data.validate(model.config().d_input, model.config().num_classes)?;
    let mut s = 0.0;
    for (x, y) in data.features.iter().zip(&data.labels) {
        s += log_softmax(&logits(model, x)?)[*y];
    }
    Ok(s)
}

/// Evidence as a function of `λ` for fixed curvature and MAP fit.
#[derive(Debug, Clone)]
pub struct EvidenceObjective<'a> {
    post: &'a LaplacePosterior,
    map_fit: f64,
    w2: f64,
    sign: EvidenceSign,
}

impl<'a> EvidenceObjective<'a> {
    pub fn new(post: &'a LaplacePosterior, map_fit: f64, sign: EvidenceSign) -> Self {
        Self {
            post,
            map_fit,
            w2: post.weight_sq_norm(),
            sign,
        }
    }

    pub fn report(&self, lambda: f64) -> Result<EvidenceReport> {
        check_lambda(lambda)?;
        let mut logdet_h = BTreeMap::new();
        let mut sum = 0.0;
        for (id, s) in self.post.treated_spectra() {
            let v = s.logdet_precision(lambda)?;
            sum += v;
            logdet_h.insert(*id, v);
        }
        let logdet_term = 0.5 * self.sign.factor() * sum;
        let prior_term = -0.5 * lambda * self.w2;
        Ok(EvidenceReport {
            total: self.map_fit + logdet_term + prior_term,
            logdet_h,
            map_fit: self.map_fit,
            logdet_term,
            prior_term,
            lambda,
            sign: self.sign,
        })
    }

    pub fn value(&self, lambda: f64) -> Result<f64> {
        check_lambda(lambda)?;
        let mut sum = 0.0;
        for (_, s) in self.post.treated_spectra() {
            sum += s.logdet_precision(lambda)?;
        }
        Ok(self.map_fit + 0.5 * self.sign.factor() * sum - 0.5 * lambda * self.w2)
    }

    /// `d evidence / d log λ`.
    pub fn gradient(&self, lambda: f64) -> f64 {
        let d: f64 = self.post.treated_spectra().map(|(_, s)| s.dlogdet_dnu(lambda)).sum();
        0.5 * self.sign.factor() * d - 0.5 * lambda * self.w2
    }
}

/// `log p(y|X) ≈ Σ log p(yᵢ|xᵢ, θ_MAP) + ½ Σ_e (±log det H_e − λ‖W_e‖²)`.
pub fn evidence(
    model: &MoEModel,
    post: &LaplacePosterior,
    data: &Dataset,
    sign: EvidenceSign,
) -> Result<EvidenceReport> {
    if data.is_empty() {
        return Err(Error::Data("evidence needs a nonempty dataset".into()));
    }
    let fit = map_log_likelihood(model, data)?;
    EvidenceObjective::new(post, fit, sign).report(post.lambda)
}

/// Search range for the prior precision.
pub const LAMBDA_MIN: f64 = 1e-6;
pub const LAMBDA_MAX: f64 = 1e8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaTrajectory {
    pub lambda: f64,
    /// `λ` after each accepted step, starting with the initial value.
    pub lambdas: Vec<f64>,
    /// Evidence at each entry of `lambdas`.
    pub evidence: Vec<f64>,
    pub converged: bool,
}

/// Gradient ascent on the evidence in `ν = log λ`, starting at `post.lambda`.
/// A step that would lower the evidence is halved until it does not, so the
/// recorded trajectory is non-decreasing.
pub fn optimize_lambda_evidence(
    post: &LaplacePosterior,
    map_fit: f64,
    sign: EvidenceSign,
    eta: f64,
    steps: usize,
) -> Result<LambdaTrajectory> {
    if !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::Domain(format!("step size must be >= 0, got {eta}")));
    }
    let obj = EvidenceObjective::new(post, map_fit, sign);
    let (lo, hi) = (LAMBDA_MIN.ln(), LAMBDA_MAX.ln());
    let mut nu = post.lambda.ln().clamp(lo, hi);
    let mut value = obj.value(nu.exp())?;
    if !value.is_finite() {
        return Err(Error::NoConvergence {
            op: "optimize_lambda_evidence",
            iterations: 0,
        });
    }
    let mut out = LambdaTrajectory {
        lambda: nu.exp(),
        lambdas: vec![nu.exp()],
        evidence: vec![value],
        converged: eta == 0.0,
    };
    if eta == 0.0 {
        out.lambda = post.lambda;
        out.lambdas[0] = post.lambda;
        return Ok(out);
    }
    for _ in 0..steps {
        let g = obj.gradient(nu.exp());
        if !g.is_finite() {
            break;
        }
        let mut step = eta * g;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = (nu + step).clamp(lo, hi);
            if cand == nu {
                break;
            }
            let v = obj.value(cand.exp())?;
            if v.is_finite() && v >= value {
                accepted = Some((cand, v));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, v)) = accepted else {
            out.converged = true;
            break;
        };
        let moved = (cand - nu).abs();
        nu = cand;
        value = v;
        out.lambdas.push(nu.exp());
        out.evidence.push(value);
        if moved < 1e-12 || g.abs() < 1e-10 * (1.0 + value.abs()) {
            out.converged = true;
            break;
        }
    }
    out.lambda = nu.exp();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LpoConfig {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// Coarse log-spaced grid scanned before golden-section refinement.
    pub grid_points: usize,
    /// Final bracket width in `log λ`.
    pub tolerance: f64,
    /// Fewer validation examples than this marks the result low-confidence.
    pub min_examples: usize,
}

impl Default for LpoConfig {
    fn default() -> Self {
        Self {
            lambda_min: 1e-4,
            lambda_max: 1e4,
            grid_points: 9,
            tolerance: 0.05,
            min_examples: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub lambda: f64,
    pub nll: f64,
    /// Every `(λ, NLL)` evaluated, in evaluation order.
    pub evaluations: Vec<(f64, f64)>,
    pub low_confidence: bool,
}

/// Minimizes a validation NLL over `log λ`: a coarse grid locates the basin,
/// then golden-section search narrows it to `cfg.tolerance`.
pub fn optimize_lambda_validation(
    cfg: &LpoConfig,
    val_examples: usize,
    mut nll: impl FnMut(f64) -> Result<f64>,
) -> Result<LambdaSearch> {
    check_lambda(cfg.lambda_min)?;
    check_lambda(cfg.lambda_max)?;
    if cfg.lambda_max < cfg.lambda_min {
        return Err(Error::config("laplace.lpo.lambda_max", "must be >= lambda_min"));
    }
    let low_confidence = val_examples < cfg.min_examples;
    let mut evals: Vec<(f64, f64)> = Vec::new();
    let mut eval = |nu: f64, evals: &mut Vec<(f64, f64)>| -> Result<f64> {
        let lam = nu.exp();
        let v = nll(lam)?;
        let v = if v.is_nan() { f64::INFINITY } else { v };
        evals.push((lam, v));
        Ok(v)
    };
    let (lo, hi) = (cfg.lambda_min.ln(), cfg.lambda_max.ln());
    if hi - lo <= 0.0 {
        let v = eval(lo, &mut evals)?;
        return Ok(LambdaSearch {
            lambda: cfg.lambda_min,
            nll: v,
            evaluations: evals,
            low_confidence,
        });
    }
    let n = cfg.grid_points.max(3);
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let mut values = Vec::with_capacity(n);
    for &g in &grid {
        values.push(eval(g, &mut evals)?);
    }
    let best = (0..n)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)))
        .expect("grid nonempty");
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(n - 1)]);
    let (mut best_nu, mut best_v) = (grid[best], values[best]);

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = eval(c, &mut evals)?;
    let mut fd = eval(d, &mut evals)?;
    while b - a > cfg.tolerance.max(1e-12) {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = eval(c, &mut evals)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = eval(d, &mut evals)?;
        }
    }
    for (nu, v) in [(c, fc), (d, fd)] {
        if v < best_v {
            best_v = v;
            best_nu = nu;
        }
    }
    Ok(LambdaSearch {
        lambda: best_nu.exp(),
        nll: best_v,
        evaluations: evals,
        low_confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curvature::{CurvatureConfig, FisherMode};
    use crate::linalg::Matrix;

    fn curv(la: Matrix, lg: Matrix) -> ExpertCurvature {
        ExpertCurvature {
            id: ExpertId::new(0, 0),
            la: LowRankFactor::new(la),
            lg: LowRankFactor::new(lg),
            token_count: 1,
            mode: FisherMode::Empirical,
        }
    }

    fn posterior(c: ExpertCurvature, w: Matrix, lambda: f64) -> LaplacePosterior {
        let id = c.id;
        let set = CurvatureSet {
            experts: [(id, c)].into_iter().collect(),
            config: CurvatureConfig::default(),
            source: "test".into(),
            warnings: vec![],
        };
        LaplacePosterior::from_parts([(id, w)].into_iter().collect(), set, lambda, [id].into_iter().collect()).unwrap()
    }

    #[test]
    fn zero_factors_give_prior_logdet() {
        let c = ExpertCurvature::zeros(ExpertId::new(0, 0), 3, 2, FisherMode::Sampled);
        let v = logdet_precision(&c, 2.5).unwrap();
        assert!((v - 6.0 * 2.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn unit_bump_is_log_two() {
        let la = Matrix::from_rows(&[&[1.0], &[0.0]]);
        let lg = Matrix::from_rows(&[&[1.0], &[0.0]]);
        let v = logdet_precision(&curv(la, lg), 1.0).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn nonpositive_lambda_is_domain_error() {
        let c = ExpertCurvature::zeros(ExpertId::new(0, 0), 2, 2, FisherMode::Sampled);
        assert!(matches!(logdet_precision(&c, 0.0), Err(Error::Domain(_))));
        assert!(matches!(logdet_precision(&c, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_curvature_optimum_is_closed_form() {
        let c = ExpertCurvature::zeros(ExpertId::new(0, 0), 3, 2, FisherMode::Sampled);
        let w = Matrix::from_fn(2, 3, |i, j| 0.1 * (i + 2 * j + 1) as f64);
        let post = posterior(c, w.clone(), 1.0);
        let target = 6.0 / w.frobenius_norm().powi(2);
        let t = optimize_lambda_evidence(&post, -3.0, EvidenceSign::H, 0.1, 500).unwrap();
        assert!((t.lambda - target).abs() / target < 1e-6, "{} vs {target}", t.lambda);
        assert!(t.evidence.windows(2).all(|p| p[1] >= p[0]));
    }

    #[test]
    fn zero_eta_keeps_lambda() {
        let c = ExpertCurvature::zeros(ExpertId::new(0, 0), 3, 2, FisherMode::Sampled);
        let post = posterior(c, Matrix::identity(2).hcat(&Matrix::zeros(2, 1)).unwrap(), 0.7);
        let t = optimize_lambda_evidence(&post, 0.0, EvidenceSign::H, 0.0, 10).unwrap();
        assert_eq!(t.lambda, 0.7);
    }

    #[test]
    fn sigma_sign_is_decreasing_in_lambda() {
        let la = Matrix::from_rows(&[&[1.0], &[0.5]]);
        let lg = Matrix::from_rows(&[&[0.3], &[2.0]]);
        let post = posterior(curv(la, lg), Matrix::identity(2), 1.0);
        let obj = EvidenceObjective::new(&post, 0.0, EvidenceSign::Sigma);
        let mut prev = f64::INFINITY;
        for k in -6..=6 {
            let v = obj.value(10f64.powi(k)).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn golden_section_single_point_bracket() {
        let cfg = LpoConfig {
            lambda_min: 3.0,
            lambda_max: 3.0,
            ..LpoConfig::default()
        };
        let r = optimize_lambda_validation(&cfg, 1, Ok).unwrap();
        assert_eq!(r.lambda, 3.0);
        assert!(r.low_confidence);
    }

    #[test]
    fn golden_section_finds_convex_minimum() {
        let cfg = LpoConfig::default();
        let target = 0.37f64.ln();
        let r = optimize_lambda_validation(&cfg, 100, |l| Ok((l.ln() - target).powi(2) + 1.0)).unwrap();
        assert!((r.lambda.ln() - target).abs() <= cfg.tolerance);
        assert!(!r.low_confidence);
    }
}
