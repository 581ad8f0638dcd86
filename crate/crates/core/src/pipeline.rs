//! Stage functions shared by the command-line tool, the reproduction runner
//! and the tests. Nothing here touches the filesystem.

use serde::{Deserialize, Serialize};

use crate::calibration::{dump_rows, CalibrationReport, DumpRow, Method};
use crate::config::{ExperimentConfig, LambdaMethod};
use crate::curvature::{accumulate, all_experts, CurvatureSet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::laplace::{
    evidence, map_log_likelihood, optimize_lambda_evidence, optimize_lambda_validation, EvidenceReport, LambdaSearch,
    LambdaTrajectory, LaplacePosterior,
};
use crate::model::MoEModel;
use crate::predictive::{predict_all, prepare_dataset, validation_nll};

/// How the prior precision was chosen, with the optimizer's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaChoice {
    pub method: LambdaMethod,
    pub lambda: f64,
    pub trajectory: Option<LambdaTrajectory>,
    pub search: Option<LambdaSearch>,
    pub evidence: Option<EvidenceReport>,
}

/// Curvature pass over the training split.
pub fn fit_curvature(model: &MoEModel, train: &Dataset, cfg: &ExperimentConfig) -> Result<CurvatureSet> {
    accumulate(model, train, &cfg.curvature(), None)
}

/// Posterior at `cfg.laplace.lambda0` over the configured treated set.
pub fn initial_posterior(
    model: &MoEModel,
    curvature: CurvatureSet,
    cfg: &ExperimentConfig,
) -> Result<LaplacePosterior> {
    let treated = cfg.laplace.treat.resolve(&all_experts(model));
    LaplacePosterior::new(model, curvature, cfg.laplace.lambda0, Some(treated))
}

/// Chooses `λ` for `post` and returns the tuned posterior.
pub fn choose_lambda(
    model: &MoEModel,
    post: &LaplacePosterior,
    train: &Dataset,
    val: &Dataset,
    cfg: &ExperimentConfig,
    method: LambdaMethod,
    fixed: Option<f64>,
) -> Result<(LaplacePosterior, LambdaChoice)> {
    let sign = cfg.laplace.evidence_sign;
    let mut choice = LambdaChoice {
        method,
        lambda: post.lambda(),
        trajectory: None,
        search: None,
        evidence: None,
    };
    match method {
        LambdaMethod::Fixed => {
            choice.lambda = fixed.unwrap_or(cfg.laplace.lambda0);
        }
        LambdaMethod::Evidence => {
            let fit = map_log_likelihood(model, train)?;
            let t = optimize_lambda_evidence(post, fit, sign, cfg.laplace.eta, cfg.laplace.steps)?;
            choice.lambda = t.lambda;
            choice.trajectory = Some(t);
        }
        LambdaMethod::Lpo => {
            if val.is_empty() {
                return Err(Error::Data("validation-NLL tuning needs a validation split".into()));
            }
            let prepared = prepare_dataset(model, post, val)?;
            let s = optimize_lambda_validation(&cfg.laplace.lpo, val.len(), |lam| {
                validation_nll(&prepared, &val.labels, lam, &cfg.mc)
            })?;
            choice.lambda = s.lambda;
            choice.search = Some(s);
        }
    }
    let tuned = post.with_lambda(choice.lambda)?;
    if !train.is_empty() {
        choice.evidence = Some(evidence(model, &tuned, train, sign)?);
    }
    Ok((tuned, choice))
}

/// MAP and Bayesian reports plus the prediction dump for one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub map: CalibrationReport,
    pub bayes: CalibrationReport,
    pub rows: Vec<DumpRow>,
}

pub fn evaluate_split(
    model: &MoEModel,
    post: &LaplacePosterior,
    data: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<SplitEvaluation> {
    if data.is_empty() {
        return Err(Error::Data(format!("{} split is empty", data.split.name())));
    }
    let prepared = prepare_dataset(model, post, data)?;
    let preds = predict_all(&prepared, post.lambda(), &cfg.mc)?;
    let rows = dump_rows(&preds, &data.labels);
    let name = data.split.name();
    let bins = cfg.eval.num_bins;
    let map_p: Vec<Vec<f64>> = preds.iter().map(|p| p.probs_map.clone()).collect();
    let bayes_p: Vec<Vec<f64>> = preds.into_iter().map(|p| p.probs_bayes).collect();
    Ok(SplitEvaluation {
        map: CalibrationReport::from_probs(&map_p, &data.labels, bins, Method::Map.name(), name)?,
        bayes: CalibrationReport::from_probs(&bayes_p, &data.labels, bins, Method::Bayes.name(), name)?,
        rows,
    })
}
