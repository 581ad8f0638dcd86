//! Browser demo. A small mixture-of-experts classifier is trained on 2-D
//! shifted blobs when the page loads; the page then queries routing weights,
//! MAP vs Bayesian confidence as the prior precision varies, and evidence and
//! reliability curves.
//!
//! [`DemoModel`] holds the plain-Rust logic and is what the native tests
//! exercise. [`Demo`] is the thin `wasm-bindgen` wrapper that the page uses;
//! its results cross the boundary as JSON strings or `Float64Array`s.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use moe_laplace::calibration::{ece, ReliabilityBin};
use moe_laplace::config::ExperimentConfig;
use moe_laplace::data::{generate, Dataset, Generator, Split};
use moe_laplace::laplace::{
    map_log_likelihood, optimize_lambda_evidence, EvidenceObjective, EvidenceSign, LaplacePosterior,
};
use moe_laplace::model::{argmax, forward, softmax, MoEConfig, MoEModel};
use moe_laplace::pipeline::{fit_curvature, initial_posterior};
use moe_laplace::predictive::{predict_prepared, prepare_dataset, prepare_example, PreparedExample};
use moe_laplace::train::train;
use moe_laplace::{Error, Result};

/// Log-spaced grid over `[10^lo, 10^hi]`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let n = points.max(2);
    (0..n)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

fn demo_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    c.data.generator = Generator::ShiftedBlobs;
    c.data.dim = 2;
    c.data.n_train = 300;
    c.data.n_val = 0;
    c.data.n_test = 300;
    c.data.n_ood = 300;
    c.model = MoEConfig {
        num_layers: 2,
        num_experts: 4,
        top_k: 2,
        d_input: 2,
        d_model: 8,
        d_ff: 16,
        ..c.model
    };
    c.train.steps = 400;
    c.train.lr = 1e-2;
    c.mc.samples = 256;
    c.laplace.steps = 200;
    c.resolved()
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceCurve {
    pub lambdas: Vec<f64>,
    pub map_probs: Vec<f64>,
    pub map_confidence: f64,
    pub bayes_confidence: Vec<f64>,
    pub predicted_class: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvidenceCurve {
    pub lambdas: Vec<f64>,
    pub evidence: Vec<f64>,
    pub lambda_star: f64,
    pub evidence_star: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Reliability {
    pub lambda: f64,
    pub map_ece: f64,
    pub bayes_ece: f64,
    pub map_bins: Vec<ReliabilityBin>,
    pub bayes_bins: Vec<ReliabilityBin>,
}

pub struct DemoModel {
    cfg: ExperimentConfig,
    model: MoEModel,
    post: LaplacePosterior,
    map_fit: f64,
    test: Dataset,
    ood_prepared: Vec<PreparedExample>,
    ood_labels: Vec<usize>,
}

impl DemoModel {
    pub fn new(seed: u64) -> Result<Self> {
        let cfg = demo_config(seed);
        cfg.validate()?;
        let data = generate(&cfg.data)?;
        let get = |s: Split| {
            data.split(s)
                .cloned()
                .ok_or_else(|| Error::Data(format!("no {} split", s.name())))
        };
        let (tr, te, ood) = (get(Split::Train)?, get(Split::Test)?, get(Split::Ood)?);
        let init = MoEModel::init(cfg.model.clone())?;
        let empty = Dataset::new(Vec::new(), Vec::new(), Split::Val)?;
        let model = train(&init, &tr, &empty, &cfg.train)?.model;
        let curv = fit_curvature(&model, &tr, &cfg)?;
        let post = initial_posterior(&model, curv, &cfg)?;
        let map_fit = map_log_likelihood(&model, &tr)?;
        let ood_prepared = prepare_dataset(&model, &post, &ood)?;
        let mut demo = Self {
            cfg,
            model,
            post,
            map_fit,
            test: te,
            ood_prepared,
            ood_labels: ood.labels,
        };
        let star = demo.evidence_curve(2)?.lambda_star;
        demo.post.set_lambda(star)?;
        Ok(demo)
    }

    pub fn lambda(&self) -> f64 {
        self.post.lambda()
    }

    pub fn num_layers(&self) -> usize {
        self.model.config().num_layers
    }

    pub fn test_points(&self) -> &Dataset {
        &self.test
    }

    /// Gate weights over the experts of `layer` for input `(x, y)`.
    pub fn gate_weights(&self, x: f64, y: f64, layer: usize) -> Result<Vec<f64>> {
        let (_, trace) = forward(&self.model, &[x, y], true)?;
        let trace = trace.expect("trace requested");
        trace
            .layers
            .get(layer)
            .map(|l| l.gate.weights.clone())
            .ok_or_else(|| Error::Domain(format!("layer {layer} out of range")))
    }

    /// Top-class confidence of the MAP and Bayesian predictives at `(x, y)`
    /// over a log grid of prior precisions. The Bayesian curve follows the
    /// MAP's predicted class.
    pub fn confidence_curve(&self, x: f64, y: f64, lo: f64, hi: f64, points: usize) -> Result<ConfidenceCurve> {
        let p = prepare_example(&self.model, &self.post, &[x, y])?;
        let map_probs = softmax(&p.mean_logits);
        let cls = argmax(&map_probs);
        let lambdas = log_grid(lo, hi, points);
        let bayes_confidence = lambdas
            .iter()
            .map(|&l| predict_prepared(&p, l, &self.cfg.mc, 0).map(|pr| pr.probs_bayes[cls]))
            .collect::<Result<Vec<f64>>>()?;
        Ok(ConfidenceCurve {
            lambdas,
            map_confidence: map_probs[cls],
            map_probs,
            bayes_confidence,
            predicted_class: cls,
        })
    }

    /// Log evidence over `[1e-3, 1e4]` plus the optimizer's choice.
    pub fn evidence_curve(&self, points: usize) -> Result<EvidenceCurve> {
        let obj = EvidenceObjective::new(&self.post, self.map_fit, EvidenceSign::H);
        let lambdas = log_grid(-3.0, 4.0, points);
        let evidence = lambdas.iter().map(|&l| obj.value(l)).collect::<Result<Vec<f64>>>()?;
        let t = optimize_lambda_evidence(
            &self.post,
            self.map_fit,
            EvidenceSign::H,
            self.cfg.laplace.eta.max(0.05),
            self.cfg.laplace.steps,
        )?;
        Ok(EvidenceCurve {
            lambdas,
            evidence,
            lambda_star: t.lambda,
            evidence_star: obj.value(t.lambda)?,
        })
    }

    /// MAP and Bayesian reliability bins on the shifted split at `lambda`.
    pub fn reliability(&self, lambda: f64, num_bins: usize) -> Result<Reliability> {
        let mut map = Vec::with_capacity(self.ood_prepared.len());
        let mut bayes = Vec::with_capacity(self.ood_prepared.len());
        for (i, p) in self.ood_prepared.iter().enumerate() {
            let pr = predict_prepared(p, lambda, &self.cfg.mc, i)?;
            map.push(pr.probs_map);
            bayes.push(pr.probs_bayes);
        }
        let (map_ece, map_bins) = ece(&map, &self.ood_labels, num_bins)?;
        let (bayes_ece, bayes_bins) = ece(&bayes, &self.ood_labels, num_bins)?;
        Ok(Reliability {
            lambda,
            map_ece,
            bayes_ece,
            map_bins,
            bayes_bins,
        })
    }
}

fn js_err(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct Demo {
    inner: DemoModel,
}

#[wasm_bindgen]
impl Demo {
    /// Trains the demo model; takes a few seconds.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        DemoModel::new(u64::from(seed))
            .map(|inner| Demo { inner })
            .map_err(js_err)
    }

    pub fn lambda(&self) -> f64 {
        self.inner.lambda()
    }

    #[wasm_bindgen(js_name = numLayers)]
    pub fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }

    /// Test points as `[x0, y0, label0, x1, ...]`.
    #[wasm_bindgen(js_name = testPoints)]
    pub fn test_points(&self) -> Vec<f64> {
        let d = self.inner.test_points();
        d.features
            .iter()
            .zip(&d.labels)
            .flat_map(|(f, &y)| [f[0], f[1], y as f64])
            .collect()
    }

    #[wasm_bindgen(js_name = gateWeights)]
    pub fn gate_weights(&self, x: f64, y: f64, layer: usize) -> Result<Vec<f64>, JsError> {
        self.inner.gate_weights(x, y, layer).map_err(js_err)
    }

    #[wasm_bindgen(js_name = confidenceCurve)]
    pub fn confidence_curve(&self, x: f64, y: f64, lo: f64, hi: f64, points: usize) -> Result<String, JsError> {
        to_json(&self.inner.confidence_curve(x, y, lo, hi, points).map_err(js_err)?)
    }

    #[wasm_bindgen(js_name = evidenceCurve)]
    pub fn evidence_curve(&self, points: usize) -> Result<String, JsError> {
        to_json(&self.inner.evidence_curve(points).map_err(js_err)?)
    }

    pub fn reliability(&self, lambda: f64, num_bins: usize) -> Result<String, JsError> {
        to_json(&self.inner.reliability(lambda, num_bins).map_err(js_err)?)
    }
}
