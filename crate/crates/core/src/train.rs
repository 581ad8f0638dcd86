//! MAP training: cross-entropy plus an L2 prior, Adam with the prior folded
//! into the gradient, and best-on-validation checkpoint selection.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, backward_into, forward, log_softmax, softmax, GradientSet, MoEModel, ParamGroup};
use crate::parallel::map_chunks;

/// Examples per deterministic reduction chunk.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Linear,
    Cosine,
}

impl Schedule {
    /// Multiplier on the base learning rate at `step` of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        let t = if total == 0 { 0.0 } else { step as f64 / total as f64 };
        match self {
            Schedule::Constant => 1.0,
            Schedule::Linear => 1.0 - t,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
        }
    }
}

/// Parameter groups held fixed during training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreezeFlags {
    pub encoder: bool,
    pub gate: bool,
    pub expert_w1: bool,
    pub expert_w2: bool,
    pub head: bool,
}

impl FreezeFlags {
    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Gate => self.gate,
            ParamGroup::ExpertW1 => self.expert_w1,
            ParamGroup::ExpertW2 => self.expert_w2,
            ParamGroup::Head => self.head,
        }
    }

    /// Everything except the expert weights, as in MoE-only fine-tuning.
    pub fn moe_only() -> Self {
        Self {
            encoder: true,
            gate: true,
            expert_w1: false,
            expert_w2: false,
            head: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Prior precision of the L2 term, on the summed (not averaged) loss.
    pub weight_decay_lambda: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global gradient-norm clip; `<= 0` disables clipping.
    pub grad_clip: f64,
    pub schedule: Schedule,
    pub eval_interval: usize,
    pub seed: u64,
    pub freeze: FreezeFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            weight_decay_lambda: 1.0,
            betas: (0.9, 0.95),
            eps: 1e-8,
            grad_clip: 1.0,
            schedule: Schedule::Cosine,
            eval_interval: 50,
            seed: 0,
            freeze: FreezeFlags::default(),
        }
    }
}

impl TrainConfig {
    /// Hyperparameters of the large-model fine-tuning recipe, kept for
    /// reference. Too slow to converge on the desk-scale model.
    pub fn paper_profile() -> Self {
        Self {
            steps: 10_000,
            batch_size: 4,
            lr: 5e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if !(self.weight_decay_lambda >= 0.0) || !self.weight_decay_lambda.is_finite() {
            return Err(Error::config("train.weight_decay_lambda", "must be >= 0"));
        }
        for (path, b) in [("train.betas.0", self.betas.0), ("train.betas.1", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(path, "must lie in [0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("train.eval_interval", "must be >= 1"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be > 0"));
        }
        Ok(())
    }
}

fn cross_entropy_batch(model: &MoEModel, data: &Dataset, with_grad: bool) -> Result<(Vec<f64>, Option<GradientSet>)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts = map_chunks(&idx, CHUNK, |_, chunk| -> Result<(Vec<f64>, Option<GradientSet>)> {
        let mut losses = Vec::with_capacity(chunk.len());
        let mut acc = with_grad.then(|| GradientSet::zeros_like(model));
        for &i in chunk {
            let (logits, trace) = forward(model, &data.features[i], with_grad)?;
            let y = data.labels[i];
            let lsm = log_softmax(&logits);
            losses.push(-lsm[y]);
            if let (Some(acc), Some(trace)) = (acc.as_mut(), trace) {
                let mut d = softmax(&logits);
                d[y] -= 1.0;
                backward_into(model, &trace, &d, acc)?;
            }
        }
        Ok((losses, acc))
    });
    let mut losses = Vec::with_capacity(data.len());
    let mut total: Option<GradientSet> = None;
    for part in parts {
        let (l, g) = part?;
        losses.extend(l);
        if let Some(g) = g {
            match total.as_mut() {
                None => total = Some(g),
                Some(t) => t.axpy(1.0, &g),
            }
        }
    }
    if with_grad && total.is_none() {
        total = Some(GradientSet::zeros_like(model));
    }
    Ok((losses, total))
}

/// `Σ −log softmax(f(xᵢ))[yᵢ] + (λ/2)‖θ_trainable‖²` and its gradient.
/// Gradients of frozen groups are zero.
pub fn map_objective(
    model: &MoEModel,
    batch: &Dataset,
    lambda: f64,
    freeze: &FreezeFlags,
) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::Data("map_objective needs a nonempty batch".into()));
    }
    batch.validate(model.config().d_input, model.config().num_classes)?;
    let (losses, grad) = cross_entropy_batch(model, batch, true)?;
    let mut grad = grad.expect("gradient requested");
    if let Some(bad) = losses.iter().position(|l| !l.is_finite()) {
        return Err(Error::Divergence { step: 0, example: bad });
    }
    let mut loss: f64 = losses.iter().sum();
    let mut params = Vec::new();
    model.visit_params(|g, _, _, m| params.push((g, m.data().to_vec())));
    let mut it = params.into_iter();
    grad.visit_mut(|group, _, _, g| {
        let (_, theta) = it.next().expect("same structure");
        if freeze.is_frozen(group) {
            g.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        for (gv, t) in g.iter_mut().zip(&theta) {
            *gv += lambda * t;
        }
        loss += 0.5 * lambda * theta.iter().map(|t| t * t).sum::<f64>();
    });
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            example: batch.len().saturating_sub(1),
        });
    }
    Ok((loss, grad))
}

/// Mean cross-entropy and accuracy over a dataset.
pub fn evaluate_loss(model: &MoEModel, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (losses, _) = cross_entropy_batch(model, data, false)?;
    let mut correct = 0usize;
    for (x, y) in data.features.iter().zip(&data.labels) {
        if argmax(&crate::model::logits(model, x)?) == *y {
            correct += 1;
        }
    }
    let n = data.len() as f64;
    Ok((losses.iter().sum::<f64>() / n, correct as f64 / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: MoEModel,
    pub curve: Vec<LossPoint>,
    pub best_step: usize,
}

/// A diverged run: the error plus the best model seen before it.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: TrainResult,
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Self {
        f.error
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

/// Trains to a MAP point. Each step minimizes the batch-averaged version of
/// [`map_objective`] with prior `λ·B/N`, so the fixed point is the MAP of the
/// full-data objective. The returned model is the evaluation checkpoint with
/// the lowest validation loss (the final one when `val` is empty).
#[allow(clippy::result_large_err)]
pub fn train(
    model: &MoEModel,
    train_data: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainFailure> {
    let fail = |error: Error, model: &MoEModel| TrainFailure {
        error,
        last_good: TrainResult {
            model: model.clone(),
            curve: Vec::new(),
            best_step: 0,
        },
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, model));
    }
    if train_data.is_empty() {
        return Err(fail(Error::Data("training split is empty".into()), model));
    }
    let c = model.config();
    for d in [train_data, val] {
        if let Err(e) = d.validate(c.d_input, c.num_classes) {
            return Err(fail(e, model));
        }
    }

    let n = train_data.len();
    let batch = cfg.batch_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    let mut current = model.clone();
    let mut adam = Adam {
        m: Vec::new(),
        v: Vec::new(),
        t: 0,
    };
    current.visit_params(|_, _, _, p| {
        adam.m.push(vec![0.0; p.data().len()]);
        adam.v.push(vec![0.0; p.data().len()]);
    });

    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, MoEModel)> = None;
    let checkpoint = |m: &MoEModel,
                      step: usize,
                      curve: &mut Vec<LossPoint>,
                      best: &mut Option<(f64, usize, MoEModel)>|
     -> Result<()> {
        let (train_loss, _) = evaluate_loss(m, train_data)?;
        let (val_loss, val_acc) = evaluate_loss(m, val)?;
        curve.push(LossPoint {
            step,
            train_loss,
            val_loss,
            val_acc,
        });
        let score = if val.is_empty() { train_loss } else { val_loss };
        let replace = match best {
            None => true,
            // Without a validation split the latest checkpoint wins.
            Some((s, _, _)) => val.is_empty() || score < *s,
        };
        if replace && score.is_finite() {
            *best = Some((score, step, m.clone()));
        }
        Ok(())
    };

    let finish = |curve: Vec<LossPoint>, best: Option<(f64, usize, MoEModel)>, fallback: &MoEModel| {
        let (best_step, model) = match best {
            Some((_, s, m)) => (s, m),
            None => (0, fallback.clone()),
        };
        TrainResult {
            model,
            curve,
            best_step,
        }
    };

    if let Err(e) = checkpoint(&current, 0, &mut curve, &mut best) {
        return Err(TrainFailure {
            error: e,
            last_good: finish(curve, best, model),
        });
    }

    let step_lambda = cfg.weight_decay_lambda * batch as f64 / n as f64;
    for step in 1..=cfg.steps {
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let sub = train_data.subset(idx);
        let mut grad = match map_objective(&current, &sub, step_lambda, &cfg.freeze) {
            Ok((_, g)) => g,
            Err(Error::Divergence { example, .. }) => {
                return Err(TrainFailure {
                    error: Error::Divergence {
                        step,
                        example: idx[example],
                    },
                    last_good: finish(curve, best, model),
                })
            }
            Err(e) => {
                return Err(TrainFailure {
                    error: e,
                    last_good: finish(curve, best, model),
                })
            }
        };
        grad.scale(1.0 / batch as f64);
        if cfg.grad_clip > 0.0 {
            let norm = grad.sq_norm().sqrt();
            if norm > cfg.grad_clip {
                grad.scale(cfg.grad_clip / norm);
            }
        }

        let lr = cfg.lr * cfg.schedule.factor(step - 1, cfg.steps);
        adam.t += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(adam.t);
        let bc2 = 1.0 - b2.powi(adam.t);
        let mut grads = Vec::new();
        grad.visit(|_, _, _, g| grads.push(g.data().to_vec()));
        let mut k = 0;
        let freeze = cfg.freeze;
        let eps = cfg.eps;
        let Adam { m, v, .. } = &mut adam;
        current.visit_params_mut(|group, _, _, p| {
            let i = k;
            k += 1;
            if freeze.is_frozen(group) {
                return;
            }
            let g = &grads[i];
            for j in 0..p.len() {
                m[i][j] = b1 * m[i][j] + (1.0 - b1) * g[j];
                v[i][j] = b2 * v[i][j] + (1.0 - b2) * g[j] * g[j];
                let mhat = m[i][j] / bc1;
                let vhat = v[i][j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            if let Err(e) = checkpoint(&current, step, &mut curve, &mut best) {
                return Err(TrainFailure {
                    error: e,
                    last_good: finish(curve, best, model),
                });
            }
        }
    }
    Ok(finish(curve, best, &current))
}

/// Loss curve as CSV: `step,train_loss,val_loss,val_acc`.
pub fn write_loss_curve(path: &Path, curve: &[LossPoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,train_loss,val_loss,val_acc")?;
    for p in curve {
        writeln!(f, "{},{},{},{}", p.step, p.train_loss, p.val_loss, p.val_acc)?;
    }
    f.flush()?;
    Ok(())
}
