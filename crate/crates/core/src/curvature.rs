//! Per-expert Kronecker-factored Fisher blocks for the second linear layer.
//!
//! For every example and every routed expert, the input `a` of `W₂` feeds the
//! activation stream and `g = ∂log p(y|x)/∂b` (gate weight included) feeds the
//! gradient stream. Each stream is compressed on the fly by a
//! [`FactorSketch`], and the block is `F ≈ (L_a L_aᵀ) ⊗ (L_g L_gᵀ)`, the usual
//! K-FAC product of the two second-moment estimates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{merge_factors, FactorSketch, LowRankFactor, Matrix, SketchConfig};
use crate::model::{expert_output_grads, forward, softmax, MoEModel};
use crate::parallel::map_chunks;
use crate::rng::{derive_seed, stream};

/// `(layer, expert)`, both zero-based. Displayed as `l{layer}e{expert}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ExpertId {
    pub layer: usize,
    pub expert: usize,
}

impl ExpertId {
    pub fn new(layer: usize, expert: usize) -> Self {
        Self { layer, expert }
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}e{}", self.layer, self.expert)
    }
}

impl FromStr for ExpertId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("bad expert id `{s}`"));
        let rest = s.strip_prefix('l').ok_or_else(bad)?;
        let (l, e) = rest.split_once('e').ok_or_else(bad)?;
        Ok(Self {
            layer: l.parse().map_err(|_| bad())?,
            expert: e.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for ExpertId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExpertId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// All experts of a model, in id order.
pub fn all_experts(model: &MoEModel) -> BTreeSet<ExpertId> {
    let c = model.config();
    (0..c.num_layers)
        .flat_map(|l| (0..c.num_experts).map(move |e| ExpertId::new(l, e)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherMode {
    /// Gradients at the observed label.
    Empirical,
    /// Gradients at one label drawn from the model's own predictive.
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherNormalization {
    /// `F = (mean aaᵀ) ⊗ (mean ggᵀ)`.
    Mean,
    /// `F = N · (mean aaᵀ) ⊗ (mean ggᵀ)`, the scale of a summed Fisher.
    Sum,
}

impl FisherNormalization {
    /// Each raw factor (outer product = Σ) is scaled by `N^-exponent`.
    fn exponent(self) -> f64 {
        match self {
            FisherNormalization::Mean => 0.5,
            FisherNormalization::Sum => 0.25,
        }
    }

    fn factor_scale(self, count: u64) -> f64 {
        if count == 0 {
            1.0
        } else {
            (count as f64).powf(-self.exponent())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurvatureConfig {
    pub sketch: SketchConfig,
    pub mode: FisherMode,
    pub normalization: FisherNormalization,
    /// Seed for label draws in sampled mode.
    pub seed: u64,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        Self {
            sketch: SketchConfig::default(),
            mode: FisherMode::Sampled,
            normalization: FisherNormalization::Mean,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertCurvature {
    pub id: ExpertId,
    /// Activation factor, dimension `d_ff`.
    pub la: LowRankFactor,
    /// Output-gradient factor, dimension `d_model`.
    pub lg: LowRankFactor,
    pub token_count: u64,
    pub mode: FisherMode,
}

impl ExpertCurvature {
    pub fn zeros(id: ExpertId, d_in: usize, d_out: usize, mode: FisherMode) -> Self {
        Self {
            id,
            la: LowRankFactor::zeros(d_in),
            lg: LowRankFactor::zeros(d_out),
            token_count: 0,
            mode,
        }
    }

    pub fn d_in(&self) -> usize {
        self.la.dim()
    }

    pub fn d_out(&self) -> usize {
        self.lg.dim()
    }

    pub fn is_zero(&self) -> bool {
        self.la.is_zero() || self.lg.is_zero()
    }

    /// Dense `(L_a L_aᵀ) ⊗ (L_g L_gᵀ)`; small dimensions only.
    pub fn dense_fisher(&self) -> Result<Matrix> {
        crate::linalg::kron(&self.la.outer(), &self.lg.outer())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureSet {
    pub experts: BTreeMap<ExpertId, ExpertCurvature>,
    pub config: CurvatureConfig,
    /// Fingerprint of the model the statistics were collected on.
    pub source: String,
    pub warnings: Vec<String>,
}

impl CurvatureSet {
    pub fn get(&self, id: &ExpertId) -> Option<&ExpertCurvature> {
        self.experts.get(id)
    }

    pub fn ids(&self) -> BTreeSet<ExpertId> {
        self.experts.keys().copied().collect()
    }

    fn refresh_warnings(&mut self) {
        self.warnings = self
            .experts
            .values()
            .filter(|c| c.token_count == 0)
            .map(|c| format!("expert {} was never routed; its factors are zero", c.id))
            .collect();
    }
}

fn expert_sketch_config(base: &SketchConfig, id: ExpertId, stream_tag: u64) -> SketchConfig {
    SketchConfig {
        seed: derive_seed(base.seed, &[id.layer as u64, id.expert as u64, stream_tag]),
        ..*base
    }
}

/// `(layer, expert, a, g)` pushes of one example, in layer then routing order.
type Pushes = Vec<(usize, usize, Vec<f64>, Vec<f64>)>;

fn example_pushes(
    model: &MoEModel,
    x: &[f64],
    label: usize,
    mode: FisherMode,
    seed: u64,
    index: usize,
) -> Result<Pushes> {
    let (logits, trace) = forward(model, x, true)?;
    let trace = trace.expect("captured");
    let p = softmax(&logits);
    let y = match mode {
        FisherMode::Empirical => label,
        FisherMode::Sampled => {
            let u: f64 = stream(seed, &[index as u64]).random();
            let mut acc = 0.0;
            let mut pick = p.len() - 1;
            for (k, pk) in p.iter().enumerate() {
                acc += pk;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            pick
        }
    };
    // d log p(y|x) / d logits = onehot(y) − p.
    let mut d: Vec<f64> = p.iter().map(|v| -v).collect();
    d[y] += 1.0;
    let grads = expert_output_grads(model, &trace, &d)?;
    let mut out = Vec::new();
    for (l, (layer_grads, lt)) in grads.into_iter().zip(&trace.layers).enumerate() {
        for ((e, g), et) in layer_grads.into_iter().zip(&lt.experts) {
            debug_assert_eq!(e, et.expert);
            out.push((l, e, et.activation.clone(), g));
        }
    }
    Ok(out)
}

/// Streams one curvature pass over `data` for the experts in `experts`
/// (every expert when `None`).
pub fn accumulate(
    model: &MoEModel,
    data: &Dataset,
    cfg: &CurvatureConfig,
    experts: Option<&BTreeSet<ExpertId>>,
) -> Result<CurvatureSet> {
    cfg.sketch.validate()?;
    let c = model.config();
    data.validate(c.d_input, c.num_classes)?;
    let ids = experts.cloned().unwrap_or_else(|| all_experts(model));
    for id in &ids {
        if id.layer >= c.num_layers || id.expert >= c.num_experts {
            return Err(Error::Data(format!("expert {id} is not part of the model")));
        }
    }
    let mut sketches: BTreeMap<ExpertId, (FactorSketch, FactorSketch, u64)> = ids
        .iter()
        .map(|&id| {
            (
                id,
                (
                    FactorSketch::new(c.d_ff, expert_sketch_config(&cfg.sketch, id, 0)),
                    FactorSketch::new(c.d_model, expert_sketch_config(&cfg.sketch, id, 1)),
                    0,
                ),
            )
        })
        .collect();

    let label_seed = derive_seed(cfg.seed, &[0x6669_7368_6572]);
    let indices: Vec<usize> = (0..data.len()).collect();
    // Per-example gradients fan out; pushes are applied in example order.
    for block in indices.chunks(256) {
        let parts = map_chunks(block, 16, |_, chunk| -> Result<Vec<Pushes>> {
            chunk
                .iter()
                .map(|&i| example_pushes(model, &data.features[i], data.labels[i], cfg.mode, label_seed, i))
                .collect()
        });
        for part in parts {
            for pushes in part? {
                for (l, e, a, g) in pushes {
                    if let Some((sa, sg, n)) = sketches.get_mut(&ExpertId::new(l, e)) {
                        sa.push(&a)?;
                        sg.push(&g)?;
                        *n += 1;
                    }
                }
            }
        }
    }

    let mut out = BTreeMap::new();
    for (id, (sa, sg, n)) in sketches {
        let scale = cfg.normalization.factor_scale(n);
        out.insert(
            id,
            ExpertCurvature {
                id,
                la: sa.finish()?.scaled(scale),
                lg: sg.finish()?.scaled(scale),
                token_count: n,
                mode: cfg.mode,
            },
        );
    }
    let mut set = CurvatureSet {
        experts: out,
        config: *cfg,
        source: model.fingerprint(),
        warnings: Vec::new(),
    };
    set.refresh_warnings();
    Ok(set)
}

/// Combines curvature gathered on two disjoint shards: raw factors are
/// concatenated, re-truncated and renormalized by the combined token count.
pub fn merge(a: &CurvatureSet, b: &CurvatureSet) -> Result<CurvatureSet> {
    if a.source != b.source {
        return Err(Error::Provenance {
            expected: a.source.clone(),
            found: b.source.clone(),
        });
    }
    if a.config != b.config {
        return Err(Error::Provenance {
            expected: format!("{:?}", a.config),
            found: format!("{:?}", b.config),
        });
    }
    let norm = a.config.normalization;
    let mut experts = BTreeMap::new();
    let ids: BTreeSet<ExpertId> = a.experts.keys().chain(b.experts.keys()).copied().collect();
    for id in ids {
        let merged = match (a.experts.get(&id), b.experts.get(&id)) {
            (Some(x), None) | (None, Some(x)) => x.clone(),
            (Some(x), Some(y)) => {
                let n = x.token_count + y.token_count;
                let raw = |c: &ExpertCurvature, f: &LowRankFactor| f.scaled(1.0 / norm.factor_scale(c.token_count));
                let s = norm.factor_scale(n);
                let la = merge_factors(
                    &raw(x, &x.la),
                    &raw(y, &y.la),
                    &expert_sketch_config(&a.config.sketch, id, 2),
                )?;
                let lg = merge_factors(
                    &raw(x, &x.lg),
                    &raw(y, &y.lg),
                    &expert_sketch_config(&a.config.sketch, id, 3),
                )?;
                ExpertCurvature {
                    id,
                    la: la.scaled(s),
                    lg: lg.scaled(s),
                    token_count: n,
                    mode: x.mode,
                }
            }
            (None, None) => unreachable!(),
        };
        experts.insert(id, merged);
    }
    let mut set = CurvatureSet {
        experts,
        config: a.config,
        source: a.source.clone(),
        warnings: Vec::new(),
    };
    set.refresh_warnings();
    Ok(set)
}
