//! Experiment configuration: one JSON document covering every stage, plus
//! dotted-path overrides (`train.lr=3e-4`).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curvature::{CurvatureConfig, ExpertId, FisherMode, FisherNormalization};
use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::laplace::{EvidenceSign, LpoConfig};
use crate::linalg::SketchConfig;
use crate::model::MoEConfig;
use crate::predictive::McConfig;
use crate::rng::derive_seed;
use crate::train::TrainConfig;

/// Which experts carry a posterior.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreatSpec {
    All,
    None,
    /// Zero-based layer indices.
    Layers(Vec<usize>),
}

impl TreatSpec {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TreatSpec::All),
            "none" => Ok(TreatSpec::None),
            _ => {
                let layers = s
                    .split(',')
                    .map(|t| t.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| {
                        Error::config("laplace.treat", format!("expected all, none or layer list, got `{s}`"))
                    })?;
                Ok(TreatSpec::Layers(layers))
            }
        }
    }

    pub fn resolve(&self, all: &BTreeSet<ExpertId>) -> BTreeSet<ExpertId> {
        match self {
            TreatSpec::All => all.clone(),
            TreatSpec::None => BTreeSet::new(),
            TreatSpec::Layers(ls) => all.iter().filter(|id| ls.contains(&id.layer)).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaMethod {
    Evidence,
    Lpo,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LaplaceConfig {
    pub lambda0: f64,
    pub fisher_mode: FisherMode,
    pub fisher_normalization: FisherNormalization,
    pub evidence_sign: EvidenceSign,
    pub method: LambdaMethod,
    /// Step size of evidence ascent in `log λ`.
    pub eta: f64,
    pub steps: usize,
    pub lpo: LpoConfig,
    pub treat: TreatSpec,
}

impl Default for LaplaceConfig {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            fisher_mode: FisherMode::Sampled,
            fisher_normalization: FisherNormalization::Mean,
            evidence_sign: EvidenceSign::H,
            method: LambdaMethod::Evidence,
            eta: 1e-3,
            steps: 500,
            lpo: LpoConfig::default(),
            treat: TreatSpec::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub num_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { num_bins: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

impl Paths {
    /// Resolves relative paths against `root`.
    pub fn under(&self, root: &Path) -> Paths {
        Paths {
            data: root.join(&self.data),
            checkpoints: root.join(&self.checkpoints),
            reports: root.join(&self.reports),
        }
    }
}

/// The full experiment. Every random stream is derived from `seed`; the
/// `seed` fields of the sub-configs are overwritten by [`Self::resolved`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSpec,
    pub model: MoEConfig,
    pub train: TrainConfig,
    pub sketch: SketchConfig,
    pub laplace: LaplaceConfig,
    pub mc: McConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

mod tag {
    pub const DATA: u64 = 1;
    pub const MODEL: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const SKETCH: u64 = 4;
    pub const FISHER: u64 = 5;
    pub const MC: u64 = 6;
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }

    /// Copy with all stream seeds derived from `self.seed`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.data.seed = derive_seed(c.seed, &[tag::DATA]);
        c.model.seed = derive_seed(c.seed, &[tag::MODEL]);
        c.train.seed = derive_seed(c.seed, &[tag::TRAIN]);
        c.sketch.seed = derive_seed(c.seed, &[tag::SKETCH]);
        c.mc.seed = derive_seed(c.seed, &[tag::MC]);
        c
    }

    pub fn curvature(&self) -> CurvatureConfig {
        CurvatureConfig {
            sketch: self.sketch,
            mode: self.laplace.fisher_mode,
            normalization: self.laplace.fisher_normalization,
            seed: derive_seed(self.seed, &[tag::FISHER]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sketch.validate()?;
        self.mc.validate()?;
        if self.data.dim != self.model.d_input {
            return Err(Error::config("model.d_input", "must equal data.dim"));
        }
        if self.data.num_classes != self.model.num_classes {
            return Err(Error::config("model.num_classes", "must equal data.num_classes"));
        }
        if !(self.laplace.lambda0 > 0.0) || !self.laplace.lambda0.is_finite() {
            return Err(Error::config("laplace.lambda0", "must be > 0"));
        }
        if !(self.laplace.eta >= 0.0) {
            return Err(Error::config("laplace.eta", "must be >= 0"));
        }
        if self.eval.num_bins == 0 {
            return Err(Error::config("eval.num_bins", "must be >= 1"));
        }
        Ok(())
    }

    /// Applies `path=value` overrides. The value is parsed as JSON when
    /// possible and as a bare string otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.clone(), "override must look like path=value"))?;
            let value: serde_json::Value =
                serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut node = &mut doc;
            let parts: Vec<&str> = path.split('.').collect();
            for (i, key) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| Error::config(path, format!("`{}` is not an object", parts[..i].join("."))))?;
                if !obj.contains_key(*key) {
                    return Err(Error::config(path, format!("unknown field `{key}`")));
                }
                if i + 1 == parts.len() {
                    obj.insert((*key).to_string(), value.clone());
                    break;
                }
                node = obj.get_mut(*key).expect("checked");
            }
        }
        serde_json::from_value(doc).map_err(|e| {
            Error::config(
                overrides
                    .last()
                    .map(|s| s.split('=').next().unwrap_or(""))
                    .unwrap_or(""),
                e.to_string(),
            )
        })
    }

    /// Hash of everything that determines the numerical results (paths
    /// excluded).
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.paths = Paths::default();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..16])
    }
}
