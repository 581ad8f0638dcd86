//! Versioned artifacts: a JSON manifest next to a blob of little-endian f64
//! tensors. Offsets are 8-byte aligned, and the manifest records the config
//! hash, the parent artifact and a SHA-256 of the blob.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curvature::{CurvatureConfig, CurvatureSet, ExpertCurvature, ExpertId, FisherMode};
use crate::error::{Error, Result};
use crate::laplace::LaplacePosterior;
use crate::linalg::{LowRankFactor, Matrix};
use crate::model::{tensor_name, ExpertParams, GateParams, MoEConfig, MoELayer, MoEModel, ParamGroup};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub config_hash: String,
    /// Blob hash of the artifact this one was derived from.
    pub parent: Option<String>,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
    pub metadata: serde_json::Value,
    pub created_by: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `<stem>.json` and `<stem>.bin` under `dir`.
pub fn write_artifact(
    dir: &Path,
    stem: &str,
    kind: &str,
    config_hash: &str,
    parent: Option<String>,
    tensors: &[(String, &Matrix)],
    metadata: serde_json::Value,
) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            dtype: "f64le".into(),
            offset: blob.len(),
        });
        for v in m.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob_name = format!("{stem}.bin");
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        kind: kind.into(),
        config_hash: config_hash.into(),
        parent,
        blob: blob_name.clone(),
        blob_sha256: sha256_hex(&blob),
        tensors: entries,
        metadata,
        created_by: format!("moe-laplace {}", env!("CARGO_PKG_VERSION")),
    };
    std::fs::write(dir.join(&blob_name), &blob)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join(format!("{stem}.json")), text)?;
    Ok(manifest)
}

/// Reads and verifies an artifact. `manifest_path` points at the JSON file.
pub fn read_artifact(manifest_path: &Path) -> Result<(Manifest, BTreeMap<String, Matrix>)> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "{}: schema version {} not supported",
            manifest_path.display(),
            manifest.schema_version
        )));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let blob = std::fs::read(dir.join(&manifest.blob))?;
    let found = sha256_hex(&blob);
    if found != manifest.blob_sha256 {
        return Err(Error::Provenance {
            expected: manifest.blob_sha256.clone(),
            found,
        });
    }
    let mut spans: Vec<(usize, usize, &str)> = Vec::new();
    let mut tensors = BTreeMap::new();
    for t in &manifest.tensors {
        let bytes = t.shape[0] * t.shape[1] * 8;
        if t.dtype != "f64le" || t.offset % 8 != 0 || t.offset + bytes > blob.len() {
            return Err(Error::Data(format!("tensor `{}` has a bad index entry", t.name)));
        }
        spans.push((t.offset, t.offset + bytes, &t.name));
        let data = blob[t.offset..t.offset + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(t.name.clone(), Matrix::from_vec(t.shape[0], t.shape[1], data)?);
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(Error::Data(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
        }
    }
    Ok((manifest, tensors))
}

pub fn expect_config(manifest: &Manifest, config_hash: &str) -> Result<()> {
    if manifest.config_hash != config_hash {
        return Err(Error::Provenance {
            expected: config_hash.into(),
            found: manifest.config_hash.clone(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    model: MoEConfig,
    fingerprint: String,
}

pub fn save_model(dir: &Path, stem: &str, model: &MoEModel, config_hash: &str) -> Result<Manifest> {
    let mut names = Vec::new();
    model.visit_params(|g, l, e, m| names.push((tensor_name(g, l, e), m.clone())));
    let tensors: Vec<(String, &Matrix)> = names.iter().map(|(n, m)| (n.clone(), m)).collect();
    let meta = ModelMeta {
        model: model.config().clone(),
        fingerprint: model.fingerprint(),
    };
    write_artifact(
        dir,
        stem,
        "model",
        config_hash,
        None,
        &tensors,
        serde_json::to_value(meta)?,
    )
}

fn take(tensors: &mut BTreeMap<String, Matrix>, name: &str) -> Result<Matrix> {
    tensors
        .remove(name)
        .ok_or_else(|| Error::Data(format!("artifact is missing tensor `{name}`")))
}

pub fn load_model(manifest_path: &Path) -> Result<(Manifest, MoEModel)> {
    let (manifest, mut t) = read_artifact(manifest_path)?;
    if manifest.kind != "model" {
        return Err(Error::Data(format!(
            "expected a model artifact, found `{}`",
            manifest.kind
        )));
    }
    let meta: ModelMeta = serde_json::from_value(manifest.metadata.clone())?;
    let c = &meta.model;
    let encoder = take(&mut t, &tensor_name(ParamGroup::Encoder, 0, 0))?;
    let head = take(&mut t, &tensor_name(ParamGroup::Head, 0, 0))?;
    let mut layers = Vec::with_capacity(c.num_layers);
    for l in 0..c.num_layers {
        let w_gate = take(&mut t, &tensor_name(ParamGroup::Gate, l, 0))?;
        let mut experts = Vec::with_capacity(c.num_experts);
        for e in 0..c.num_experts {
            experts.push(ExpertParams {
                w1: take(&mut t, &tensor_name(ParamGroup::ExpertW1, l, e))?,
                w2: take(&mut t, &tensor_name(ParamGroup::ExpertW2, l, e))?,
            });
        }
        layers.push(MoELayer {
            gate: GateParams { w_gate },
            experts,
        });
    }
    let model = MoEModel::from_parts(meta.model.clone(), encoder, layers, head)?;
    if model.fingerprint() != meta.fingerprint {
        return Err(Error::Provenance {
            expected: meta.fingerprint,
            found: model.fingerprint(),
        });
    }
    Ok((manifest, model))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExpertMeta {
    id: ExpertId,
    token_count: u64,
    mode: FisherMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PosteriorMeta {
    lambda: f64,
    treated: BTreeSet<ExpertId>,
    experts: Vec<ExpertMeta>,
    curvature: CurvatureConfig,
    source: String,
    warnings: Vec<String>,
    extra: serde_json::Value,
}

/// Stores factors, MAP weights, `λ` and the treated set. `parent` should be
/// the model's blob hash; `extra` is free-form (e.g. the optimizer record).
pub fn save_posterior(
    dir: &Path,
    stem: &str,
    post: &LaplacePosterior,
    config_hash: &str,
    parent: Option<String>,
    extra: serde_json::Value,
) -> Result<Manifest> {
    let curv = post.curvature();
    let mut owned: Vec<(String, Matrix)> = Vec::new();
    let mut experts = Vec::new();
    for (id, c) in &curv.experts {
        owned.push((format!("{id}.la"), c.la.factor.clone()));
        owned.push((format!("{id}.lg"), c.lg.factor.clone()));
        owned.push((format!("{id}.w_map"), post.map_weights()[id].clone()));
        experts.push(ExpertMeta {
            id: *id,
            token_count: c.token_count,
            mode: c.mode,
        });
    }
    let tensors: Vec<(String, &Matrix)> = owned.iter().map(|(n, m)| (n.clone(), m)).collect();
    let meta = PosteriorMeta {
        lambda: post.lambda(),
        treated: post.treated().clone(),
        experts,
        curvature: curv.config,
        source: curv.source.clone(),
        warnings: curv.warnings.clone(),
        extra,
    };
    write_artifact(
        dir,
        stem,
        "posterior",
        config_hash,
        parent,
        &tensors,
        serde_json::to_value(meta)?,
    )
}

pub fn load_posterior(manifest_path: &Path) -> Result<(Manifest, LaplacePosterior, serde_json::Value)> {
    let (manifest, mut t) = read_artifact(manifest_path)?;
    if manifest.kind != "posterior" {
        return Err(Error::Data(format!(
            "expected a posterior artifact, found `{}`",
            manifest.kind
        )));
    }
    let meta: PosteriorMeta = serde_json::from_value(manifest.metadata.clone())?;
    let mut experts = BTreeMap::new();
    let mut weights = BTreeMap::new();
    for e in &meta.experts {
        let id = e.id;
        experts.insert(
            id,
            ExpertCurvature {
                id,
                la: LowRankFactor::new(take(&mut t, &format!("{id}.la"))?),
                lg: LowRankFactor::new(take(&mut t, &format!("{id}.lg"))?),
                token_count: e.token_count,
                mode: e.mode,
            },
        );
        weights.insert(id, take(&mut t, &format!("{id}.w_map"))?);
    }
    let curvature = CurvatureSet {
        experts,
        config: meta.curvature,
        source: meta.source,
        warnings: meta.warnings,
    };
    let post = LaplacePosterior::from_parts(weights, curvature, meta.lambda, meta.treated)?;
    Ok((manifest, post, meta.extra))
}

/// `dir/<stem>.json`.
pub fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}
