//! Datasets, synthetic generators and JSONL ingestion.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Ood,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Ood];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config("split", format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, split: Split) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            features,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, d_input: usize, num_classes: usize) -> Result<()> {
        for (i, (x, y)) in self.features.iter().zip(&self.labels).enumerate() {
            if x.len() != d_input {
                return Err(Error::Data(format!(
                    "{} row {i}: {} features, model expects {d_input}",
                    self.split.name(),
                    x.len()
                )));
            }
            if *y >= num_classes {
                return Err(Error::Data(format!(
                    "{} row {i}: label {y} out of range for {num_classes} classes",
                    self.split.name()
                )));
            }
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Blobs,
    XorRings,
    ShiftedBlobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub generator: Generator,
    pub num_classes: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation around each class mean.
    pub noise: f64,
    /// Norm of each class mean (blobs) or ring spacing (xor-rings).
    pub separation: f64,
    /// Norm of the per-class mean shift applied to the OOD split.
    pub shift: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_ood: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            generator: Generator::ShiftedBlobs,
            num_classes: 3,
            dim: 4,
            noise: 1.0,
            separation: 2.0,
            shift: 3.0,
            n_train: 600,
            n_val: 1000,
            n_test: 1000,
            n_ood: 1000,
            seed: 0,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("data.num_classes", "must be >= 2"));
        }
        if self.dim == 0 {
            return Err(Error::config("data.dim", "must be >= 1"));
        }
        if self.generator == Generator::XorRings && self.dim < 2 {
            return Err(Error::config("data.dim", "xor-rings needs at least 2 dims"));
        }
        for (path, v) in [
            ("data.noise", self.noise),
            ("data.separation", self.separation),
            ("data.shift", self.shift),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(path, "must be finite and >= 0"));
            }
        }
        if self.n_train == 0 {
            return Err(Error::config("data.n_train", "must be >= 1"));
        }
        Ok(())
    }
}

/// Generated splits plus the generating class means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedData {
    pub spec: DataSpec,
    pub class_means: Vec<Vec<f64>>,
    pub ood_means: Vec<Vec<f64>>,
    #[serde(skip)]
    pub splits: Vec<Dataset>,
}

impl GeneratedData {
    pub fn split(&self, split: Split) -> Option<&Dataset> {
        self.splits.iter().find(|d| d.split == split)
    }
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn sample_blobs(means: &[Vec<f64>], noise: f64, n: usize, split: Split, rng: &mut ChaCha8Rng) -> Dataset {
    let labels = balanced_labels(n, means.len(), rng);
    let features = labels
        .iter()
        .map(|&y| {
            means[y]
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + noise * z
                })
                .collect()
        })
        .collect();
    Dataset {
        features,
        labels,
        split,
    }
}

fn sample_xor_rings(spec: &DataSpec, n: usize, split: Split, rng: &mut ChaCha8Rng) -> Dataset {
    let c = spec.num_classes;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let ring = rng.random_range(0..c);
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let z: f64 = StandardNormal.sample(rng);
        let radius = spec.separation * (ring + 1) as f64 + spec.noise * 0.25 * z;
        let (x, y) = (radius * theta.cos(), radius * theta.sin());
        let parity = usize::from((x > 0.0) ^ (y > 0.0));
        let mut row = vec![x, y];
        for _ in 2..spec.dim {
            let z: f64 = StandardNormal.sample(rng);
            row.push(spec.noise * z);
        }
        features.push(row);
        labels.push((ring + parity) % c);
    }
    Dataset {
        features,
        labels,
        split,
    }
}

/// Deterministic synthetic splits.
///
/// `blobs` and `shifted-blobs` draw class means of norm `separation` in
/// random directions; `shifted-blobs` additionally emits an OOD split whose
/// class means are displaced by `shift` in a random direction per class.
/// `xor-rings` places classes on concentric rings with labels flipped in
/// alternating quadrants.
pub fn generate(spec: &DataSpec) -> Result<GeneratedData> {
    spec.validate()?;
    // Class geometry and every split draw from separate streams, so changing
    // one split's size leaves the others untouched.
    let mut rng = stream(spec.seed, &[0]);
    let split_rng = |s: Split| stream(spec.seed, &[1 + s as u64]);
    let sizes = [
        (Split::Train, spec.n_train),
        (Split::Val, spec.n_val),
        (Split::Test, spec.n_test),
    ];
    match spec.generator {
        Generator::XorRings => {
            let splits = sizes
                .iter()
                .map(|&(s, n)| sample_xor_rings(spec, n, s, &mut split_rng(s)))
                .collect();
            Ok(GeneratedData {
                spec: spec.clone(),
                class_means: Vec::new(),
                ood_means: Vec::new(),
                splits,
            })
        }
        Generator::Blobs | Generator::ShiftedBlobs => {
            let means: Vec<Vec<f64>> = (0..spec.num_classes)
                .map(|_| {
                    unit_vector(spec.dim, &mut rng)
                        .into_iter()
                        .map(|v| v * spec.separation)
                        .collect()
                })
                .collect();
            let ood_means: Vec<Vec<f64>> = if spec.generator == Generator::ShiftedBlobs {
                means
                    .iter()
                    .map(|m| {
                        let d = unit_vector(spec.dim, &mut rng);
                        m.iter().zip(d).map(|(a, b)| a + spec.shift * b).collect()
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let mut splits: Vec<Dataset> = sizes
                .iter()
                .map(|&(s, n)| sample_blobs(&means, spec.noise, n, s, &mut split_rng(s)))
                .collect();
            if !ood_means.is_empty() {
                splits.push(sample_blobs(
                    &ood_means,
                    spec.noise,
                    spec.n_ood,
                    Split::Ood,
                    &mut split_rng(Split::Ood),
                ));
            }
            Ok(GeneratedData {
                spec: spec.clone(),
                class_means: means,
                ood_means,
                splits,
            })
        }
    }
}

#[derive(Serialize, Deserialize)]
struct VectorRow {
    x: Vec<f64>,
    y: usize,
}

#[derive(Deserialize)]
struct ChoiceRow {
    question: String,
    choices: Vec<String>,
    answer: usize,
}

pub fn write_jsonl(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (x, y) in data.features.iter().zip(&data.labels) {
        serde_json::to_writer(&mut w, &VectorRow { x: x.clone(), y: *y })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSONL dataset. Rows are either `{"x": [...], "y": k}` or the
/// multiple-choice form `{"question", "choices", "answer"}`, which needs a
/// hasher to become a feature vector.
pub fn read_jsonl(path: &Path, split: Split, hasher: Option<&FeatureHasher>) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if value.get("x").is_some() {
            let row: VectorRow =
                serde_json::from_value(value).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            features.push(row.x);
            labels.push(row.y);
        } else if value.get("question").is_some() {
            let row: ChoiceRow =
                serde_json::from_value(value).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            let hasher = hasher.ok_or_else(|| {
                Error::Data(format!(
                    "{}:{}: multiple-choice row needs a feature hasher",
                    path.display(),
                    n + 1
                ))
            })?;
            features.push(hasher.encode_choice(&row.question, &row.choices));
            labels.push(row.answer);
        } else {
            return Err(Error::Data(format!(
                "{}:{}: row has neither `x` nor `question`",
                path.display(),
                n + 1
            )));
        }
    }
    Dataset::new(features, labels, split)
}

/// Signed feature hashing of character k-grams into a fixed number of
/// buckets, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureHasher {
    pub dim: usize,
    pub ngram: usize,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl FeatureHasher {
    pub fn new(dim: usize, ngram: usize) -> Self {
        Self {
            dim: dim.max(1),
            ngram: ngram.max(1),
        }
    }

    fn add_text(&self, v: &mut [f64], prefix: &str, text: &str) {
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        if chars.is_empty() {
            return;
        }
        let k = self.ngram.min(chars.len());
        for w in chars.windows(k) {
            let gram: String = w.iter().collect();
            let h = fnv1a(format!("{prefix}|{gram}").as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign;
        }
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.add_text(&mut v, "t", text);
        normalize(v)
    }

    /// Question k-grams share one namespace; each choice hashes into its own
    /// position-tagged namespace so the answer index is recoverable.
    pub fn encode_choice(&self, question: &str, choices: &[String]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.add_text(&mut v, "q", question);
        for (i, c) in choices.iter().enumerate() {
            self.add_text(&mut v, &format!("c{i}"), c);
        }
        normalize(v)
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v
    } else {
        v.into_iter().map(|x| x / n).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_deterministic() {
        let spec = DataSpec {
            generator: Generator::Blobs,
            num_classes: 2,
            noise: 0.0,
            seed: 17,
            ..DataSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.splits, b.splits);
        assert_eq!(a.splits.len(), 3);
        // Zero noise: every point sits on its class mean.
        let train = a.split(Split::Train).unwrap();
        for (x, y) in train.features.iter().zip(&train.labels) {
            assert_eq!(x, &a.class_means[*y]);
        }
    }

    #[test]
    fn blob_sample_means_match_class_means() {
        let spec = DataSpec {
            generator: Generator::Blobs,
            n_train: 3000,
            noise: 0.7,
            seed: 3,
            ..DataSpec::default()
        };
        let g = generate(&spec).unwrap();
        let train = g.split(Split::Train).unwrap();
        for c in 0..spec.num_classes {
            let rows: Vec<&Vec<f64>> = train
                .features
                .iter()
                .zip(&train.labels)
                .filter(|(_, y)| **y == c)
                .map(|(x, _)| x)
                .collect();
            let n = rows.len() as f64;
            for d in 0..spec.dim {
                let mean = rows.iter().map(|r| r[d]).sum::<f64>() / n;
                let bound = 3.0 * spec.noise / n.sqrt();
                assert!((mean - g.class_means[c][d]).abs() <= bound);
            }
        }
    }

    #[test]
    fn zero_shift_ood_uses_test_means() {
        let spec = DataSpec {
            shift: 0.0,
            seed: 5,
            ..DataSpec::default()
        };
        let g = generate(&spec).unwrap();
        assert_eq!(g.class_means, g.ood_means);
        assert_eq!(g.split(Split::Ood).unwrap().len(), spec.n_ood);
    }

    #[test]
    fn shifted_means_have_requested_offset() {
        let spec = DataSpec {
            shift: 2.5,
            seed: 6,
            ..DataSpec::default()
        };
        let g = generate(&spec).unwrap();
        for (m, o) in g.class_means.iter().zip(&g.ood_means) {
            let d: f64 = m.iter().zip(o).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!((d - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn xor_rings_labels_in_range() {
        let spec = DataSpec {
            generator: Generator::XorRings,
            num_classes: 2,
            dim: 3,
            ..DataSpec::default()
        };
        let g = generate(&spec).unwrap();
        let t = g.split(Split::Train).unwrap();
        t.validate(3, 2).unwrap();
        assert!(t.labels.contains(&0) && t.labels.contains(&1));
    }

    #[test]
    fn bad_spec_reports_field_path() {
        let spec = DataSpec {
            num_classes: 1,
            ..DataSpec::default()
        };
        match generate(&spec) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "data.num_classes"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip_and_choice_rows() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate(&DataSpec::default()).unwrap();
        let train = g.split(Split::Train).unwrap();
        let p = dir.path().join("train.jsonl");
        write_jsonl(&p, train).unwrap();
        let back = read_jsonl(&p, Split::Train, None).unwrap();
        assert_eq!(&back, train);

        let q = dir.path().join("mc.jsonl");
        std::fs::write(
            &q,
            "{\"question\": \"Which is a fruit?\", \"choices\": [\"apple\", \"brick\"], \"answer\": 0}\n",
        )
        .unwrap();
        assert!(read_jsonl(&q, Split::Test, None).is_err());
        let h = FeatureHasher::new(16, 3);
        let d = read_jsonl(&q, Split::Test, Some(&h)).unwrap();
        assert_eq!(d.labels, vec![0]);
        let n: f64 = d.features[0].iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
