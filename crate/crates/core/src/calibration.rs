//! Accuracy, NLL, expected calibration error and the layer-quarter ablation.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curvature::ExpertId;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::laplace::LaplacePosterior;
use crate::model::{argmax, MoEModel};
use crate::predictive::{predict_dataset, McConfig, Prediction};

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean `−log p(true label)` with probabilities floored at [`PROB_FLOOR`].
pub fn nll(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Shape {
            op: "nll",
            expected: (labels.len(), 1),
            got: (probs.len(), 1),
        });
    }
    if probs.is_empty() {
        return Err(Error::Data("nll of an empty set".into()));
    }
    let mut s = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        let py = *p
            .get(y)
            .ok_or_else(|| Error::Data(format!("label {y} out of range for {} classes", p.len())))?;
        s -= py.max(PROB_FLOOR).ln();
    }
    Ok(s / probs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Zero for empty bins.
    pub mean_confidence: f64,
    /// Zero for empty bins.
    pub accuracy: f64,
}

/// Index of the right-closed bin `(m/M, (m+1)/M]` holding `conf`; zero
/// confidence goes to the first bin.
pub fn bin_index(conf: f64, num_bins: usize) -> usize {
    let m = num_bins as f64;
    let mut i = ((conf * m).ceil() as isize - 1).clamp(0, num_bins as isize - 1) as usize;
    while i > 0 && conf <= i as f64 / m {
        i -= 1;
    }
    while i + 1 < num_bins && conf > (i + 1) as f64 / m {
        i += 1;
    }
    i
}

/// `Σ_m (|B_m|/N) |acc(B_m) − conf(B_m)|` over equal-width right-closed bins.
pub fn ece(probs: &[Vec<f64>], labels: &[usize], num_bins: usize) -> Result<(f64, Vec<ReliabilityBin>)> {
    if num_bins == 0 {
        return Err(Error::config("eval.num_bins", "must be >= 1"));
    }
    if probs.len() != labels.len() {
        return Err(Error::Shape {
            op: "ece",
            expected: (labels.len(), 1),
            got: (probs.len(), 1),
        });
    }
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut correct = vec![0usize; num_bins];
    for (p, &y) in probs.iter().zip(labels) {
        let pred = argmax(p);
        let conf = p[pred];
        let b = bin_index(conf, num_bins);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == y {
            correct[b] += 1;
        }
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    let bins = (0..num_bins)
        .map(|m| {
            let c = count[m];
            let (mean_confidence, accuracy) = if c == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[m] / c as f64, correct[m] as f64 / c as f64)
            };
            if c > 0 {
                total += c as f64 / n * (accuracy - mean_confidence).abs();
            }
            ReliabilityBin {
                lo: m as f64 / num_bins as f64,
                hi: (m + 1) as f64 / num_bins as f64,
                count: c,
                mean_confidence,
                accuracy,
            }
        })
        .collect();
    Ok((total, bins))
}

pub fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if probs.is_empty() {
        return f64::NAN;
    }
    let hits = probs.iter().zip(labels).filter(|(p, y)| argmax(p) == **y).count();
    hits as f64 / probs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: String,
    pub dataset: String,
    pub n: usize,
    pub accuracy: f64,
    pub nll: f64,
    pub ece: f64,
    pub num_bins: usize,
    pub bins: Vec<ReliabilityBin>,
}

impl CalibrationReport {
    pub fn from_probs(
        probs: &[Vec<f64>],
        labels: &[usize],
        num_bins: usize,
        method: &str,
        dataset: &str,
    ) -> Result<Self> {
        let (e, bins) = ece(probs, labels, num_bins)?;
        Ok(Self {
            method: method.into(),
            dataset: dataset.into(),
            n: probs.len(),
            accuracy: accuracy(probs, labels),
            nll: nll(probs, labels)?,
            ece: e,
            num_bins,
            bins,
        })
    }

    pub const CSV_HEADER: &'static str = "method,dataset,n,accuracy,nll,ece,num_bins";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.method, self.dataset, self.n, self.accuracy, self.nll, self.ece, self.num_bins
        )
    }

    /// Plot-ready reliability table: `bin_center,confidence,accuracy,count`.
    pub fn write_reliability_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "bin_center,confidence,accuracy,count")?;
        for b in &self.bins {
            writeln!(
                f,
                "{},{},{},{}",
                0.5 * (b.lo + b.hi),
                b.mean_confidence,
                b.accuracy,
                b.count
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// One line of a prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub example_id: usize,
    pub mean_logits: Vec<f64>,
    pub probs_map: Vec<f64>,
    pub probs_bayes: Vec<f64>,
    pub label: usize,
}

pub fn dump_rows(preds: &[Prediction], labels: &[usize]) -> Vec<DumpRow> {
    preds
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (p, &y))| DumpRow {
            example_id: i,
            mean_logits: p.mean_logits.clone(),
            probs_map: p.probs_map.clone(),
            probs_bayes: p.probs_bayes.clone(),
            label: y,
        })
        .collect()
}

pub fn write_dump(path: &Path, rows: &[DumpRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Map,
    Bayes,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Map => "map",
            Method::Bayes => "bayes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

/// Scores one method's probabilities from a JSONL dump. Malformed rows are
/// reported and skipped.
pub fn evaluate_method(
    dump: &str,
    method: Method,
    num_bins: usize,
    dataset: &str,
) -> Result<(CalibrationReport, Vec<RowError>)> {
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let mut errors = Vec::new();
    let mut classes: Option<usize> = None;
    for (i, line) in dump.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: DumpRow = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                errors.push(RowError {
                    line: i + 1,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let p = match method {
            Method::Map => row.probs_map,
            Method::Bayes => row.probs_bayes,
        };
        let k = *classes.get_or_insert(p.len());
        let sum: f64 = p.iter().sum();
        let problem = if p.len() != k || k == 0 {
            Some(format!("expected {k} probabilities, got {}", p.len()))
        } else if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
            Some("probabilities must be finite and non-negative".to_string())
        } else if (sum - 1.0).abs() > 1e-6 {
            Some(format!("probabilities sum to {sum}"))
        } else if row.label >= k {
            Some(format!("label {} out of range", row.label))
        } else {
            None
        };
        match problem {
            Some(message) => errors.push(RowError { line: i + 1, message }),
            None => {
                probs.push(p);
                labels.push(row.label);
            }
        }
    }
    if probs.is_empty() {
        return Err(Error::Data("prediction dump has no valid rows".into()));
    }
    let report = CalibrationReport::from_probs(&probs, &labels, num_bins, method.name(), dataset)?;
    Ok((report, errors))
}

/// Zero-based half-open layer ranges of the four quarters, with boundaries
/// `⌊L/4⌋`, `⌊L/2⌋`, `⌊3L/4⌋`.
pub fn quarter_ranges(num_layers: usize) -> [std::ops::Range<usize>; 4] {
    let b = [0, num_layers / 4, num_layers / 2, 3 * num_layers / 4, num_layers];
    [b[0]..b[1], b[1]..b[2], b[2]..b[3], b[3]..b[4]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPlan {
    /// Quarters (0-based) to exclude, one run each, in order.
    pub excluded: Vec<usize>,
    /// Also run with nothing excluded.
    pub include_control: bool,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            excluded: vec![0, 1, 2, 3],
            include_control: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `Q1`..`Q4`, or `control`.
    pub label: String,
    /// Zero-based excluded quarter; `None` for the control.
    pub excluded_quarter: Option<usize>,
    /// 1-based inclusive layer range left untreated.
    pub excluded_layers: Option<(usize, usize)>,
    pub treated_experts: usize,
    pub report: CalibrationReport,
}

/// Re-runs the Bayesian predictive with one layer quarter left at MAP.
pub fn run_ablation(
    model: &MoEModel,
    post: &LaplacePosterior,
    data: &Dataset,
    plan: &AblationPlan,
    mc: &McConfig,
    num_bins: usize,
) -> Result<Vec<AblationRow>> {
    let ranges = quarter_ranges(model.config().num_layers);
    let dataset = data.split.name();
    let mut rows = Vec::new();
    if plan.include_control {
        let preds = predict_dataset(model, post, data, mc)?;
        let probs: Vec<Vec<f64>> = preds.into_iter().map(|p| p.probs_bayes).collect();
        rows.push(AblationRow {
            label: "control".into(),
            excluded_quarter: None,
            excluded_layers: None,
            treated_experts: post.treated().len(),
            report: CalibrationReport::from_probs(&probs, &data.labels, num_bins, "bayes", dataset)?,
        });
    }
    for &q in &plan.excluded {
        let range = ranges
            .get(q)
            .ok_or_else(|| Error::config("ablate.excluded", format!("quarter {q} out of 0..4")))?
            .clone();
        let treated: BTreeSet<ExpertId> = post
            .treated()
            .iter()
            .filter(|id| !range.contains(&id.layer))
            .copied()
            .collect();
        let sub = post.with_treated(treated)?;
        let preds = predict_dataset(model, &sub, data, mc)?;
        let probs: Vec<Vec<f64>> = preds.into_iter().map(|p| p.probs_bayes).collect();
        let excluded_layers = (!range.is_empty()).then(|| (range.start + 1, range.end));
        rows.push(AblationRow {
            label: format!("Q{}", q + 1),
            excluded_quarter: Some(q),
            excluded_layers,
            treated_experts: sub.treated().len(),
            report: CalibrationReport::from_probs(&probs, &data.labels, num_bins, "bayes", dataset)?,
        });
    }
    Ok(rows)
}
