//! Multi-seed reproduction runs and their aggregate tables.
//!
//! One seed runs the whole pipeline: data, training, curvature, `λ` by
//! evidence and by validation NLL, MAP and Bayesian reports on the test and
//! shifted splits, and the quarter ablation on the shifted split. Reports
//! carry no wall-clock fields, so reruns are byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{run_ablation, AblationPlan, AblationRow, CalibrationReport};
use crate::config::{ExperimentConfig, LambdaMethod};
use crate::data::{generate, Split};
use crate::error::{Error, Result};
use crate::model::MoEModel;
use crate::parallel::map_indexed;
use crate::pipeline::{choose_lambda, evaluate_split, fit_curvature, initial_posterior};
use crate::train::train;

/// Seeds used by the reproduction script and the acceptance run.
pub const DEFAULT_SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Default,
    /// Short training and small splits, for a quick end-to-end check.
    Smoke,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Profile::Default),
            "smoke" => Ok(Profile::Smoke),
            _ => Err(Error::config(
                "profile",
                format!("expected default or smoke, got `{s}`"),
            )),
        }
    }

    pub fn apply(self, cfg: &ExperimentConfig) -> ExperimentConfig {
        let mut c = cfg.clone();
        if self == Profile::Smoke {
            c.train.steps = 300;
            c.data.n_train = 300;
            c.data.n_val = 200;
            c.data.n_test = 200;
            c.data.n_ood = 200;
            c.mc.samples = 256;
            c.laplace.steps = 200;
        }
        c
    }
}

/// Everything one seed contributes to the aggregate tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub config_hash: String,
    pub best_step: usize,
    pub lambda_evidence: f64,
    pub lambda_lpo: f64,
    /// MAP, Bayesian (evidence `λ`) and Bayesian (validation `λ`), on test then OOD.
    pub reports: Vec<CalibrationReport>,
    pub ablation: Vec<AblationRow>,
    /// Control ablation row equals the Bayesian OOD report exactly.
    pub control_matches: bool,
}

impl SeedRun {
    pub fn report(&self, method: &str, dataset: &str) -> Option<&CalibrationReport> {
        self.reports.iter().find(|r| r.method == method && r.dataset == dataset)
    }
}

pub const BAYES_LPO: &str = "bayes_lpo";

fn stage<T>(seed: u64, stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        seed,
        stage,
        source: Box::new(e),
    })
}

pub fn run_seed(base: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    let cfg = ExperimentConfig { seed, ..base.clone() }.resolved();
    stage(seed, "config", cfg.validate())?;
    let data = stage(seed, "gen-data", generate(&cfg.data))?;
    let split = |s: Split| {
        data.split(s).ok_or_else(|| Error::Stage {
            seed,
            stage: "gen-data",
            source: Box::new(Error::Data(format!("generator produced no {} split", s.name()))),
        })
    };
    let (tr, va, te, ood) = (
        split(Split::Train)?,
        split(Split::Val)?,
        split(Split::Test)?,
        split(Split::Ood)?,
    );

    let init = stage(seed, "train", MoEModel::init(cfg.model.clone()))?;
    let trained = train(&init, tr, va, &cfg.train).map_err(|f| Error::Stage {
        seed,
        stage: "train",
        source: Box::new(f.error),
    })?;
    let model = trained.model;

    let curv = stage(seed, "fit-laplace", fit_curvature(&model, tr, &cfg))?;
    let post = stage(seed, "fit-laplace", initial_posterior(&model, curv, &cfg))?;
    let (p_ev, c_ev) = stage(
        seed,
        "fit-laplace",
        choose_lambda(&model, &post, tr, va, &cfg, LambdaMethod::Evidence, None),
    )?;
    let (p_lpo, c_lpo) = stage(
        seed,
        "fit-laplace",
        choose_lambda(&model, &post, tr, va, &cfg, LambdaMethod::Lpo, None),
    )?;

    let mut reports = Vec::new();
    let mut ood_bayes = None;
    for d in [te, ood] {
        let ev = stage(seed, "evaluate", evaluate_split(&model, &p_ev, d, &cfg))?;
        let lpo = stage(seed, "evaluate", evaluate_split(&model, &p_lpo, d, &cfg))?;
        let mut lpo_report = lpo.bayes;
        lpo_report.method = BAYES_LPO.into();
        if d.split == Split::Ood {
            ood_bayes = Some(ev.bayes.clone());
        }
        reports.extend([ev.map, ev.bayes, lpo_report]);
    }

    let plan = AblationPlan {
        excluded: vec![0, 1, 2, 3],
        include_control: true,
    };
    let ablation = stage(
        seed,
        "ablate",
        run_ablation(&model, &p_ev, ood, &plan, &cfg.mc, cfg.eval.num_bins),
    )?;
    let control_matches = ablation
        .iter()
        .find(|r| r.excluded_quarter.is_none())
        .zip(ood_bayes.as_ref())
        .is_some_and(|(c, b)| &c.report == b);

    Ok(SeedRun {
        seed,
        config_hash: cfg.hash(),
        best_step: trained.best_step,
        lambda_evidence: c_ev.lambda,
        lambda_lpo: c_lpo.lambda,
        reports,
        ablation,
        control_matches,
    })
}

/// Runs every seed. With `parallel_seeds` the seeds are spread over the
/// worker pool; results keep seed order either way.
pub fn run_seeds(base: &ExperimentConfig, seeds: &[u64], parallel_seeds: bool) -> Result<Vec<SeedRun>> {
    let results: Vec<Result<SeedRun>> = if parallel_seeds {
        map_indexed(seeds.len(), |i| run_seed(base, seeds[i]))
    } else {
        seeds.iter().map(|&s| run_seed(base, s)).collect()
    };
    results.into_iter().collect()
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }

    fn show(&self, scale: f64) -> String {
        format!("{:.2} ± {:.2}", self.mean * scale, self.std * scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCell {
    pub method: String,
    pub dataset: String,
    pub accuracy: MeanStd,
    pub ece: MeanStd,
    pub nll: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub seed: u64,
    pub lambda_evidence: f64,
    pub lambda_lpo: f64,
    pub test_nll_evidence: f64,
    pub test_nll_lpo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub excluded_layers: Option<(usize, usize)>,
    pub ece: MeanStd,
    pub nll: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds: Vec<u64>,
    pub calibration: Vec<CalibrationCell>,
    pub lambda: Vec<LambdaRow>,
    /// Seeds where the validation-selected `λ` has test NLL at most the
    /// evidence-selected one.
    pub lpo_wins: usize,
    /// Seeds where the Bayesian OOD ECE is below the MAP OOD ECE.
    pub ood_ece_wins: usize,
    pub ablation: Vec<AblationCell>,
    /// Quarter labels sorted by mean ECE, lowest first.
    pub ablation_ece_order: Vec<String>,
    pub control_matches_all: bool,
}

pub fn summarize(runs: &[SeedRun]) -> Summary {
    let mut calibration = Vec::new();
    for dataset in [Split::Test.name(), Split::Ood.name()] {
        for method in ["map", "bayes", BAYES_LPO] {
            let pick = |f: fn(&CalibrationReport) -> f64| -> Vec<f64> {
                runs.iter().filter_map(|r| r.report(method, dataset)).map(f).collect()
            };
            calibration.push(CalibrationCell {
                method: method.into(),
                dataset: dataset.into(),
                accuracy: MeanStd::of(&pick(|r| r.accuracy)),
                ece: MeanStd::of(&pick(|r| r.ece)),
                nll: MeanStd::of(&pick(|r| r.nll)),
            });
        }
    }
    let test = Split::Test.name();
    let ood = Split::Ood.name();
    let nll_of = |r: &SeedRun, m: &str| r.report(m, test).map_or(f64::NAN, |x| x.nll);
    let lambda: Vec<LambdaRow> = runs
        .iter()
        .map(|r| LambdaRow {
            seed: r.seed,
            lambda_evidence: r.lambda_evidence,
            lambda_lpo: r.lambda_lpo,
            test_nll_evidence: nll_of(r, "bayes"),
            test_nll_lpo: nll_of(r, BAYES_LPO),
        })
        .collect();
    let lpo_wins = lambda.iter().filter(|l| l.test_nll_lpo <= l.test_nll_evidence).count();
    let ood_ece_wins = runs
        .iter()
        .filter(|r| match (r.report("bayes", ood), r.report("map", ood)) {
            (Some(b), Some(m)) => b.ece < m.ece,
            _ => false,
        })
        .count();

    let mut ablation = Vec::new();
    if let Some(first) = runs.first() {
        for row in &first.ablation {
            let pick = |f: fn(&AblationRow) -> f64| -> Vec<f64> {
                runs.iter()
                    .filter_map(|r| r.ablation.iter().find(|a| a.label == row.label))
                    .map(f)
                    .collect()
            };
            ablation.push(AblationCell {
                label: row.label.clone(),
                excluded_layers: row.excluded_layers,
                ece: MeanStd::of(&pick(|a| a.report.ece)),
                nll: MeanStd::of(&pick(|a| a.report.nll)),
            });
        }
    }
    let mut order: Vec<&AblationCell> = ablation.iter().filter(|a| a.label != "control").collect();
    order.sort_by(|a, b| a.ece.mean.total_cmp(&b.ece.mean));
    Summary {
        seeds: runs.iter().map(|r| r.seed).collect(),
        calibration,
        lambda,
        lpo_wins,
        ood_ece_wins,
        ablation_ece_order: order.iter().map(|a| a.label.clone()).collect(),
        ablation,
        control_matches_all: !runs.is_empty() && runs.iter().all(|r| r.control_matches),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

/// Markdown rendering of the three aggregate tables. Percentages for
/// accuracy and ECE, raw values for NLL.
pub fn render_markdown(s: &Summary) -> String {
    let mut md = String::new();
    let n = s.seeds.len();
    let _ = writeln!(md, "# Reproduction summary\n");
    let _ = writeln!(md, "Seeds: {:?} (mean ± sample std over {n} seeds)\n", s.seeds);
    let _ = writeln!(md, "## Calibration\n");
    let _ = writeln!(md, "| split | method | ACC (%) | ECE (%) | NLL |");
    let _ = writeln!(md, "|---|---|---|---|---|");
    for c in &s.calibration {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {:.4} ± {:.4} |",
            c.dataset,
            c.method,
            c.accuracy.show(100.0),
            c.ece.show(100.0),
            c.nll.mean,
            c.nll.std
        );
    }
    let _ = writeln!(md, "\nBayesian OOD ECE below MAP on {}/{n} seeds.\n", s.ood_ece_wins);
    let _ = writeln!(md, "## Prior precision: evidence vs validation NLL\n");
    let _ = writeln!(
        md,
        "| seed | λ evidence | λ validation | test NLL evidence | test NLL validation |"
    );
    let _ = writeln!(md, "|---|---|---|---|---|");
    for l in &s.lambda {
        let _ = writeln!(
            md,
            "| {} | {:.4e} | {:.4e} | {:.4} | {:.4} |",
            l.seed, l.lambda_evidence, l.lambda_lpo, l.test_nll_evidence, l.test_nll_lpo
        );
    }
    let _ = writeln!(
        md,
        "\nValidation-selected λ at least as good on test NLL for {}/{n} seeds.\n",
        s.lpo_wins
    );
    let _ = writeln!(md, "## Quarter ablation (OOD split)\n");
    let _ = writeln!(md, "| excluded | layers | ECE (%) | NLL |");
    let _ = writeln!(md, "|---|---|---|---|");
    for a in &s.ablation {
        let layers = a
            .excluded_layers
            .map_or("-".to_string(), |(lo, hi)| format!("{lo}..{hi}"));
        let _ = writeln!(
            md,
            "| {} | {} | {} | {:.4} ± {:.4} |",
            a.label,
            layers,
            a.ece.show(100.0),
            a.nll.mean,
            a.nll.std
        );
    }
    let _ = writeln!(md, "\nECE order (lowest first): {}", s.ablation_ece_order.join(" < "));
    let _ = writeln!(
        md,
        "Control equals the standard Bayesian report on every seed: {}",
        s.control_matches_all
    );
    md
}

/// Writes per-seed JSON, the summary JSON, three CSV tables and a markdown
/// report into `dir`. Returns the file names written, in order.
pub fn write_reports(dir: &Path, runs: &[SeedRun], summary: &Summary) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        write_text(&dir.join(&name), &text)?;
        names.push(name);
        Ok(())
    };
    for r in runs {
        put(format!("seed_{}.json", r.seed), serde_json::to_string_pretty(r)? + "\n")?;
    }
    put("summary.json".into(), serde_json::to_string_pretty(summary)? + "\n")?;

    let mut csv = String::from("method,dataset,acc_mean,acc_std,ece_mean,ece_std,nll_mean,nll_std\n");
    for c in &summary.calibration {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            c.method, c.dataset, c.accuracy.mean, c.accuracy.std, c.ece.mean, c.ece.std, c.nll.mean, c.nll.std
        );
    }
    put("calibration_table.csv".into(), csv)?;

    let mut csv = String::from("seed,lambda_evidence,lambda_lpo,test_nll_evidence,test_nll_lpo\n");
    for l in &summary.lambda {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            l.seed, l.lambda_evidence, l.lambda_lpo, l.test_nll_evidence, l.test_nll_lpo
        );
    }
    put("lambda_table.csv".into(), csv)?;

    let mut csv = String::from("excluded,first_layer,last_layer,ece_mean,ece_std,nll_mean,nll_std\n");
    for a in &summary.ablation {
        let (lo, hi) = a.excluded_layers.map_or((String::new(), String::new()), |(lo, hi)| {
            (lo.to_string(), hi.to_string())
        });
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            a.label, lo, hi, a.ece.mean, a.ece.std, a.nll.mean, a.nll.std
        );
    }
    put("ablation_table.csv".into(), csv)?;
    put("summary.md".into(), render_markdown(summary))?;
    Ok(names)
}
