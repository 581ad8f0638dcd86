//! Subcommand bodies. Each loads the experiment config, checks artifact
//! provenance against it and writes its outputs under `--out-dir`.

use std::path::{Path, PathBuf};

use moe_laplace::calibration::{run_ablation, write_dump, AblationPlan, CalibrationReport};
use moe_laplace::checkpoint::{
    expect_config, load_model, load_posterior, manifest_path, save_model, save_posterior, Manifest,
};
use moe_laplace::config::{ExperimentConfig, LambdaMethod, Paths, TreatSpec};
use moe_laplace::data::{generate, read_jsonl, write_jsonl, Dataset, FeatureHasher, Split};
use moe_laplace::laplace::LaplacePosterior;
use moe_laplace::model::MoEModel;
use moe_laplace::pipeline::{choose_lambda, evaluate_split, fit_curvature, initial_posterior};
use moe_laplace::repro::{render_markdown, run_seeds, summarize, write_reports, Profile, DEFAULT_SEEDS};
use moe_laplace::train::{train as train_model, write_loss_curve};
use moe_laplace::{Error, Result};
use serde_json::json;

use crate::Common;

const MODEL: &str = "model";
const PARTIAL: &str = "model_partial";
const POSTERIOR: &str = "posterior";

struct Ctx {
    cfg: ExperimentConfig,
    hash: String,
    paths: Paths,
}

fn context(c: &Common) -> Result<Ctx> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg = cfg.with_overrides(&c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(Ctx {
        hash: cfg.hash(),
        paths: cfg.paths.under(&c.out_dir),
        cfg,
    })
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p)?;
    Ok(())
}

fn split_path(ctx: &Ctx, split: Split) -> PathBuf {
    ctx.paths.data.join(format!("{}.jsonl", split.name()))
}

fn read_split(ctx: &Ctx, split: Split) -> Result<Dataset> {
    let path = split_path(ctx, split);
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found (run gen-data first)", path.display()),
        )));
    }
    let hasher = FeatureHasher::new(ctx.cfg.model.d_input, 3);
    let d = read_jsonl(&path, split, Some(&hasher))?;
    d.validate(ctx.cfg.model.d_input, ctx.cfg.model.num_classes)?;
    Ok(d)
}

fn read_optional(ctx: &Ctx, split: Split) -> Result<Dataset> {
    if split_path(ctx, split).exists() {
        read_split(ctx, split)
    } else {
        Dataset::new(Vec::new(), Vec::new(), split)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn gen_data(c: &Common) -> Result<()> {
    let ctx = context(c)?;
    let data = generate(&ctx.cfg.data)?;
    mkdir(&ctx.paths.data)?;
    for d in &data.splits {
        let path = split_path(&ctx, d.split);
        write_jsonl(&path, d)?;
        println!("wrote {} ({} rows)", path.display(), d.len());
    }
    write_json(
        &ctx.paths.data.join("dataset.json"),
        &json!({
            "config_hash": ctx.hash,
            "spec": data.spec,
            "class_means": data.class_means,
            "ood_means": data.ood_means,
        }),
    )
}

pub fn train(c: &Common) -> Result<()> {
    let ctx = context(c)?;
    let tr = read_split(&ctx, Split::Train)?;
    let va = read_optional(&ctx, Split::Val)?;
    let init = MoEModel::init(ctx.cfg.model.clone())?;
    mkdir(&ctx.paths.checkpoints)?;
    mkdir(&ctx.paths.reports)?;
    write_json(&ctx.paths.checkpoints.join("config.json"), &ctx.cfg)?;
    match train_model(&init, &tr, &va, &ctx.cfg.train) {
        Ok(out) => {
            let m = save_model(&ctx.paths.checkpoints, MODEL, &out.model, &ctx.hash)?;
            write_loss_curve(&ctx.paths.reports.join("loss_curve.csv"), &out.curve)?;
            println!(
                "trained {} steps (best step {}), wrote {} [{}]",
                ctx.cfg.train.steps,
                out.best_step,
                manifest_path(&ctx.paths.checkpoints, MODEL).display(),
                m.blob_sha256
            );
            Ok(())
        }
        Err(fail) => {
            save_model(&ctx.paths.checkpoints, PARTIAL, &fail.last_good.model, &ctx.hash)?;
            write_loss_curve(&ctx.paths.reports.join("loss_curve.csv"), &fail.last_good.curve)?;
            eprintln!(
                "training failed; last good model written to {}",
                manifest_path(&ctx.paths.checkpoints, PARTIAL).display()
            );
            Err(fail.error)
        }
    }
}

fn load_checked_model(ctx: &Ctx) -> Result<(Manifest, MoEModel)> {
    let (manifest, model) = load_model(&manifest_path(&ctx.paths.checkpoints, MODEL))?;
    expect_config(&manifest, &ctx.hash)?;
    Ok((manifest, model))
}

fn load_checked(ctx: &Ctx) -> Result<(MoEModel, LaplacePosterior)> {
    let (mm, model) = load_checked_model(ctx)?;
    let (pm, post, _) = load_posterior(&manifest_path(&ctx.paths.checkpoints, POSTERIOR))?;
    expect_config(&pm, &ctx.hash)?;
    if pm.parent.as_deref() != Some(mm.blob_sha256.as_str()) {
        return Err(Error::Provenance {
            expected: mm.blob_sha256,
            found: pm.parent.unwrap_or_else(|| "<none>".into()),
        });
    }
    Ok((model, post))
}

pub fn fit_laplace(c: &Common, lpo: bool, lambda_fixed: Option<f64>, treat: Option<&str>) -> Result<()> {
    let ctx = context(c)?;
    let (mm, model) = load_checked_model(&ctx)?;
    let tr = read_split(&ctx, Split::Train)?;
    let va = read_optional(&ctx, Split::Val)?;
    // Command-line choices shape this artifact only; the config hash stays
    // that of the shared experiment config.
    let mut cfg = ctx.cfg.clone();
    if let Some(t) = treat {
        cfg.laplace.treat = TreatSpec::parse(t)?;
    }
    let method = match (lambda_fixed, lpo) {
        (Some(l), _) => {
            if !(l > 0.0) || !l.is_finite() {
                return Err(Error::config("--lambda-fixed", "must be a positive number"));
            }
            LambdaMethod::Fixed
        }
        (None, true) => LambdaMethod::Lpo,
        (None, false) => cfg.laplace.method,
    };
    let curv = fit_curvature(&model, &tr, &cfg)?;
    for w in &curv.warnings {
        eprintln!("warning: {w}");
    }
    let post = initial_posterior(&model, curv, &cfg)?;
    let (tuned, choice) = choose_lambda(&model, &post, &tr, &va, &cfg, method, lambda_fixed)?;
    if let Some(s) = &choice.search {
        if s.low_confidence {
            eprintln!(
                "warning: validation split has only {} examples; λ choice is low confidence",
                va.len()
            );
        }
    }
    save_posterior(
        &ctx.paths.checkpoints,
        POSTERIOR,
        &tuned,
        &ctx.hash,
        Some(mm.blob_sha256),
        json!({ "treat": cfg.laplace.treat, "choice": choice }),
    )?;
    println!(
        "λ = {} ({:?}), {} experts treated, wrote {}",
        tuned.lambda(),
        method,
        tuned.treated().len(),
        manifest_path(&ctx.paths.checkpoints, POSTERIOR).display()
    );
    Ok(())
}

fn report_line(r: &CalibrationReport) -> String {
    format!(
        "{:<5} {:<6} n={:<5} acc={:.4} nll={:.4} ece={:.4}",
        r.dataset, r.method, r.n, r.accuracy, r.nll, r.ece
    )
}

pub fn evaluate(c: &Common, splits: &[String]) -> Result<()> {
    let ctx = context(c)?;
    let (model, post) = load_checked(&ctx)?;
    let splits: Vec<Split> = if splits.is_empty() {
        let mut v = vec![Split::Test];
        if split_path(&ctx, Split::Ood).exists() {
            v.push(Split::Ood);
        }
        v
    } else {
        splits.iter().map(|s| Split::parse(s)).collect::<Result<_>>()?
    };
    mkdir(&ctx.paths.reports)?;
    for split in splits {
        let data = read_split(&ctx, split)?;
        let ev = evaluate_split(&model, &post, &data, &ctx.cfg)?;
        let name = split.name();
        for r in [&ev.map, &ev.bayes] {
            write_json(&ctx.paths.reports.join(format!("{name}_{}.json", r.method)), r)?;
            r.write_reliability_csv(&ctx.paths.reports.join(format!("reliability_{name}_{}.csv", r.method)))?;
            println!("{}", report_line(r));
        }
        write_dump(&ctx.paths.reports.join(format!("predictions_{name}.jsonl")), &ev.rows)?;
    }
    Ok(())
}

pub fn ablate(c: &Common, split: Option<&str>, include_control: bool) -> Result<()> {
    let ctx = context(c)?;
    let (model, post) = load_checked(&ctx)?;
    let split = match split {
        Some(s) => Split::parse(s)?,
        None if split_path(&ctx, Split::Ood).exists() => Split::Ood,
        None => Split::Test,
    };
    if model.config().num_layers < 4 {
        eprintln!("warning: with fewer than 4 layers some quarters are empty");
    }
    let data = read_split(&ctx, split)?;
    let plan = AblationPlan {
        include_control,
        ..AblationPlan::default()
    };
    let rows = run_ablation(&model, &post, &data, &plan, &ctx.cfg.mc, ctx.cfg.eval.num_bins)?;
    mkdir(&ctx.paths.reports)?;
    let name = split.name();
    write_json(&ctx.paths.reports.join(format!("ablation_{name}.json")), &rows)?;
    let mut csv = String::from("excluded,first_layer,last_layer,treated_experts,accuracy,ece,nll\n");
    for r in &rows {
        let (lo, hi) = r.excluded_layers.map_or((String::new(), String::new()), |(lo, hi)| {
            (lo.to_string(), hi.to_string())
        });
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label, lo, hi, r.treated_experts, r.report.accuracy, r.report.ece, r.report.nll
        ));
        println!(
            "{:<8} treated={:<3} ece={:.4} nll={:.4}",
            r.label, r.treated_experts, r.report.ece, r.report.nll
        );
    }
    std::fs::write(ctx.paths.reports.join(format!("ablation_{name}.csv")), csv)?;
    Ok(())
}

pub fn repro(c: &Common, seeds: &[u64], profile: &str, parallel_seeds: bool) -> Result<()> {
    let ctx = context(c)?;
    let base = Profile::parse(profile)?.apply(&ctx.cfg);
    let seeds: Vec<u64> = if seeds.is_empty() {
        DEFAULT_SEEDS.to_vec()
    } else {
        seeds.to_vec()
    };
    let runs = run_seeds(&base, &seeds, parallel_seeds)?;
    let summary = summarize(&runs);
    let files = write_reports(&ctx.paths.reports, &runs, &summary)?;
    print!("{}", render_markdown(&summary));
    println!("wrote {} files to {}", files.len(), ctx.paths.reports.display());
    Ok(())
}
