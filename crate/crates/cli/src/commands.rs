//! The five subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use deepjoint::autodiff::GradCheckReport;
use deepjoint::data::{load_dataset, split_indices, split_weekday_weekend, write_dataset, Dataset};
use deepjoint::eval::{evaluate, robustness_harness, HarnessOptions, MetricReport, RobustnessReport};
use deepjoint::synthgen::{generate, shift_regime, RegimeConfig};
use deepjoint::training::{gradient_check_suite, sub_seed, train as fit, TrainConfig, TrainedModel, Variant};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig, GroupSource};
use crate::plot::c_index_svg;
use crate::report::{
    create_dir, delta_table, fingerprint, horizon_table, variant_table, write_json, write_text, Metric, RunManifest,
    VERSION,
};
use crate::{CliError, CliResult};

const TEST_SPLIT_STREAM: u64 = 20;
const BOOTSTRAP_STREAM: u64 = 21;
const HARNESS_STREAM: u64 = 22;

pub const LONGITUDINAL_FILE: &str = "longitudinal.csv";
pub const OUTCOMES_FILE: &str = "outcomes.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

fn write_data(ds: &Dataset, dir: &Path) -> CliResult<()> {
    create_dir(dir)?;
    write_dataset(ds, &dir.join(LONGITUDINAL_FILE), &dir.join(OUTCOMES_FILE))?;
    Ok(())
}

fn load_files(longitudinal: &Path, outcomes: &Path) -> CliResult<Dataset> {
    for path in [longitudinal, outcomes] {
        std::fs::metadata(path).map_err(|e| CliError::io(path, e))?;
    }
    Ok(load_dataset(longitudinal, outcomes)?)
}

pub fn read_data(dir: &Path) -> CliResult<Dataset> {
    load_files(&dir.join(LONGITUDINAL_FILE), &dir.join(OUTCOMES_FILE))
}

// ---------------------------------------------------------------------------
// synth

#[derive(Serialize)]
struct SynthManifest<'a> {
    version: &'a str,
    n: usize,
    seed: u64,
    regime: &'a RegimeConfig,
    dataset_fingerprint: String,
}

pub fn load_regime(path: &Path) -> CliResult<RegimeConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let regime: RegimeConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    regime.validate()?;
    Ok(regime)
}

/// Writes a generated cohort and its manifest to `out`.
pub fn synth(regime: &RegimeConfig, n: usize, out: &Path) -> CliResult<Dataset> {
    if n == 0 {
        return Err(CliError::Config("the number of patients must be at least 1".into()));
    }
    let ds = generate(n, regime)?;
    write_data(&ds, out)?;
    let manifest =
        SynthManifest { version: VERSION, n, seed: regime.seed, regime, dataset_fingerprint: fingerprint(&ds)? };
    write_json(&out.join("manifest.json"), &manifest)?;
    log::info!("wrote {n} patients to {}", out.display());
    Ok(ds)
}

// ---------------------------------------------------------------------------
// train / evaluate

pub fn load_data(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    match &cfg.data {
        DataSource::Synth { n, regime } => Ok(generate(*n, regime)?),
        DataSource::Files { longitudinal, outcomes } => load_files(longitudinal, outcomes),
    }
}

/// Patient-level train/test split derived from the master seed.
pub fn split_train_test(cfg: &ExperimentConfig, ds: &Dataset) -> CliResult<(Dataset, Dataset)> {
    let (tr, te) = split_indices(ds.len(), 1.0 - cfg.test_fraction, sub_seed(cfg.seed, TEST_SPLIT_STREAM));
    if tr.is_empty() || te.is_empty() {
        return Err(deepjoint::Error::Data(format!("{} patients cannot be split into train and test", ds.len())).into());
    }
    let pick = |ix: &[usize]| ds.with_records(ix.iter().map(|&i| ds.records[i].clone()).collect());
    Ok((pick(&tr), pick(&te)))
}

/// Validation loss at the restored epoch of the last stage that ran.
fn selection_score(model: &TrainedModel) -> f64 {
    let h = &model.history;
    let stage = if h.stage_epochs[1] > 0 { 2 } else { 1 };
    let best = h.best_epoch[stage - 1];
    h.epochs
        .iter()
        .find(|e| usize::from(e.stage) == stage && e.epoch == best)
        .map_or(f64::INFINITY, |e| e.validation)
}

fn train_variant(cfg: &ExperimentConfig, variant: Variant, ds: &Dataset, dir: &Path) -> CliResult<TrainedModel> {
    let base = cfg.train_config(variant);
    if !cfg.grid.search {
        return Ok(fit(ds, &base)?);
    }
    let candidates = cfg.grid.combinations(&base);
    log::info!("{variant}: searching {} configurations", candidates.len());
    let fitted: Vec<(TrainConfig, TrainedModel)> = candidates
        .into_par_iter()
        .map(|c| fit(ds, &c).map(|m| (c, m)))
        .collect::<Result<_, _>>()?;
    let mut rows = String::from("learning_rate,batch_size,alpha,theta,rnn_layers,hidden,head_layers,head_nodes,validation\n");
    for (c, m) in &fitted {
        rows.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            c.learning_rate,
            c.batch_size,
            c.alpha,
            c.theta,
            c.model.rnn_layers,
            c.model.hidden,
            c.model.head_layers,
            c.model.head_nodes,
            selection_score(m)
        ));
    }
    write_text(&dir.join("grid.csv"), &rows)?;
    // ties keep the earliest configuration
    let best = fitted
        .into_iter()
        .reduce(|a, b| if selection_score(&b.1) < selection_score(&a.1) { b } else { a })
        .expect("non-empty grid");
    Ok(best.1)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    pub evaluate_only: bool,
    pub plot: bool,
}

#[derive(Serialize)]
struct VariantReport<'a> {
    variant: &'a str,
    report: &'a MetricReport,
}

/// Bootstrap reports for each model on `test`, written under `out`.
pub fn evaluate_models(
    cfg: &ExperimentConfig,
    models: &[(String, TrainedModel)],
    test: &Dataset,
    out: &Path,
    plot: bool,
) -> CliResult<Vec<(String, MetricReport)>> {
    let reports: Vec<(String, MetricReport)> = models
        .par_iter()
        .map(|(name, model)| {
            let preds = model.predictions(test, &cfg.horizons)?;
            let report = evaluate(&preds, cfg.n_bootstrap, sub_seed(cfg.seed, BOOTSTRAP_STREAM))?;
            Ok((name.clone(), report))
        })
        .collect::<CliResult<_>>()?;
    for (name, report) in &reports {
        let dir = out.join(name);
        write_json(&dir.join("report.json"), report)?;
        write_text(&dir.join("report.csv"), &horizon_table(report)?)?;
    }
    let listed: Vec<VariantReport> = reports.iter().map(|(v, r)| VariantReport { variant: v, report: r }).collect();
    write_json(&out.join("report.json"), &listed)?;
    for metric in [Metric::CIndex, Metric::Brier] {
        write_text(&out.join(format!("{}.csv", metric.name())), &variant_table(&reports, metric, &cfg.horizons)?)?;
    }
    let svg = out.join("c_index.svg");
    if plot {
        write_text(&svg, &c_index_svg(&reports))?;
    } else if svg.exists() {
        std::fs::remove_file(&svg).map_err(|e| CliError::io(&svg, e))?;
    }
    Ok(reports)
}

/// Trains every configured variant on the training split, then evaluates
/// on the held-out split. With `evaluate_only` existing checkpoints are
/// loaded instead.
pub fn train(cfg: &ExperimentConfig, opts: RunOptions) -> CliResult<Vec<(String, MetricReport)>> {
    cfg.validate()?;
    let started = Instant::now();
    let out = cfg.out().to_path_buf();
    let ds = load_data(cfg)?;
    let (train_ds, test_ds) = split_train_test(cfg, &ds)?;
    write_data(&test_ds, &out.join("test"))?;

    let models: Vec<(String, TrainedModel)> = cfg
        .variants
        .par_iter()
        .map(|&variant| {
            let dir = out.join(variant.name());
            let path = dir.join(CHECKPOINT_FILE);
            let model = if opts.evaluate_only {
                if !path.exists() {
                    return Err(CliError::Config(format!(
                        "--evaluate-only needs an existing checkpoint at {}",
                        path.display()
                    )));
                }
                TrainedModel::load(&path)?
            } else {
                let model = train_variant(cfg, variant, &train_ds, &dir)?;
                create_dir(&dir)?;
                model.save(&path)?;
                write_text(&dir.join("history.csv"), &model.history.to_csv()?)?;
                log::info!("{variant}: stage epochs {:?}", model.history.stage_epochs);
                model
            };
            Ok((variant.name().to_string(), model))
        })
        .collect::<CliResult<_>>()?;

    let manifest = RunManifest {
        version: VERSION.into(),
        command: if opts.evaluate_only { "train --evaluate-only" } else { "train" }.into(),
        config: cfg.clone(),
        dataset_fingerprint: fingerprint(&ds)?,
        n_patients: ds.len(),
        stage_epochs: models.iter().map(|(n, m)| (n.clone(), m.history.stage_epochs)).collect(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    evaluate_models(cfg, &models, &test_ds, &out, opts.plot)
}

/// Evaluates checkpoints on a test directory. Without explicit paths the
/// layout written by `train` under the output root is used.
pub fn evaluate_command(
    cfg: &ExperimentConfig,
    checkpoints: &[PathBuf],
    test_dir: Option<&Path>,
    plot: bool,
) -> CliResult<Vec<(String, MetricReport)>> {
    cfg.validate()?;
    let out = cfg.out().to_path_buf();
    let paths: Vec<PathBuf> = if checkpoints.is_empty() {
        cfg.variants.iter().map(|v| out.join(v.name()).join(CHECKPOINT_FILE)).collect()
    } else {
        checkpoints.to_vec()
    };
    let test = read_data(&test_dir.map_or_else(|| out.join("test"), Path::to_path_buf))?;
    let mut models = Vec::with_capacity(paths.len());
    for p in &paths {
        if !p.exists() {
            return Err(CliError::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
        }
        let m = TrainedModel::load(p)?;
        models.push((m.config.variant.name().to_string(), m));
    }
    evaluate_models(cfg, &models, &test, &out, plot)
}

// ---------------------------------------------------------------------------
// robustness

#[derive(Serialize)]
struct VariantRobustness<'a> {
    variant: &'a str,
    report: &'a RobustnessReport,
}

/// Group A (transfer source) and group B (in-domain) cohorts.
pub fn robustness_groups(cfg: &ExperimentConfig) -> CliResult<(Dataset, Dataset)> {
    match &cfg.robustness.groups {
        GroupSource::WeekdayWeekend => {
            let (weekday, weekend) = split_weekday_weekend(&load_data(cfg)?);
            Ok((weekend, weekday))
        }
        GroupSource::Regimes { regime, shift, n_a, n_b } => {
            let shifted = shift_regime(regime, shift)?;
            Ok((generate(*n_a, regime)?, generate(*n_b, &shifted)?))
        }
    }
}

pub fn robustness(cfg: &ExperimentConfig) -> CliResult<Vec<(String, RobustnessReport)>> {
    cfg.validate()?;
    let started = Instant::now();
    let out = cfg.out().join("robustness");
    let (a, b) = robustness_groups(cfg)?;
    let opts = HarnessOptions {
        horizons: cfg.horizons.clone(),
        n_bootstrap: cfg.n_bootstrap,
        train_fraction: cfg.robustness.train_fraction,
        oversample: cfg.robustness.oversample,
        seed: sub_seed(cfg.seed, HARNESS_STREAM),
    };
    let results: Vec<(String, RobustnessReport)> = cfg
        .variants
        .par_iter()
        .map(|&v| Ok((v.name().to_string(), robustness_harness(&a, &b, &cfg.train_config(v), &opts)?)))
        .collect::<CliResult<_>>()?;

    let manifest = RunManifest {
        version: VERSION.into(),
        command: "robustness".into(),
        config: cfg.clone(),
        dataset_fingerprint: format!("{}+{}", fingerprint(&a)?, fingerprint(&b)?),
        n_patients: a.len() + b.len(),
        stage_epochs: BTreeMap::new(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;

    let listed: Vec<VariantRobustness> =
        results.iter().map(|(v, r)| VariantRobustness { variant: v, report: r }).collect();
    write_json(&out.join("report.json"), &listed)?;
    let deltas: Vec<_> = results.iter().map(|(v, r)| (v.clone(), r.deltas.clone())).collect();
    let in_domain: Vec<_> = results.iter().map(|(v, r)| (v.clone(), r.in_domain.clone())).collect();
    let transfer: Vec<_> = results.iter().map(|(v, r)| (v.clone(), r.transfer.clone())).collect();
    for metric in [Metric::CIndex, Metric::Brier] {
        let m = metric.name();
        write_text(&out.join(format!("delta_{m}.csv")), &delta_table(&deltas, metric, &cfg.horizons)?)?;
        write_text(&out.join(format!("in_domain_{m}.csv")), &variant_table(&in_domain, metric, &cfg.horizons)?)?;
        write_text(&out.join(format!("transfer_{m}.csv")), &variant_table(&transfer, metric, &cfg.horizons)?)?;
    }
    Ok(results)
}

// ---------------------------------------------------------------------------
// gradcheck

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Finite-difference checks of every head loss and the combined loss.
pub fn gradcheck(seed: u64, out: Option<&Path>) -> CliResult<Vec<(String, GradCheckReport)>> {
    let reports = gradient_check_suite(seed, GRADCHECK_STEP, GRADCHECK_TOLERANCE)?;
    if let Some(dir) = out {
        let mut text = String::from("loss,block,max_rel_err,passed\n");
        for (loss, r) in &reports {
            for b in &r.blocks {
                text.push_str(&format!("{loss},{},{:e},{}\n", b.name, b.max_rel_err, b.passed));
            }
        }
        write_text(&dir.join("gradcheck.csv"), &text)?;
    }
    Ok(reports)
}

/// Fails when any block exceeded the tolerance.
pub fn gradcheck_verdict(reports: &[(String, GradCheckReport)]) -> CliResult<()> {
    let failed: Vec<&str> = reports.iter().filter(|(_, r)| !r.passed()).map(|(n, _)| n.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(format!("tolerance {GRADCHECK_TOLERANCE} exceeded by {}", failed.join(", "))))
    }
}
