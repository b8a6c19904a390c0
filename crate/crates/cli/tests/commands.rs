use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use deepjoint::synthgen::{RegimeConfig, RegimeOverrides};
use deepjoint::training::{ModelConfig, Variant};
use deepjoint_cli::commands::{self, RunOptions};
use deepjoint_cli::config::{DataSource, ExperimentConfig, GroupSource};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_deepjoint"));
    c.env("RUST_LOG", "warn");
    c
}

fn small(out: &Path, variants: Vec<Variant>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 3,
        variants,
        n_bootstrap: 20,
        out_dir: Some(out.to_path_buf()),
        data: DataSource::Synth { n: 200, regime: RegimeConfig::informative(3, 3) },
        ..ExperimentConfig::default()
    };
    cfg.train.max_epochs = 4;
    cfg.train.multitask_epochs = 2;
    cfg.train.batch_size = 50;
    cfg.train.model = ModelConfig { rnn_layers: 1, hidden: 5, head_layers: 1, head_nodes: 8 };
    cfg
}

#[test]
fn synth_is_reproducible_from_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let status = bin().args(["synth", "--n", "60", "--seed", seed, "--out"]).arg(&out).status().unwrap();
        assert!(status.success());
        (std::fs::read(out.join("longitudinal.csv")).unwrap(), std::fs::read(out.join("outcomes.csv")).unwrap())
    };
    let a = run("a", "4");
    assert_eq!(a, run("b", "4"));
    assert_ne!(a, run("c", "5"));
    assert_eq!(String::from_utf8(a.1).unwrap().lines().count(), 61);
}

#[test]
fn bad_input_maps_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| bin().args(args).current_dir(dir.path()).status().unwrap().code();
    assert_eq!(code(&["synth", "--n", "0"]), Some(2));
    assert_eq!(code(&["train", "--variant", "Nope"]), Some(2));
    assert_eq!(code(&["train", "--config", "missing.toml"]), Some(1));

    std::fs::write(dir.path().join("bad.toml"), "seed = 1\nbogus = 2\n").unwrap();
    assert_eq!(code(&["train", "--config", "bad.toml"]), Some(2));

    std::fs::write(dir.path().join("l.csv"), "patient_id,time_minutes,lab_name,value\np1,oops,lab00,1\n").unwrap();
    std::fs::write(dir.path().join("o.csv"), "patient_id,followup_days,event,admission_weekday,admission_hour\np1,3,1,2,9\n").unwrap();
    std::fs::write(
        dir.path().join("files.toml"),
        "[data]\nsource = \"files\"\nlongitudinal = \"l.csv\"\noutcomes = \"o.csv\"\n",
    )
    .unwrap();
    assert_eq!(code(&["train", "--config", "files.toml", "--out", "o"]), Some(3));
    std::fs::remove_file(dir.path().join("o.csv")).unwrap();
    assert_eq!(code(&["train", "--config", "files.toml", "--out", "o"]), Some(1));
}

#[test]
fn evaluate_only_reuses_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), vec![Variant::Last, Variant::DeepJointFeature]);
    cfg.horizons = vec![1.0];

    let err = commands::train(&cfg, RunOptions { evaluate_only: true, plot: false }).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    let first = commands::train(&cfg, RunOptions::default()).unwrap();
    let checkpoint = dir.path().join("Last").join(commands::CHECKPOINT_FILE);
    let stamp = std::fs::metadata(&checkpoint).unwrap().modified().unwrap();
    let again = commands::train(&cfg, RunOptions { evaluate_only: true, plot: false }).unwrap();
    assert_eq!(stamp, std::fs::metadata(&checkpoint).unwrap().modified().unwrap());
    assert_eq!(serde_json::to_string(&first).unwrap(), serde_json::to_string(&again).unwrap());

    let rows = std::fs::read_to_string(dir.path().join("Last/report.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);
    assert!(rows.lines().nth(1).unwrap().starts_with("1,"));
    let table = std::fs::read_to_string(dir.path().join("c_index.csv")).unwrap();
    assert_eq!(table.lines().next().unwrap(), "variant,1d_mean,1d_lo,1d_hi");
    assert!(dir.path().join("manifest.json").exists());

    let evaluated = commands::evaluate_command(&cfg, &[], None, false).unwrap();
    assert_eq!(serde_json::to_string(&first).unwrap(), serde_json::to_string(&evaluated).unwrap());
}

#[test]
fn plot_only_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), vec![Variant::Feature]);
    let svg = dir.path().join("c_index.svg");
    commands::train(&cfg, RunOptions::default()).unwrap();
    assert!(!svg.exists());
    commands::train(&cfg, RunOptions { evaluate_only: true, plot: true }).unwrap();
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<polyline"));
    commands::train(&cfg, RunOptions { evaluate_only: true, plot: false }).unwrap();
    assert!(!svg.exists());
}

#[test]
fn robustness_with_identical_groups() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), vec![Variant::Last, Variant::Feature, Variant::GruD, Variant::DeepJointFeature]);
    cfg.n_bootstrap = 10;
    cfg.robustness.groups = GroupSource::Regimes {
        regime: RegimeConfig::informative(3, 8),
        shift: RegimeOverrides::default(),
        n_a: 120,
        n_b: 120,
    };
    // identical generators give identical cohorts, so both arms see the same data
    let results = commands::robustness(&cfg).unwrap();
    assert_eq!(results.len(), 4);
    for (_, r) in &results {
        for d in &r.deltas {
            assert_eq!((d.c_index.mean, d.brier.mean), (0.0, 0.0));
        }
    }
    let deltas = std::fs::read_to_string(dir.path().join("robustness/delta_c_index.csv")).unwrap();
    assert_eq!(deltas.lines().count(), 5);
    for f in ["manifest.json", "report.json", "in_domain_brier.csv", "transfer_c_index.csv"] {
        assert!(dir.path().join("robustness").join(f).exists(), "{f}");
    }
}

#[test]
fn gradcheck_writes_its_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["gradcheck", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let table = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert!(table.lines().count() > 5);
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
}

#[test]
fn last_value_baseline_trains_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        seed: 1,
        variants: vec![Variant::Last],
        n_bootstrap: 20,
        out_dir: Some(dir.path().to_path_buf()),
        data: DataSource::Synth { n: 2000, regime: RegimeConfig::informative(4, 1) },
        ..ExperimentConfig::default()
    };
    cfg.horizons = vec![1.0, 7.0, 14.0];
    let started = Instant::now();
    commands::train(&cfg, RunOptions::default()).unwrap();
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "{elapsed:?}");
}
