use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deepjoint::synthgen::RegimeConfig;
use deepjoint::training::Variant;
use deepjoint_cli::commands::{self, RunOptions};
use deepjoint_cli::config::{ExperimentConfig, OUT_ENV};
use deepjoint_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "deepjoint", version, about = "Joint survival and clinical-presence models on sparse lab records")]
struct Cli {
    /// Worker threads for training and bootstrap (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the file and $DEEPJOINT_OUT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Variants to run, overriding the file; repeat or separate with commas.
    #[arg(long, value_delimiter = ',')]
    variant: Vec<Variant>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort in the two-file format.
    Synth {
        /// Regime configuration (TOML); the informative default otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        /// Overrides the regime seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train each variant, then evaluate on the held-out split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Reuse existing checkpoints and only evaluate.
        #[arg(long)]
        evaluate_only: bool,
        /// Also write c_index.svg.
        #[arg(long)]
        plot: bool,
    },
    /// Evaluate checkpoints on test data.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint files; defaults to those under the output directory.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Directory holding longitudinal.csv and outcomes.csv.
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        plot: bool,
    },
    /// In-domain versus transfer comparison under an observation shift.
    Robustness {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write gradcheck.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn experiment(common: Common) -> CliResult<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if !common.variant.is_empty() {
        cfg.variants = common.variant;
    }
    cfg.resolve_out(common.out);
    Ok(cfg)
}

fn print_reports(reports: &[(String, deepjoint::eval::MetricReport)]) {
    for (name, report) in reports {
        for h in &report.horizons {
            println!(
                "{name:<18} {:>5} d  C-index {:.4} [{:.4}, {:.4}]  Brier {:.4} [{:.4}, {:.4}]",
                h.horizon, h.c_index.mean, h.c_index.lo, h.c_index.hi, h.brier.mean, h.brier.lo, h.brier.hi
            );
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    }
    match cli.command {
        Command::Synth { config, n, seed, out } => {
            let mut regime = match &config {
                Some(path) => commands::load_regime(path)?,
                None => RegimeConfig::informative(4, 0),
            };
            if let Some(seed) = seed {
                regime.seed = seed;
            }
            let out = out
                .or_else(|| std::env::var_os(OUT_ENV).map(|root| PathBuf::from(root).join("synth")))
                .unwrap_or_else(|| PathBuf::from("synth"));
            commands::synth(&regime, n, &out)?;
        }
        Command::Train { common, evaluate_only, plot } => {
            let cfg = experiment(common)?;
            print_reports(&commands::train(&cfg, RunOptions { evaluate_only, plot })?);
        }
        Command::Evaluate { common, checkpoint, test_data, plot } => {
            let cfg = experiment(common)?;
            print_reports(&commands::evaluate_command(&cfg, &checkpoint, test_data.as_deref(), plot)?);
        }
        Command::Robustness { common } => {
            let cfg = experiment(common)?;
            for (name, report) in commands::robustness(&cfg)? {
                for d in &report.deltas {
                    println!(
                        "{name:<18} {:>5} d  delta C-index {:+.4} [{:+.4}, {:+.4}]",
                        d.horizon, d.c_index.mean, d.c_index.lo, d.c_index.hi
                    );
                }
            }
        }
        Command::Gradcheck { seed, out } => {
            let reports = commands::gradcheck(seed, out.as_deref())?;
            for (loss, r) in &reports {
                for b in &r.blocks {
                    println!(
                        "{:<4} {loss:<12} {:<28} max rel err {:.2e}",
                        if b.passed { "ok" } else { "FAIL" },
                        b.name,
                        b.max_rel_err
                    );
                }
            }
            let worst = reports.iter().map(|(_, r)| r.max_rel_err()).fold(0.0, f64::max);
            println!("max relative error {worst:.3e} over {} losses", reports.len());
            commands::gradcheck_verdict(&reports)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
