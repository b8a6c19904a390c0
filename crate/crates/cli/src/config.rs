//! Experiment configuration files.

use std::path::{Path, PathBuf};

use deepjoint::synthgen::{RegimeConfig, RegimeOverrides};
use deepjoint::training::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DEEPJOINT_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every split, initialization, shuffle and bootstrap
    /// stream is derived from it.
    pub seed: u64,
    pub variants: Vec<Variant>,
    /// Days after the observation window.
    pub horizons: Vec<f64>,
    pub n_bootstrap: usize,
    /// Share of patients held out for evaluation by `train`.
    pub test_fraction: f64,
    pub out_dir: Option<PathBuf>,
    pub data: DataSource,
    /// Training settings shared by all variants; `variant` and `seed` are
    /// filled in per run.
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub robustness: RobustnessConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            variants: vec![Variant::DeepJointFeature],
            horizons: vec![1.0, 7.0, 14.0],
            n_bootstrap: 100,
            test_fraction: 0.2,
            out_dir: None,
            data: DataSource::default(),
            train: TrainConfig::default(),
            grid: GridConfig::default(),
            robustness: RobustnessConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synth { n: usize, regime: RegimeConfig },
    Files { longitudinal: PathBuf, outcomes: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth { n: 2500, regime: RegimeConfig::informative(4, 0) }
    }
}

/// Hyperparameter lists. When `search` is off only the `train` section is
/// used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub search: bool,
    pub learning_rate: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    pub rnn_layers: Vec<usize>,
    pub hidden: Vec<usize>,
    pub head_layers: Vec<usize>,
    pub head_nodes: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            search: false,
            learning_rate: vec![1e-3, 1e-4],
            batch_size: vec![100, 250],
            alpha: vec![0.1, 0.5],
            theta: vec![2.0],
            rnn_layers: vec![1, 2, 3],
            hidden: vec![10, 30],
            head_layers: vec![0, 1, 2, 3],
            head_nodes: vec![50],
        }
    }
}

impl GridConfig {
    /// Every combination applied on top of `base`, in a fixed order.
    pub fn combinations(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &learning_rate in &self.learning_rate {
            for &batch_size in &self.batch_size {
                for &alpha in &self.alpha {
                    for &theta in &self.theta {
                        for &rnn_layers in &self.rnn_layers {
                            for &hidden in &self.hidden {
                                for &head_layers in &self.head_layers {
                                    for &head_nodes in &self.head_nodes {
                                        let mut c = base.clone();
                                        c.learning_rate = learning_rate;
                                        c.batch_size = batch_size;
                                        c.alpha = alpha;
                                        c.theta = theta;
                                        c.model.rnn_layers = rnn_layers;
                                        c.model.hidden = hidden;
                                        c.model.head_layers = head_layers;
                                        c.model.head_nodes = head_nodes;
                                        out.push(c);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub groups: GroupSource,
    pub oversample: bool,
    pub train_fraction: f64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig { groups: GroupSource::WeekdayWeekend, oversample: true, train_fraction: 0.9 }
    }
}

/// Where the two groups come from. Group A trains the transfer model and
/// group B the in-domain one; both are tested on held-out B patients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GroupSource {
    /// Split the `data` cohort: A = weekend admissions, B = weekday.
    WeekdayWeekend,
    /// Two generated cohorts: A from `regime`, B from `regime` with `shift`
    /// applied to its observation process.
    Regimes { regime: RegimeConfig, shift: RegimeOverrides, n_a: usize, n_b: usize },
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let DataSource::Files { longitudinal, outcomes } = &mut cfg.data {
            let base = path.parent().unwrap_or(Path::new("."));
            *longitudinal = base.join(&*longitudinal);
            *outcomes = base.join(&*outcomes);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.variants.is_empty() {
            return bad("at least one variant is required".into());
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return bad("horizons must be positive days".into());
        }
        if self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return bad("horizons must be strictly increasing".into());
        }
        if self.n_bootstrap < 2 {
            return bad("n_bootstrap must be at least 2".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)".into());
        }
        if !(self.robustness.train_fraction > 0.0 && self.robustness.train_fraction < 1.0) {
            return bad("robustness.train_fraction must lie in (0, 1)".into());
        }
        match &self.data {
            DataSource::Synth { n: 0, .. } => return bad("data.n must be at least 1".into()),
            DataSource::Synth { regime, .. } => regime.validate()?,
            DataSource::Files { .. } => {}
        }
        self.train.validate()?;
        if self.grid.search && self.grid.combinations(&self.train).is_empty() {
            return bad("grid search has an empty list".into());
        }
        Ok(())
    }

    /// Output root: flag, then file, then the environment, then `runs`.
    pub fn resolve_out(&mut self, flag: Option<PathBuf>) {
        if let Some(out) = flag {
            self.out_dir = Some(out);
        } else if self.out_dir.is_none() {
            self.out_dir = Some(std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs")));
        }
    }

    pub fn out(&self) -> &Path {
        self.out_dir.as_deref().unwrap_or(Path::new("runs"))
    }

    /// Training settings for one variant.
    pub fn train_config(&self, variant: Variant) -> TrainConfig {
        TrainConfig { variant, seed: self.seed, ..self.train.clone() }
    }
}
