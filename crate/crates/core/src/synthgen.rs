//! Seeded synthetic admissions with an informative observation process.
//!
//! A latent severity follows an AR(1) chain on a 15-minute grid. Lab draws
//! arrive faster and are less often incomplete when severity is high, and the
//! hazard of the outcome depends on severity at the end of the window. The
//! outcome draws use their own random stream, so two regimes that differ only
//! in observation parameters share the same patients and outcomes for a
//! given seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PatientRecord, MINUTES_PER_HOUR, WINDOW_HOURS};
use crate::error::{Error, Result};

pub const GRID_MINUTES: f64 = 15.0;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    pub n_labs: usize,
    /// Observation events per hour at zero severity.
    pub base_gap_rate: f64,
    /// Observation intensity is multiplied by `exp(kappa * severity)`.
    pub kappa: f64,
    /// Probability that a lab is missing at an observation, at zero severity.
    pub miss_prob_base: Vec<f64>,
    /// Change in the logit of the missing probability per unit severity.
    pub miss_prob_slope: Vec<f64>,
    pub loadings: Vec<f64>,
    pub noise_std: f64,
    /// AR(1) coefficient per grid step.
    pub rho: f64,
    pub innovation_std: f64,
    /// Outcome hazard per day at zero severity.
    pub hazard_base: f64,
    pub hazard_coef: f64,
    /// Administrative censoring, in days after admission.
    pub censor_horizon_days: f64,
    /// Rate per day of loss to follow-up after the window.
    #[serde(default)]
    pub dropout_rate: f64,
    /// Share of admissions falling on a weekend slot.
    #[serde(default)]
    pub weekend_fraction: f64,
    pub seed: u64,
}

impl RegimeConfig {
    /// Strongly informative presence with noisy values.
    pub fn informative(n_labs: usize, seed: u64) -> Self {
        RegimeConfig {
            n_labs,
            base_gap_rate: 0.5,
            kappa: 1.0,
            miss_prob_base: vec![0.5; n_labs],
            miss_prob_slope: (0..n_labs).map(|k| if k % 2 == 0 { -1.5 } else { 1.0 }).collect(),
            loadings: vec![0.5; n_labs],
            noise_std: 1.0,
            rho: 0.98,
            innovation_std: (1.0f64 - 0.98 * 0.98).sqrt(),
            hazard_base: 0.1,
            hazard_coef: 1.5,
            censor_horizon_days: 16.0,
            dropout_rate: 0.0,
            weekend_fraction: 0.3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(format!("regime: {msg}")));
        let k = self.n_labs;
        if k == 0 {
            return bad("n_labs must be at least 1".into());
        }
        for (name, len) in [
            ("miss_prob_base", self.miss_prob_base.len()),
            ("miss_prob_slope", self.miss_prob_slope.len()),
            ("loadings", self.loadings.len()),
        ] {
            if len != k {
                return bad(format!("{name} has {len} entries for {k} labs"));
            }
        }
        let finite = [
            self.base_gap_rate,
            self.kappa,
            self.noise_std,
            self.rho,
            self.innovation_std,
            self.hazard_base,
            self.hazard_coef,
            self.censor_horizon_days,
            self.dropout_rate,
            self.weekend_fraction,
        ];
        if finite.iter().chain(&self.miss_prob_slope).chain(&self.loadings).any(|v| !v.is_finite()) {
            return bad("all fields must be finite".into());
        }
        if self.base_gap_rate <= 0.0 {
            return bad("base_gap_rate must be positive".into());
        }
        if self.kappa < 0.0 || self.noise_std < 0.0 || self.innovation_std < 0.0 || self.dropout_rate < 0.0 {
            return bad("kappa, noise_std, innovation_std and dropout_rate must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho = {} must lie in [0, 1)", self.rho));
        }
        if self.miss_prob_base.iter().any(|p| !(0.0..1.0).contains(p)) {
            return bad("miss_prob_base entries must lie in [0, 1)".into());
        }
        if self.hazard_base <= 0.0 {
            return bad("hazard_base must be positive".into());
        }
        if self.censor_horizon_days <= WINDOW_HOURS / 24.0 {
            return bad("censor_horizon_days must exceed the observation window".into());
        }
        if !(0.0..=1.0).contains(&self.weekend_fraction) {
            return bad("weekend_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn lab_names(&self) -> Vec<String> {
        (0..self.n_labs).map(|k| format!("lab{k:02}")).collect()
    }

    fn miss_prob(&self, lab: usize, severity: f64) -> f64 {
        let base = self.miss_prob_base[lab];
        if base == 0.0 {
            return 0.0;
        }
        let logit = (base / (1.0 - base)).ln() + self.miss_prob_slope[lab] * severity;
        1.0 / (1.0 + (-logit).exp())
    }
}

/// Observation-process changes applied by [`shift_regime`]. Outcome fields
/// are listed so that attempts to change them can be refused.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeOverrides {
    pub base_gap_rate: Option<f64>,
    pub kappa: Option<f64>,
    pub miss_prob_base: Option<Vec<f64>>,
    pub miss_prob_slope: Option<Vec<f64>>,
    pub weekend_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub hazard_base: Option<f64>,
    pub hazard_coef: Option<f64>,
    pub rho: Option<f64>,
    pub innovation_std: Option<f64>,
    pub loadings: Option<Vec<f64>>,
    pub noise_std: Option<f64>,
    pub censor_horizon_days: Option<f64>,
    pub dropout_rate: Option<f64>,
}

/// A regime that differs from `base` in observation parameters only.
pub fn shift_regime(base: &RegimeConfig, overrides: &RegimeOverrides) -> Result<RegimeConfig> {
    let forbidden = [
        ("hazard_base", overrides.hazard_base.is_some()),
        ("hazard_coef", overrides.hazard_coef.is_some()),
        ("rho", overrides.rho.is_some()),
        ("innovation_std", overrides.innovation_std.is_some()),
        ("loadings", overrides.loadings.is_some()),
        ("noise_std", overrides.noise_std.is_some()),
        ("censor_horizon_days", overrides.censor_horizon_days.is_some()),
        ("dropout_rate", overrides.dropout_rate.is_some()),
    ];
    let touched: Vec<&str> = forbidden.iter().filter(|(_, set)| *set).map(|(n, _)| *n).collect();
    if !touched.is_empty() {
        return Err(Error::config(format!(
            "regime shift may only change the observation process; refusing to override {}",
            touched.join(", ")
        )));
    }
    let mut out = base.clone();
    if let Some(v) = overrides.base_gap_rate {
        out.base_gap_rate = v;
    }
    if let Some(v) = overrides.kappa {
        out.kappa = v;
    }
    if let Some(v) = &overrides.miss_prob_base {
        out.miss_prob_base = v.clone();
    }
    if let Some(v) = &overrides.miss_prob_slope {
        out.miss_prob_slope = v.clone();
    }
    if let Some(v) = overrides.weekend_fraction {
        out.weekend_fraction = v;
    }
    if let Some(v) = overrides.seed {
        out.seed = v;
    }
    out.validate()?;
    Ok(out)
}

/// Severity on the grid `0, 15, .., 1440` minutes, held constant between
/// grid points.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory {
    pub severity: Vec<f64>,
}

impl LatentTrajectory {
    pub fn at_minute(&self, t: f64) -> f64 {
        let i = ((t / GRID_MINUTES).floor() as usize).min(self.severity.len() - 1);
        self.severity[i]
    }

    pub fn end_of_window(&self) -> f64 {
        *self.severity.last().expect("non-empty trajectory")
    }
}

fn grid_len() -> usize {
    (WINDOW_HOURS * MINUTES_PER_HOUR / GRID_MINUTES) as usize + 1
}

fn simulate_severity(regime: &RegimeConfig, rng: &mut ChaCha8Rng) -> LatentTrajectory {
    let stationary_sd = regime.innovation_std / (1.0 - regime.rho * regime.rho).sqrt();
    let mut s: f64 = stationary_sd * rng.sample::<f64, _>(StandardNormal);
    let mut severity = Vec::with_capacity(grid_len());
    severity.push(s);
    for _ in 1..grid_len() {
        s = regime.rho * s + regime.innovation_std * rng.sample::<f64, _>(StandardNormal);
        severity.push(s);
    }
    LatentTrajectory { severity }
}

struct Outcome {
    latent: LatentTrajectory,
    followup_days: f64,
    event: bool,
}

/// Severity and outcome, redrawn until the patient outlives the window.
fn draw_outcome(regime: &RegimeConfig, rng: &mut ChaCha8Rng) -> Result<Outcome> {
    let window_days = WINDOW_HOURS / 24.0;
    for _ in 0..MAX_ATTEMPTS {
        let latent = simulate_severity(regime, rng);
        let rate = regime.hazard_base * (regime.hazard_coef * latent.end_of_window()).exp();
        let u: f64 = rng.random();
        // inverse transform of the exponential survival function
        let t = -(1.0 - u).ln() / rate;
        let dropout = if regime.dropout_rate > 0.0 {
            window_days + Exp::new(regime.dropout_rate).expect("positive rate").sample(rng)
        } else {
            f64::INFINITY
        };
        if t <= window_days {
            continue;
        }
        let censor = regime.censor_horizon_days.min(dropout);
        return Ok(Outcome { latent, followup_days: t.min(censor), event: t <= censor });
    }
    Err(Error::config("regime hazard is so high that almost no patient survives the window"))
}

/// Observation times (minutes) by thinning a Poisson process whose rate
/// bounds `base * exp(kappa * severity)`.
fn draw_times(regime: &RegimeConfig, latent: &LatentTrajectory, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let max_sev = latent.severity.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rate_max = regime.base_gap_rate * (regime.kappa * max_sev).exp();
    let exp = Exp::new(rate_max).expect("positive rate");
    loop {
        let mut times = Vec::new();
        let mut t_hours = 0.0;
        loop {
            t_hours += exp.sample(rng);
            if t_hours > WINDOW_HOURS {
                break;
            }
            let minutes = t_hours * MINUTES_PER_HOUR;
            let rate = regime.base_gap_rate * (regime.kappa * latent.at_minute(minutes)).exp();
            let accept: f64 = rng.random();
            if accept * rate_max < rate {
                times.push(minutes);
            }
        }
        if !times.is_empty() {
            return times;
        }
    }
}

fn admission_slot(regime: &RegimeConfig, rng: &mut ChaCha8Rng) -> (u8, u8) {
    // weekday slots are Monday 08:00 .. Saturday 08:00, weekend the rest
    let weekend = rng.random::<f64>() < regime.weekend_fraction;
    let hour_of_week = if weekend { 128 + rng.random_range(0..48) } else { 8 + rng.random_range(0..120) };
    let h = hour_of_week % 168;
    ((h / 24) as u8, (h % 24) as u8)
}

fn generate_patient(regime: &RegimeConfig, index: usize) -> Result<(PatientRecord, LatentTrajectory)> {
    let mut outcome_rng = ChaCha8Rng::seed_from_u64(regime.seed);
    outcome_rng.set_stream(2 * index as u64);
    let mut obs_rng = ChaCha8Rng::seed_from_u64(regime.seed);
    obs_rng.set_stream(2 * index as u64 + 1);

    let Outcome { latent, followup_days, event } = draw_outcome(regime, &mut outcome_rng)?;
    let (admission_weekday, admission_hour) = admission_slot(regime, &mut outcome_rng);

    let k = regime.n_labs;
    let times = draw_times(regime, &latent, &mut obs_rng);
    let mut masks: Vec<Vec<u8>> = times
        .iter()
        .map(|&t| {
            let sev = latent.at_minute(t);
            (0..k).map(|lab| u8::from(obs_rng.random::<f64>() >= regime.miss_prob(lab, sev))).collect()
        })
        .collect();
    for lab in 0..k {
        if masks.iter().all(|m| m[lab] == 0) {
            let j = obs_rng.random_range(0..times.len());
            masks[j][lab] = 1;
        }
    }
    let mut rec = PatientRecord {
        id: format!("p{index:06}"),
        times: Vec::new(),
        values: Vec::new(),
        masks: Vec::new(),
        followup_days,
        event,
        admission_weekday,
        admission_hour,
    };
    for (t, m) in times.into_iter().zip(masks) {
        if m.iter().all(|&v| v == 0) {
            continue;
        }
        let sev = latent.at_minute(t);
        let values = (0..k)
            .map(|lab| {
                let noise: f64 = obs_rng.sample(StandardNormal);
                (m[lab] == 1).then(|| regime.loadings[lab] * sev + regime.noise_std * noise)
            })
            .collect();
        rec.times.push(t);
        rec.values.push(values);
        rec.masks.push(m);
    }
    Ok((rec, latent))
}

/// Generates `n` patients together with their latent trajectories.
pub fn generate_with_latent(n: usize, regime: &RegimeConfig) -> Result<(Dataset, Vec<LatentTrajectory>)> {
    if n == 0 {
        return Err(Error::config("cannot generate zero patients"));
    }
    regime.validate()?;
    let mut records = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for i in 0..n {
        let (r, l) = generate_patient(regime, i)?;
        records.push(r);
        latents.push(l);
    }
    Ok((Dataset::new(regime.lab_names(), records)?, latents))
}

pub fn generate(n: usize, regime: &RegimeConfig) -> Result<Dataset> {
    generate_with_latent(n, regime).map(|(d, _)| d)
}
