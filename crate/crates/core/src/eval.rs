//! Censoring-adjusted time-dependent C-index and Brier score, bootstrap
//! intervals, and the paired transfer experiment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{oversample, split_indices, Dataset};
use crate::error::{Error, Result};
use crate::training::{train, TrainConfig};

/// Lower bound on censoring survival when it is used as a weight.
pub const G_FLOOR: f64 = 1e-4;

/// Per-patient risks `1 - S(τ|x)` at each horizon, with observed outcomes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub horizons: Vec<f64>,
    /// `risks[i][h]` for patient `i` and horizon index `h`.
    pub risks: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub events: Vec<bool>,
}

impl PredictionSet {
    pub fn new(horizons: Vec<f64>, risks: Vec<Vec<f64>>, times: Vec<f64>, events: Vec<bool>) -> Result<Self> {
        if horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data("horizons must be strictly increasing"));
        }
        if risks.len() != times.len() || events.len() != times.len() {
            return Err(Error::Shape("prediction set: risks, times and events differ in length".into()));
        }
        for r in &risks {
            if r.len() != horizons.len() {
                return Err(Error::Shape("prediction set: one risk per horizon expected".into()));
            }
            if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::data("risks must lie in [0, 1]"));
            }
        }
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::data("times must be finite and non-negative"));
        }
        Ok(PredictionSet { horizons, risks, times, events })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon_index(&self, tau: f64) -> Result<usize> {
        self.horizons
            .iter()
            .position(|&h| h == tau)
            .ok_or_else(|| Error::data(format!("horizon {tau} was not predicted")))
    }

    pub fn risks_at(&self, h: usize) -> Vec<f64> {
        self.risks.iter().map(|r| r[h]).collect()
    }

    /// Patients in `idx`, repeats allowed.
    pub fn subset(&self, idx: &[usize]) -> PredictionSet {
        PredictionSet {
            horizons: self.horizons.clone(),
            risks: idx.iter().map(|&i| self.risks[i].clone()).collect(),
            times: idx.iter().map(|&i| self.times[i]).collect(),
            events: idx.iter().map(|&i| self.events[i]).collect(),
        }
    }
}

/// Kaplan-Meier estimate of the censoring survival `G(t) = P(C > t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CensoringSurvival {
    /// `(time, G just after time)` at each censoring time, increasing.
    pub steps: Vec<(f64, f64)>,
}

impl CensoringSurvival {
    /// Right-continuous value `G(t)`.
    pub fn at(&self, t: f64) -> f64 {
        let n = self.steps.partition_point(|&(s, _)| s <= t);
        if n == 0 {
            1.0
        } else {
            self.steps[n - 1].1
        }
    }

    /// Left limit `G(t-)`.
    pub fn before(&self, t: f64) -> f64 {
        let n = self.steps.partition_point(|&(s, _)| s < t);
        if n == 0 {
            1.0
        } else {
            self.steps[n - 1].1
        }
    }
}

/// Kaplan-Meier with the roles of event and censoring swapped. Subjects
/// with an event at `t` still count as at risk of censoring at `t`.
pub fn km_censoring(times: &[f64], events: &[bool]) -> CensoringSurvival {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len() as f64;
    let mut g = 1.0;
    let mut steps = Vec::new();
    let mut pos = 0;
    while pos < order.len() {
        let t = times[order[pos]];
        let mut censored = 0.0;
        let mut leaving = 0.0;
        while pos < order.len() && times[order[pos]] == t {
            if !events[order[pos]] {
                censored += 1.0;
            }
            leaving += 1.0;
            pos += 1;
        }
        if censored > 0.0 {
            g *= 1.0 - censored / at_risk;
            steps.push((t, g));
        }
        at_risk -= leaving;
    }
    CensoringSurvival { steps }
}

/// Fenwick tree over risk ranks.
struct RankCounts(Vec<f64>);

impl RankCounts {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1.0;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< i`.
    fn below(&self, mut i: usize) -> f64 {
        let mut s = 0.0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// IPCW concordance at horizon `tau`: over pairs with `T_i < T_j`, `d_i = 1`
/// and `T_i <= tau`, the weighted share where patient `i` has the higher risk.
pub fn c_index_td(preds: &PredictionSet, tau: f64) -> Result<f64> {
    let h = preds.horizon_index(tau)?;
    let risks = preds.risks_at(h);
    let g = km_censoring(&preds.times, &preds.events);
    let n = preds.len();

    let mut sorted = risks.clone();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let rank = |r: f64| sorted.partition_point(|&s| s < r);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| preds.times[b].total_cmp(&preds.times[a]));
    let mut later = RankCounts(vec![0.0; sorted.len() + 1]);
    let mut inserted = 0.0;
    let (mut num, mut den) = (0.0, 0.0);
    let mut pos = 0;
    while pos < n {
        let t = preds.times[order[pos]];
        let end = (pos..n).find(|&q| preds.times[order[q]] != t).unwrap_or(n);
        for &i in &order[pos..end] {
            if preds.events[i] && t <= tau && inserted > 0.0 {
                let w = 1.0 / g.before(t).max(G_FLOOR).powi(2);
                let r = rank(risks[i]);
                let lower = later.below(r);
                let ties = later.below(r + 1) - lower;
                num += w * (lower + 0.5 * ties);
                den += w * inserted;
            }
        }
        for &i in &order[pos..end] {
            later.add(rank(risks[i]));
            inserted += 1.0;
        }
        pos = end;
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric(format!("no comparable pairs at horizon {tau}")));
    }
    Ok(num / den)
}

/// IPCW Brier score of the predicted survival `1 - risk` at horizon `tau`.
pub fn brier_td(preds: &PredictionSet, tau: f64) -> Result<f64> {
    let h = preds.horizon_index(tau)?;
    let g = km_censoring(&preds.times, &preds.events);
    let g_tau = g.at(tau);
    if g_tau == 0.0 {
        return Err(Error::UndefinedMetric(format!("censoring survival is zero at horizon {tau}")));
    }
    let g_tau = g_tau.max(G_FLOOR);
    let mut total = 0.0;
    for i in 0..preds.len() {
        let s = 1.0 - preds.risks[i][h];
        let t = preds.times[i];
        if t <= tau && preds.events[i] {
            total += s * s / g.before(t).max(G_FLOOR);
        } else if t > tau {
            total += (1.0 - s) * (1.0 - s) / g_tau;
        }
    }
    Ok(total / preds.len() as f64)
}

/// Mean and 95% percentile interval over bootstrap replicates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Linear-interpolation percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(mut values: Vec<f64>, attempted: usize) -> Result<Interval> {
    if values.len() * 2 < attempted {
        return Err(Error::UndefinedMetric(format!(
            "metric undefined on {} of {attempted} bootstrap replicates",
            attempted - values.len()
        )));
    }
    // anchored sum so that a constant metric reproduces itself exactly
    let first = values[0];
    let mean = first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64;
    values.sort_by(f64::total_cmp);
    let lo = percentile(&values, 0.025).min(mean);
    let hi = percentile(&values, 0.975).max(mean);
    Ok(Interval { mean, lo, hi })
}

fn resample(n: usize, seed: u64, replicate: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Percentile bootstrap over patients of the test predictions. Replicates
/// where the metric is undefined are skipped.
pub fn bootstrap_ci<F>(metric: F, preds: &PredictionSet, n_boot: usize, seed: u64) -> Result<Interval>
where
    F: Fn(&PredictionSet) -> Result<f64> + Sync,
{
    if n_boot < 2 {
        return Err(Error::config("bootstrap needs at least two replicates"));
    }
    if preds.is_empty() {
        return Err(Error::data("cannot bootstrap an empty prediction set"));
    }
    let outcomes: Vec<Result<f64>> =
        (0..n_boot).into_par_iter().map(|b| metric(&preds.subset(&resample(preds.len(), seed, b)))).collect();
    let mut values = Vec::with_capacity(n_boot);
    for o in outcomes {
        match o {
            Ok(v) => values.push(v),
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    summarize(values, n_boot)
}

/// Bootstrap of `metric(b) - metric(a)` where both prediction sets cover the
/// same patients and share every resample.
pub fn paired_bootstrap_delta<F>(
    metric: F,
    a: &PredictionSet,
    b: &PredictionSet,
    n_boot: usize,
    seed: u64,
) -> Result<Interval>
where
    F: Fn(&PredictionSet) -> Result<f64> + Sync,
{
    if a.times != b.times || a.events != b.events {
        return Err(Error::data("paired bootstrap needs predictions for the same patients"));
    }
    if n_boot < 2 {
        return Err(Error::config("bootstrap needs at least two replicates"));
    }
    let outcomes: Vec<Result<f64>> = (0..n_boot)
        .into_par_iter()
        .map(|r| {
            let idx = resample(a.len(), seed, r);
            Ok(metric(&b.subset(&idx))? - metric(&a.subset(&idx))?)
        })
        .collect();
    let mut values = Vec::with_capacity(n_boot);
    for o in outcomes {
        match o {
            Ok(v) => values.push(v),
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => return Err(e),
        }
    }
    summarize(values, n_boot)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: f64,
    pub c_index: Interval,
    pub brier: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub horizons: Vec<HorizonMetrics>,
    pub n_bootstrap: usize,
}

impl MetricReport {
    pub fn at(&self, horizon: f64) -> Option<&HorizonMetrics> {
        self.horizons.iter().find(|h| h.horizon == horizon)
    }
}

/// C-index and Brier score with bootstrap intervals at every horizon.
pub fn evaluate(preds: &PredictionSet, n_boot: usize, seed: u64) -> Result<MetricReport> {
    let horizons = preds
        .horizons
        .iter()
        .map(|&tau| {
            Ok(HorizonMetrics {
                horizon: tau,
                c_index: bootstrap_ci(|p| c_index_td(p, tau), preds, n_boot, seed)?,
                brier: bootstrap_ci(|p| brier_td(p, tau), preds, n_boot, seed)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricReport { horizons, n_bootstrap: n_boot })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub horizon: f64,
    /// Transfer minus in-domain.
    pub c_index: Interval,
    pub brier: Interval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub in_domain: MetricReport,
    pub transfer: MetricReport,
    pub deltas: Vec<DeltaRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessOptions {
    pub horizons: Vec<f64>,
    pub n_bootstrap: usize,
    pub train_fraction: f64,
    pub oversample: bool,
    pub seed: u64,
}

impl Default for HarnessOptions {
    fn default() -> Self {
        HarnessOptions { horizons: vec![1.0, 7.0, 14.0], n_bootstrap: 100, train_fraction: 0.9, oversample: true, seed: 0 }
    }
}

/// Trains on B (in-domain) and on A (transfer), evaluates both on the same
/// held-out part of B, and reports transfer minus in-domain.
pub fn robustness_harness(
    group_a: &Dataset,
    group_b: &Dataset,
    config: &TrainConfig,
    options: &HarnessOptions,
) -> Result<RobustnessReport> {
    if group_a.lab_names != group_b.lab_names {
        return Err(Error::data("groups have different lab schemas"));
    }
    let split = |ds: &Dataset, name: &str| -> Result<(Dataset, Dataset)> {
        let (tr, te) = split_indices(ds.len(), options.train_fraction, options.seed);
        if tr.len() < 2 || te.is_empty() {
            return Err(Error::data(format!("group {name} with {} patients is too small to split", ds.len())));
        }
        let pick = |ix: &[usize]| ds.with_records(ix.iter().map(|&i| ds.records[i].clone()).collect());
        Ok((pick(&tr), pick(&te)))
    };
    let (a_train, _) = split(group_a, "A")?;
    let (b_train, b_test) = split(group_b, "B")?;
    let a_train = if options.oversample && a_train.len() < b_train.len() {
        a_train.with_records(oversample(&a_train.records, b_train.len(), options.seed)?)
    } else {
        a_train
    };

    let in_domain_model = train(&b_train, config)?;
    let transfer_model = train(&a_train, config)?;
    let pi = in_domain_model.predictions(&b_test, &options.horizons)?;
    let pt = transfer_model.predictions(&b_test, &options.horizons)?;

    let in_domain = evaluate(&pi, options.n_bootstrap, options.seed)?;
    let transfer = evaluate(&pt, options.n_bootstrap, options.seed)?;
    let deltas = options
        .horizons
        .iter()
        .map(|&tau| {
            Ok(DeltaRow {
                horizon: tau,
                c_index: paired_bootstrap_delta(|p| c_index_td(p, tau), &pi, &pt, options.n_bootstrap, options.seed)?,
                brier: paired_bootstrap_delta(|p| brier_td(p, tau), &pi, &pt, options.n_bootstrap, options.seed)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(RobustnessReport { in_domain, transfer, deltas })
}
