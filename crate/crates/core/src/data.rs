//! Patient records, the two-file tidy data format, imputation,
//! normalization, hourly resampling, and patient-level splits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of the observation window after admission.
pub const WINDOW_HOURS: f64 = 24.0;
pub const MINUTES_PER_HOUR: f64 = 60.0;
const STD_FLOOR: f64 = 1e-6;

/// One patient's irregular laboratory sequence and outcome.
///
/// Step `j` happens at `times[j]` minutes after admission. Missing lab values
/// are `None` and carry a zero in `masks`; imputation fills the values but
/// keeps the masks so featurized inputs can still see what was measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<Vec<Option<f64>>>,
    pub masks: Vec<Vec<u8>>,
    /// Days from the survival clock origin to event or censoring.
    pub followup_days: f64,
    pub event: bool,
    /// 0 = Monday .. 6 = Sunday.
    pub admission_weekday: u8,
    pub admission_hour: u8,
}

impl PatientRecord {
    pub fn n_steps(&self) -> usize {
        self.times.len()
    }

    pub fn n_labs(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Elapsed minutes since the previous step, admission being time zero.
    pub fn gaps(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.times
            .iter()
            .map(|&t| {
                let g = t - prev;
                prev = t;
                g
            })
            .collect()
    }

    pub fn gaps_hours(&self) -> Vec<f64> {
        self.gaps().into_iter().map(|g| g / MINUTES_PER_HOUR).collect()
    }

    /// Number of observations of each lab.
    pub fn lab_counts(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.n_labs()];
        for m in &self.masks {
            for (c, &v) in counts.iter_mut().zip(m) {
                *c += f64::from(v);
            }
        }
        counts
    }

    pub fn is_imputed(&self) -> bool {
        self.values.iter().flatten().all(Option::is_some)
    }

    /// Dense values; fails when any entry is still missing.
    pub fn dense_values(&self) -> Result<Vec<Vec<f64>>> {
        self.values
            .iter()
            .map(|row| {
                row.iter()
                    .map(|v| v.ok_or_else(|| Error::data(format!("patient {} is not imputed", self.id))))
                    .collect()
            })
            .collect()
    }

    /// Checks structural invariants for a record with `n_labs` labs.
    pub fn validate(&self, n_labs: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::data(format!("patient {}: {msg}", self.id)));
        if self.times.is_empty() {
            return fail("no observations".into());
        }
        if self.values.len() != self.times.len() || self.masks.len() != self.times.len() {
            return fail("times, values and masks have different lengths".into());
        }
        let mut prev = 0.0;
        for (j, &t) in self.times.iter().enumerate() {
            if !t.is_finite() || t <= prev {
                return fail(format!("observation time {t} at step {j} is not strictly increasing from {prev}"));
            }
            prev = t;
        }
        for (j, (v, m)) in self.values.iter().zip(&self.masks).enumerate() {
            if v.len() != n_labs || m.len() != n_labs {
                return fail(format!("step {j} has {} values for {n_labs} labs", v.len()));
            }
            for (k, (x, &mk)) in v.iter().zip(m).enumerate() {
                if mk > 1 {
                    return fail(format!("mask at step {j}, lab {k} is {mk}"));
                }
                if let Some(x) = x {
                    if !x.is_finite() {
                        return fail(format!("non-finite value at step {j}, lab {k}"));
                    }
                }
                // imputed records hold values where the mask is zero
                if mk == 1 && x.is_none() {
                    return fail(format!("mask set but value missing at step {j}, lab {k}"));
                }
            }
        }
        if !(self.followup_days.is_finite() && self.followup_days > 0.0) {
            return fail(format!("follow-up {} is not positive", self.followup_days));
        }
        if self.admission_weekday > 6 || self.admission_hour > 23 {
            return fail("admission weekday/hour out of range".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub lab_names: Vec<String>,
    pub records: Vec<PatientRecord>,
}

impl Dataset {
    pub fn new(lab_names: Vec<String>, records: Vec<PatientRecord>) -> Result<Self> {
        let k = lab_names.len();
        for r in &records {
            r.validate(k)?;
        }
        Ok(Dataset { lab_names, records })
    }

    pub fn n_labs(&self) -> usize {
        self.lab_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn with_records(&self, records: Vec<PatientRecord>) -> Dataset {
        Dataset { lab_names: self.lab_names.clone(), records }
    }
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Serialize, Deserialize)]
struct LongRow {
    patient_id: String,
    time_minutes: f64,
    lab_name: String,
    value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct OutcomeRow {
    patient_id: String,
    followup_days: f64,
    event: u8,
    admission_weekday: u8,
    admission_hour: u8,
}

fn collect_errors(errors: Vec<String>) -> Result<()> {
    if errors.is_empty() {
        return Ok(());
    }
    let shown: Vec<_> = errors.iter().take(20).cloned().collect();
    let more = errors.len().saturating_sub(shown.len());
    let mut msg = shown.join("; ");
    if more > 0 {
        msg.push_str(&format!("; and {more} more"));
    }
    Err(Error::Data(msg))
}

/// Loads the longitudinal and outcome files.
///
/// Lab names are sorted so the lab order does not depend on row order.
/// Measurements sharing a patient and a time form one observation step.
pub fn load_dataset(longitudinal: &Path, outcomes: &Path) -> Result<Dataset> {
    let mut errors = Vec::new();

    let mut outcome_rows: BTreeMap<String, OutcomeRow> = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(outcomes)?;
    let mut order = Vec::new();
    for (i, row) in rdr.deserialize::<OutcomeRow>().enumerate() {
        let line = i + 2;
        match row {
            Err(e) => errors.push(format!("{}:{line}: {e}", outcomes.display())),
            Ok(r) => {
                if r.event > 1 {
                    errors.push(format!("{}:{line}: event must be 0 or 1", outcomes.display()));
                } else if !(r.followup_days.is_finite() && r.followup_days > WINDOW_HOURS / 24.0) {
                    errors.push(format!(
                        "{}:{line}: follow-up {} days does not exceed the observation window",
                        outcomes.display(),
                        r.followup_days
                    ));
                } else if r.admission_weekday > 6 || r.admission_hour > 23 {
                    errors.push(format!("{}:{line}: admission weekday/hour out of range", outcomes.display()));
                } else if outcome_rows.contains_key(&r.patient_id) {
                    errors.push(format!("{}:{line}: duplicate patient {}", outcomes.display(), r.patient_id));
                } else {
                    order.push(r.patient_id.clone());
                    outcome_rows.insert(r.patient_id.clone(), r);
                }
            }
        }
    }

    let mut lab_set = std::collections::BTreeSet::new();
    let mut per_patient: BTreeMap<String, Vec<(f64, String, f64)>> = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(longitudinal)?;
    for (i, row) in rdr.deserialize::<LongRow>().enumerate() {
        let line = i + 2;
        match row {
            Err(e) => errors.push(format!("{}:{line}: {e}", longitudinal.display())),
            Ok(r) => {
                if !r.value.is_finite() {
                    errors.push(format!("{}:{line}: non-finite value", longitudinal.display()));
                } else if !(r.time_minutes.is_finite() && r.time_minutes > 0.0) {
                    errors.push(format!(
                        "{}:{line}: time {} must be positive minutes after admission",
                        longitudinal.display(),
                        r.time_minutes
                    ));
                } else if !outcome_rows.contains_key(&r.patient_id) {
                    errors.push(format!(
                        "{}:{line}: patient {} has no outcome row",
                        longitudinal.display(),
                        r.patient_id
                    ));
                } else {
                    lab_set.insert(r.lab_name.clone());
                    per_patient.entry(r.patient_id).or_default().push((r.time_minutes, r.lab_name, r.value));
                }
            }
        }
    }
    collect_errors(errors)?;

    let lab_names: Vec<String> = lab_set.into_iter().collect();
    let lab_index: BTreeMap<&str, usize> =
        lab_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let k = lab_names.len();

    let mut records = Vec::with_capacity(order.len());
    let mut errors = Vec::new();
    for pid in order {
        let out = &outcome_rows[&pid];
        let Some(mut rows) = per_patient.remove(&pid) else {
            errors.push(format!("patient {pid} has no measurements"));
            continue;
        };
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let mut times = Vec::new();
        let mut values: Vec<Vec<Option<f64>>> = Vec::new();
        let mut masks: Vec<Vec<u8>> = Vec::new();
        for (t, lab, v) in rows {
            if times.last() != Some(&t) {
                times.push(t);
                values.push(vec![None; k]);
                masks.push(vec![0; k]);
            }
            let li = lab_index[lab.as_str()];
            let step = values.len() - 1;
            if values[step][li].is_some() {
                errors.push(format!("patient {pid}: lab {lab} measured twice at {t} minutes"));
            }
            values[step][li] = Some(v);
            masks[step][li] = 1;
        }
        records.push(PatientRecord {
            id: pid.clone(),
            times,
            values,
            masks,
            followup_days: out.followup_days,
            event: out.event == 1,
            admission_weekday: out.admission_weekday,
            admission_hour: out.admission_hour,
        });
    }
    collect_errors(errors)?;
    Dataset::new(lab_names, records)
}

/// Writes the two-file format. Only observed entries produce rows.
pub fn write_dataset(ds: &Dataset, longitudinal: &Path, outcomes: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(longitudinal)?;
    for r in &ds.records {
        for (j, &t) in r.times.iter().enumerate() {
            for (k, name) in ds.lab_names.iter().enumerate() {
                if r.masks[j][k] == 1 {
                    let value = r.values[j][k].ok_or_else(|| Error::data("mask without value"))?;
                    w.serialize(LongRow {
                        patient_id: r.id.clone(),
                        time_minutes: t,
                        lab_name: name.clone(),
                        value,
                    })?;
                }
            }
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(outcomes)?;
    for r in &ds.records {
        w.serialize(OutcomeRow {
            patient_id: r.id.clone(),
            followup_days: r.followup_days,
            event: u8::from(r.event),
            admission_weekday: r.admission_weekday,
            admission_hour: r.admission_hour,
        })?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Transformations

/// Keeps observations at or before `hours` and moves the survival clock
/// origin to the end of the window.
pub fn extract_window(record: &PatientRecord, hours: f64) -> Result<PatientRecord> {
    let limit = hours * MINUTES_PER_HOUR;
    let keep = record.times.iter().take_while(|&&t| t <= limit).count();
    if keep == 0 {
        return Err(Error::data(format!("patient {} has no observation in the first {hours} hours", record.id)));
    }
    let followup_days = record.followup_days - hours / 24.0;
    if followup_days <= 0.0 {
        return Err(Error::data(format!("patient {} did not outlive the observation window", record.id)));
    }
    Ok(PatientRecord {
        id: record.id.clone(),
        times: record.times[..keep].to_vec(),
        values: record.values[..keep].to_vec(),
        masks: record.masks[..keep].to_vec(),
        followup_days,
        event: record.event,
        admission_weekday: record.admission_weekday,
        admission_hour: record.admission_hour,
    })
}

/// Last observation carried forward, then the patient's own mean for
/// entries before the first observation of a lab. Masks are untouched.
pub fn impute_locf_patient_mean(record: &PatientRecord) -> Result<PatientRecord> {
    let k = record.n_labs();
    let mut out = record.clone();
    for lab in 0..k {
        let observed: Vec<f64> = record
            .values
            .iter()
            .zip(&record.masks)
            .filter(|(_, m)| m[lab] == 1)
            .filter_map(|(v, _)| v[lab])
            .collect();
        if observed.is_empty() {
            return Err(Error::data(format!("patient {}: lab {lab} never observed", record.id)));
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        let mut last: Option<f64> = None;
        for j in 0..record.n_steps() {
            if record.masks[j][lab] == 1 {
                last = record.values[j][lab];
            } else {
                out.values[j][lab] = Some(last.unwrap_or(mean));
            }
        }
    }
    Ok(out)
}

/// Per-lab z-scoring statistics plus the scalings of the derived inputs
/// (elapsed hours between observations, 24-hour test counts).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub lab_mean: Vec<f64>,
    pub lab_std: Vec<f64>,
    pub gap_hours_mean: f64,
    pub gap_hours_std: f64,
    pub count_mean: Vec<f64>,
    pub count_std: Vec<f64>,
}

fn mean_std(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s, mut ss) = (0.0, 0.0, 0.0);
    for x in xs {
        n += 1.0;
        s += x;
        ss += x * x;
    }
    if n == 0.0 {
        return (0.0, 1.0);
    }
    let mean = s / n;
    let var = (ss / n - mean * mean).max(0.0);
    (mean, var.sqrt().max(STD_FLOOR))
}

impl NormalizationStats {
    /// Fits on observed entries of the training records only.
    pub fn fit(records: &[PatientRecord]) -> Result<Self> {
        let k = records
            .first()
            .map(PatientRecord::n_labs)
            .ok_or_else(|| Error::data("cannot fit normalization on an empty set"))?;
        let mut lab_mean = Vec::with_capacity(k);
        let mut lab_std = Vec::with_capacity(k);
        let mut count_mean = Vec::with_capacity(k);
        let mut count_std = Vec::with_capacity(k);
        for lab in 0..k {
            let (m, s) = mean_std(records.iter().flat_map(|r| {
                r.values
                    .iter()
                    .zip(&r.masks)
                    .filter(move |(_, mk)| mk[lab] == 1)
                    .filter_map(move |(v, _)| v[lab])
            }));
            lab_mean.push(m);
            lab_std.push(s);
            let (cm, cs) = mean_std(records.iter().map(|r| r.lab_counts()[lab]));
            count_mean.push(cm);
            count_std.push(cs);
        }
        let (gm, gs) = mean_std(records.iter().flat_map(|r| r.gaps_hours()));
        Ok(NormalizationStats {
            lab_mean,
            lab_std,
            gap_hours_mean: gm,
            gap_hours_std: gs,
            count_mean,
            count_std,
        })
    }

    pub fn identity(n_labs: usize) -> Self {
        NormalizationStats {
            lab_mean: vec![0.0; n_labs],
            lab_std: vec![1.0; n_labs],
            gap_hours_mean: 0.0,
            gap_hours_std: 1.0,
            count_mean: vec![0.0; n_labs],
            count_std: vec![1.0; n_labs],
        }
    }

    pub fn n_labs(&self) -> usize {
        self.lab_mean.len()
    }

    pub fn apply(&self, record: &PatientRecord) -> PatientRecord {
        self.map_values(record, |k, x| (x - self.lab_mean[k]) / self.lab_std[k])
    }

    pub fn invert(&self, record: &PatientRecord) -> PatientRecord {
        self.map_values(record, |k, z| z * self.lab_std[k] + self.lab_mean[k])
    }

    fn map_values(&self, record: &PatientRecord, f: impl Fn(usize, f64) -> f64) -> PatientRecord {
        let mut out = record.clone();
        for row in &mut out.values {
            for (k, v) in row.iter_mut().enumerate() {
                *v = v.map(|x| f(k, x));
            }
        }
        out
    }

    pub fn scale_gap_hours(&self, hours: f64) -> f64 {
        (hours - self.gap_hours_mean) / self.gap_hours_std
    }

    pub fn scale_count(&self, lab: usize, count: f64) -> f64 {
        (count - self.count_mean[lab]) / self.count_std[lab]
    }
}

pub fn fit_normalization(train: &[PatientRecord]) -> Result<NormalizationStats> {
    NormalizationStats::fit(train)
}

pub fn apply_normalization(record: &PatientRecord, stats: &NormalizationStats) -> PatientRecord {
    stats.apply(record)
}

/// Samples an imputed record on the hourly grid `1h..=window`.
///
/// Grid points before the first observation take the first observed step,
/// which after imputation equals the patient-mean fill.
pub fn resample_hourly(record: &PatientRecord, window_hours: usize) -> Result<Vec<Vec<f64>>> {
    let dense = record.dense_values()?;
    let first = dense
        .first()
        .cloned()
        .ok_or_else(|| Error::data(format!("patient {} has no observations", record.id)))?;
    let mut out = Vec::with_capacity(window_hours);
    let mut j = 0;
    let mut current = first;
    for hour in 1..=window_hours {
        let limit = hour as f64 * MINUTES_PER_HOUR;
        while j < record.n_steps() && record.times[j] <= limit {
            current = dense[j].clone();
            j += 1;
        }
        out.push(current.clone());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Splits

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitKind {
    Random,
    WeekdayWeekend,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub train_fraction: f64,
    pub seed: u64,
    pub oversample_to_match: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { kind: SplitKind::Random, train_fraction: 0.9, seed: 0, oversample_to_match: true }
    }
}

/// Random patient-level partition; the first part has `round(frac * n)`
/// patients. Both parts keep the input order.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = ((train_fraction * n as f64).round() as usize).min(n);
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn split_random(ds: &Dataset, spec: &SplitSpec) -> (Dataset, Dataset) {
    let (a, b) = split_indices(ds.len(), spec.train_fraction, spec.seed);
    let pick = |ix: &[usize]| ds.with_records(ix.iter().map(|&i| ds.records[i].clone()).collect());
    (pick(&a), pick(&b))
}

/// True for admissions in `[Monday 08:00, Saturday 08:00)`.
pub fn is_weekday_admission(weekday: u8, hour: u8) -> bool {
    match weekday {
        0 => hour >= 8,
        1..=4 => true,
        5 => hour < 8,
        _ => false,
    }
}

pub fn split_weekday_weekend(ds: &Dataset) -> (Dataset, Dataset) {
    let (wd, we): (Vec<_>, Vec<_>) = ds
        .records
        .iter()
        .cloned()
        .partition(|r| is_weekday_admission(r.admission_weekday, r.admission_hour));
    (ds.with_records(wd), ds.with_records(we))
}

/// Sampling with replacement up to `target`, keeping every original once.
pub fn oversample<T: Clone>(group: &[T], target: usize, seed: u64) -> Result<Vec<T>> {
    if target < group.len() {
        return Err(Error::data(format!(
            "oversample target {target} is smaller than the group ({})",
            group.len()
        )));
    }
    if group.is_empty() && target > 0 {
        return Err(Error::data("cannot oversample an empty group"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = group.to_vec();
    for _ in group.len()..target {
        out.push(group[rng.random_range(0..group.len())].clone());
    }
    Ok(out)
}
