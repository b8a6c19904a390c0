//! Multi-task training: per-step presence losses, dynamic weight averaging,
//! α-mixing with the Cox loss, early stopping and survival fine-tuning.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Graph, ParamBinding, ParamId, ParamStore, Tensor, Var};
use crate::data::{extract_window, impute_locf_patient_mean, Dataset, NormalizationStats, PatientRecord, WINDOW_HOURS};
use crate::encoder::{
    assemble_inputs, grud_forward, lstm_forward, scale_inputs, AssembledInput, GrudParams, InputMode, LstmParams,
};
use crate::error::{Error, Result};
use crate::eval::PredictionSet;
use crate::heads::{
    breslow_baseline, cox_partial_nll, longitudinal_nll, missingness_nll, tpp_nll, BaselineHazard,
    LongitudinalHead, MissingnessHead, SurvivalEstimate, SurvivalHead, TemporalHeadParams,
};

/// The experiment arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Last,
    Count,
    Ignore,
    Resample,
    #[serde(rename = "GRU-D")]
    GruD,
    Feature,
    DeepJoint,
    DeepJointFeature,
    DeepJointFineTune,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Last,
        Variant::Count,
        Variant::Ignore,
        Variant::Resample,
        Variant::GruD,
        Variant::Feature,
        Variant::DeepJoint,
        Variant::DeepJointFeature,
        Variant::DeepJointFineTune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Last => "Last",
            Variant::Count => "Count",
            Variant::Ignore => "Ignore",
            Variant::Resample => "Resample",
            Variant::GruD => "GRU-D",
            Variant::Feature => "Feature",
            Variant::DeepJoint => "DeepJoint",
            Variant::DeepJointFeature => "DeepJointFeature",
            Variant::DeepJointFineTune => "DeepJointFineTune",
        }
    }

    pub fn input_mode(self) -> InputMode {
        match self {
            Variant::Last => InputMode::StaticLast,
            Variant::Count => InputMode::StaticLastPlusCounts,
            Variant::Ignore | Variant::DeepJoint => InputMode::ValuesOnly,
            Variant::Resample => InputMode::ResampledHourly,
            Variant::GruD => InputMode::GrudStyle,
            Variant::Feature | Variant::DeepJointFeature | Variant::DeepJointFineTune => InputMode::Featurized,
        }
    }

    pub fn has_presence_heads(self) -> bool {
        matches!(self, Variant::DeepJoint | Variant::DeepJointFeature | Variant::DeepJointFineTune)
    }

    /// Whether the second stage updates every weight rather than S alone.
    pub fn fine_tunes_everything(self) -> bool {
        self == Variant::DeepJointFineTune
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let squash = |x: &str| x.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        let wanted = squash(s);
        Variant::ALL.into_iter().find(|v| squash(v.name()) == wanted).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::config(format!("unknown variant '{s}'; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub rnn_layers: usize,
    pub hidden: usize,
    pub head_layers: usize,
    pub head_nodes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { rnn_layers: 1, hidden: 30, head_layers: 1, head_nodes: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub alpha: f64,
    pub theta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub multitask_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::DeepJointFeature,
            alpha: 0.1,
            theta: 2.0,
            learning_rate: 1e-3,
            batch_size: 100,
            max_epochs: 1000,
            multitask_epochs: 500,
            patience: 10,
            validation_fraction: 0.1,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return bad("theta must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.multitask_epochs > self.max_epochs {
            return bad("multitask_epochs cannot exceed max_epochs");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.model.hidden == 0 || self.model.rnn_layers == 0 || self.model.head_nodes == 0 {
            return bad("model sizes must be positive");
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Loss weighting

/// Task order for the presence losses and their weights.
pub const TASKS: [&str; 3] = ["L", "I", "M"];

/// Dynamic weight averaging:
/// `softmax_t(log(L_t(e) / (L_t(e-1) θ)))`. Losses must be positive.
pub fn dwa_weights(prev: [f64; 3], cur: [f64; 3], theta: f64) -> Result<[f64; 3]> {
    if prev.iter().chain(&cur).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Domain { op: "dwa_weights", detail: "losses must be positive".into() });
    }
    let logits: Vec<f64> = (0..3).map(|t| (cur[t] / (prev[t] * theta)).ln()).collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - top).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok([e[0] / total, e[1] / total, e[2] / total])
}

/// Per-epoch DWA bookkeeping with the positivity shift for losses that can
/// go negative: each task is shifted by its running minimum minus one.
#[derive(Clone, Debug, Default)]
pub struct DwaState {
    losses: Vec<[f64; 3]>,
    running_min: [f64; 3],
}

impl DwaState {
    pub fn new() -> Self {
        DwaState { losses: Vec::new(), running_min: [f64::INFINITY; 3] }
    }

    pub fn record(&mut self, epoch_losses: [f64; 3]) {
        for t in 0..3 {
            self.running_min[t] = self.running_min[t].min(epoch_losses[t]);
        }
        self.losses.push(epoch_losses);
    }

    pub fn shift(&self) -> [f64; 3] {
        if self.losses.is_empty() {
            return [0.0; 3];
        }
        self.running_min.map(|m| m - 1.0)
    }

    /// Weights for the next epoch from the last two completed ones.
    pub fn next_weights(&self, theta: f64) -> Result<[f64; 3]> {
        let n = self.losses.len();
        if n < 2 {
            return Ok([1.0 / 3.0; 3]);
        }
        let s = self.shift();
        let prev = [0, 1, 2].map(|t| self.losses[n - 2][t] - s[t]);
        let cur = [0, 1, 2].map(|t| self.losses[n - 1][t] - s[t]);
        dwa_weights(prev, cur, theta)
    }
}

/// `(1 - α) l_S + α Σ w_t l_t` with tasks ordered L, I, M.
pub fn combined_loss(l_s: f64, l_l: f64, l_i: f64, l_m: f64, weights: [f64; 3], alpha: f64) -> f64 {
    (1.0 - alpha) * l_s + alpha * (weights[0] * l_l + weights[1] * l_i + weights[2] * l_m)
}

fn combined_loss_graph(g: &mut Graph, l_s: Var, presence: [Var; 3], weights: [f64; 3], alpha: f64) -> Result<Var> {
    let mut total = g.scale(l_s, 1.0 - alpha)?;
    for t in 0..3 {
        let term = g.scale(presence[t], alpha * weights[t])?;
        total = g.add(total, term)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Prepared patients

/// Next-step targets for the presence heads, one row per prediction step.
#[derive(Clone, Debug)]
pub struct PresenceTargets {
    pub labs: Tensor,
    pub masks: Tensor,
    pub gap_scaled: Tensor,
    pub gap_hours: Tensor,
}

#[derive(Clone, Debug)]
pub struct PreparedPatient {
    pub id: String,
    pub input: AssembledInput,
    pub targets: Option<PresenceTargets>,
    /// Days from the end of the observation window.
    pub time: f64,
    pub event: bool,
}

pub fn window_records(ds: &Dataset) -> Result<Vec<PatientRecord>> {
    ds.records.iter().map(|r| extract_window(r, WINDOW_HOURS)).collect()
}

/// Normalizes, imputes and assembles windowed records.
pub fn prepare(records: &[PatientRecord], stats: &NormalizationStats, mode: InputMode) -> Result<Vec<PreparedPatient>> {
    records
        .iter()
        .map(|r| {
            let normalized = stats.apply(r);
            let imputed = impute_locf_patient_mean(&normalized)?;
            let mut input = assemble_inputs(&imputed, mode)?;
            scale_inputs(&mut input, mode, stats);
            Ok(PreparedPatient {
                id: r.id.clone(),
                input,
                targets: presence_targets(&normalized, stats)?,
                time: r.followup_days,
                event: r.event,
            })
        })
        .collect()
}

fn presence_targets(record: &PatientRecord, stats: &NormalizationStats) -> Result<Option<PresenceTargets>> {
    let steps = record.n_steps();
    if steps < 2 {
        return Ok(None);
    }
    let k = record.n_labs();
    let gaps = record.gaps_hours();
    let mut labs = Vec::with_capacity((steps - 1) * k);
    let mut masks = Vec::with_capacity((steps - 1) * k);
    for j in 1..steps {
        for lab in 0..k {
            let m = record.masks[j][lab];
            masks.push(f64::from(m));
            labs.push(if m == 1 { record.values[j][lab].unwrap_or(0.0) } else { 0.0 });
        }
    }
    let next_gaps: Vec<f64> = gaps[1..].to_vec();
    Ok(Some(PresenceTargets {
        labs: Tensor::new(steps - 1, k, labs)?,
        masks: Tensor::new(steps - 1, k, masks)?,
        gap_scaled: Tensor::column(next_gaps.iter().map(|&h| stats.scale_gap_hours(h)).collect()),
        gap_hours: Tensor::column(next_gaps),
    }))
}

// ---------------------------------------------------------------------------
// Model

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Encoder {
    Static { width: usize },
    Lstm(LstmParams),
    Grud(GrudParams),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PresenceHeads {
    pub longitudinal: LongitudinalHead,
    pub missingness: MissingnessHead,
    pub temporal: TemporalHeadParams,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub variant: Variant,
    pub n_labs: usize,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub presence: Option<PresenceHeads>,
    pub survival: SurvivalHead,
}

/// Sums over the prediction steps of one patient, and its embedding.
pub struct SequenceLosses {
    /// `[l_L, l_I, l_M]`, absent for single-step records.
    pub presence: Option<[Var; 3]>,
    pub steps: usize,
    pub embedding: Var,
}

impl Model {
    pub fn new(variant: Variant, cfg: &ModelConfig, n_labs: usize, grud_mean: &[f64], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mode = variant.input_mode();
        let width = mode.input_width(n_labs);
        let encoder = match mode {
            InputMode::StaticLast | InputMode::StaticLastPlusCounts => Encoder::Static { width },
            InputMode::GrudStyle => {
                if grud_mean.len() != n_labs {
                    return Err(Error::Shape("GRU-D needs one empirical mean per lab".into()));
                }
                Encoder::Grud(GrudParams::init(&mut store, "enc", n_labs, cfg.hidden, grud_mean.to_vec(), &mut rng))
            }
            _ => Encoder::Lstm(LstmParams::init(&mut store, "enc", width, cfg.hidden, cfg.rnn_layers, &mut rng)),
        };
        let embed = match &encoder {
            Encoder::Static { width } => *width,
            _ => cfg.hidden,
        };
        let presence = variant.has_presence_heads().then(|| PresenceHeads {
            longitudinal: LongitudinalHead::init(&mut store, embed, n_labs, cfg.head_layers, cfg.head_nodes, &mut rng),
            missingness: MissingnessHead::init(&mut store, embed, n_labs, cfg.head_layers, cfg.head_nodes, &mut rng),
            temporal: TemporalHeadParams::init(&mut store, embed, cfg.head_layers, cfg.head_nodes, &mut rng),
        });
        let survival = SurvivalHead::init(&mut store, embed, cfg.head_layers, cfg.head_nodes, &mut rng);
        Ok(Model { variant, n_labs, store, encoder, presence, survival })
    }

    pub fn survival_ids(&self) -> Vec<ParamId> {
        self.store.ids_with_prefix("head.s.")
    }

    /// Per-step presence losses (summed) and the final embedding.
    pub fn sequence_losses(
        &self,
        g: &mut Graph,
        p: &ParamBinding,
        patient: &PreparedPatient,
        with_presence: bool,
    ) -> Result<SequenceLosses> {
        let hidden: Vec<Var> = match (&self.encoder, &patient.input) {
            (Encoder::Static { width }, AssembledInput::Static(v)) => {
                if v.len() != *width {
                    return Err(Error::Shape(format!("static input width {} != {width}", v.len())));
                }
                vec![g.constant(Tensor::row(v.clone()))]
            }
            (Encoder::Lstm(params), AssembledInput::Sequence(rows)) => {
                let x = g.constant(Tensor::from_rows(rows)?);
                lstm_forward(g, p, params, x)?.hidden
            }
            (Encoder::Grud(params), AssembledInput::Grud { values, masks, deltas_hours }) => {
                grud_forward(g, p, params, values, masks, deltas_hours)?.hidden
            }
            _ => return Err(Error::Shape(format!("patient {}: input does not match the encoder", patient.id))),
        };
        let embedding = *hidden.last().expect("encoders emit at least one state");
        let (heads, targets) = match (&self.presence, &patient.targets) {
            (Some(h), Some(t)) if with_presence && hidden.len() >= 2 => (h, t),
            _ => return Ok(SequenceLosses { presence: None, steps: 0, embedding }),
        };
        let steps = hidden.len() - 1;
        let hs = g.concat_rows(&hidden[..steps])?;
        let gap_in = g.constant(targets.gap_scaled.clone());
        let (mu, sigma) = heads.longitudinal.predict(g, p, hs, gap_in)?;
        let l_l = longitudinal_nll(g, mu, sigma, &targets.labs, &targets.masks)?;
        let gaps = g.constant(targets.gap_hours.clone());
        let l_i = tpp_nll(g, p, &heads.temporal, hs, gaps)?;
        let logits = heads.missingness.logits(g, p, hs, gap_in)?;
        let l_m = missingness_nll(g, logits, &targets.masks)?;
        Ok(SequenceLosses { presence: Some([l_l, l_i, l_m]), steps, embedding })
    }

    /// Batch losses: Cox loss over the batch divided by its size, and the
    /// presence losses averaged over steps, then over patients.
    pub fn batch_losses(
        &self,
        g: &mut Graph,
        p: &ParamBinding,
        batch: &[&PreparedPatient],
        with_presence: bool,
    ) -> Result<BatchLosses> {
        let mut embeddings = Vec::with_capacity(batch.len());
        let mut sums: Option<[Var; 3]> = None;
        let mut contributing = 0usize;
        for patient in batch {
            let s = self.sequence_losses(g, p, patient, with_presence)?;
            embeddings.push(s.embedding);
            if let Some(terms) = s.presence {
                let per_step = 1.0 / s.steps as f64;
                let scaled = [
                    g.scale(terms[0], per_step)?,
                    g.scale(terms[1], per_step)?,
                    g.scale(terms[2], per_step)?,
                ];
                sums = Some(match sums {
                    None => scaled,
                    Some(acc) => [g.add(acc[0], scaled[0])?, g.add(acc[1], scaled[1])?, g.add(acc[2], scaled[2])?],
                });
                contributing += 1;
            }
        }
        let x = g.concat_rows(&embeddings)?;
        let scores = self.survival.score(g, p, x)?;
        let times: Vec<f64> = batch.iter().map(|q| q.time).collect();
        let events: Vec<bool> = batch.iter().map(|q| q.event).collect();
        let cox = cox_partial_nll(g, scores, &times, &events)?;
        let l_s = g.scale(cox.value, 1.0 / batch.len() as f64)?;
        let presence = match sums {
            Some(acc) => {
                let inv = 1.0 / contributing as f64;
                Some([g.scale(acc[0], inv)?, g.scale(acc[1], inv)?, g.scale(acc[2], inv)?])
            }
            None if with_presence && self.presence.is_some() => {
                let z = g.scalar_const(0.0);
                Some([z, z, z])
            }
            None => None,
        };
        Ok(BatchLosses { l_s, presence, no_events: cox.no_events })
    }

    /// Risk scores of prepared patients, in order.
    pub fn scores(&self, patients: &[PreparedPatient]) -> Result<Vec<f64>> {
        patients
            .iter()
            .map(|patient| {
                let mut g = Graph::new();
                let p = g.bind(&self.store);
                let s = self.sequence_losses(&mut g, &p, patient, false)?;
                let score = self.survival.score(&mut g, &p, s.embedding)?;
                g.scalar(score)
            })
            .collect()
    }
}

pub struct BatchLosses {
    pub l_s: Var,
    pub presence: Option<[Var; 3]>,
    pub no_events: bool,
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    /// Average training losses `[L, I, M, S]`; presence entries are zero when
    /// the stage does not use them.
    pub train: [f64; 4],
    pub train_total: f64,
    pub validation: f64,
    pub weights: [f64; 3],
    pub shift: [f64; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub epochs: Vec<EpochRecord>,
    pub stage_epochs: [usize; 2],
    pub best_epoch: [usize; 2],
}

impl LossHistory {
    /// Delimiter-separated table, one row per epoch.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "stage", "epoch", "l_L", "l_I", "l_M", "l_S", "train_total", "validation", "w_L", "w_I", "w_M", "shift_L",
            "shift_I", "shift_M",
        ])?;
        for e in &self.epochs {
            let mut row = vec![e.stage.to_string(), e.epoch.to_string()];
            row.extend(e.train.iter().map(f64::to_string));
            row.push(e.train_total.to_string());
            row.push(e.validation.to_string());
            row.extend(e.weights.iter().map(f64::to_string));
            row.extend(e.shift.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::data(e.to_string()))?).map_err(|e| Error::data(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub config: TrainConfig,
    pub lab_names: Vec<String>,
    pub stats: NormalizationStats,
    pub baseline: BaselineHazard,
    pub history: LossHistory,
    /// Parameters restored at the end of the first stage.
    pub stage_one: Option<ParamStore>,
}

/// Derives independent sub-seeds from the master seed.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, PartialEq)]
enum Objective {
    Joint,
    Survival,
}

struct Stage<'a> {
    number: u8,
    epochs: usize,
    objective: Objective,
    active: Vec<ParamId>,
    train: &'a [PreparedPatient],
    validation: &'a [PreparedPatient],
}

fn run_stage(model: &mut Model, cfg: &TrainConfig, stage: Stage<'_>, history: &mut LossHistory) -> Result<()> {
    let mut adam = AdamState::new(&model.store, AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() });
    let mut dwa = DwaState::new();
    let joint = stage.objective == Objective::Joint;
    let mut best = (f64::INFINITY, model.store.clone(), 0usize);
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..stage.train.len()).collect();
    let shuffle_seed = sub_seed(cfg.seed, 10 + u64::from(stage.number));
    for epoch in 1..=stage.epochs {
        let weights = if joint { dwa.next_weights(cfg.theta)? } else { [1.0 / 3.0; 3] };
        let shift = dwa.shift();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut sums = [0.0; 4];
        let mut total_sum = 0.0;
        let mut n_batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedPatient> = chunk.iter().map(|&i| &stage.train[i]).collect();
            let mut g = Graph::new();
            let p = g.bind(&model.store);
            let losses = model.batch_losses(&mut g, &p, &batch, joint)?;
            let total = match (joint, losses.presence) {
                (true, Some(pres)) => combined_loss_graph(&mut g, losses.l_s, pres, weights, cfg.alpha)?,
                _ => losses.l_s,
            };
            if let Some(pres) = losses.presence {
                for t in 0..3 {
                    sums[t] += g.scalar(pres[t])?;
                }
            }
            sums[3] += g.scalar(losses.l_s)?;
            total_sum += g.scalar(total)?;
            n_batches += 1.0;
            let grads = g.backward(total)?.params(&g, &p);
            adam.step(&mut model.store, &grads, &stage.active)?;
        }
        let train = sums.map(|s| s / n_batches);
        if joint {
            dwa.record([train[0], train[1], train[2]]);
        }
        let validation = validation_loss(model, stage.validation, joint, weights, cfg.alpha)?;
        if !validation.is_finite() {
            return Err(Error::Numerical(format!("validation loss is {validation} at stage {} epoch {epoch}", stage.number)));
        }
        history.epochs.push(EpochRecord {
            stage: stage.number,
            epoch,
            train,
            train_total: total_sum / n_batches,
            validation,
            weights,
            shift,
        });
        history.stage_epochs[usize::from(stage.number - 1)] = epoch;
        if validation < best.0 {
            best = (validation, model.store.clone(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::debug!("stage {} stopped early at epoch {epoch}", stage.number);
                break;
            }
        }
    }
    if best.2 > 0 {
        model.store = best.1;
    }
    history.best_epoch[usize::from(stage.number - 1)] = best.2;
    Ok(())
}

fn validation_loss(
    model: &Model,
    validation: &[PreparedPatient],
    joint: bool,
    weights: [f64; 3],
    alpha: f64,
) -> Result<f64> {
    let batch: Vec<&PreparedPatient> = validation.iter().collect();
    let mut g = Graph::new();
    let p = g.bind(&model.store);
    let losses = model.batch_losses(&mut g, &p, &batch, joint)?;
    let total = match (joint, losses.presence) {
        (true, Some(pres)) => combined_loss_graph(&mut g, losses.l_s, pres, weights, alpha)?,
        _ => losses.l_s,
    };
    g.scalar(total)
}

/// Per-lab means of the normalized observed training values.
fn empirical_means(records: &[PatientRecord], stats: &NormalizationStats) -> Vec<f64> {
    let k = stats.n_labs();
    let mut sum = vec![0.0; k];
    let mut count = vec![0.0; k];
    for r in records {
        let z = stats.apply(r);
        for (v, m) in z.values.iter().zip(&z.masks) {
            for lab in 0..k {
                if m[lab] == 1 {
                    sum[lab] += v[lab].unwrap_or(0.0);
                    count[lab] += 1.0;
                }
            }
        }
    }
    sum.iter().zip(&count).map(|(s, c)| if *c > 0.0 { s / c } else { 0.0 }).collect()
}

/// Two-stage training on raw records (times from admission).
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let windowed = window_records(ds)?;
    if !windowed.iter().any(|r| r.event) {
        return Err(Error::data("training set has no events; the partial likelihood is undefined"));
    }
    let (train_idx, val_idx) = crate::data::split_indices(windowed.len(), 1.0 - cfg.validation_fraction, sub_seed(cfg.seed, 1));
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::data(format!("{} patients are too few to hold out a validation set", windowed.len())));
    }
    let stats = NormalizationStats::fit(&windowed)?;
    let mode = cfg.variant.input_mode();
    let prepared = prepare(&windowed, &stats, mode)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| prepared[i].clone()).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(&train_idx), pick(&val_idx));

    let grud_mean = empirical_means(&windowed, &stats);
    let mut model = Model::new(cfg.variant, &cfg.model, ds.n_labs(), &grud_mean, sub_seed(cfg.seed, 2))?;
    let mut history = LossHistory::default();
    let all: Vec<ParamId> = model.store.ids().collect();

    let stage_one_objective = if cfg.variant.has_presence_heads() { Objective::Joint } else { Objective::Survival };
    run_stage(
        &mut model,
        cfg,
        Stage {
            number: 1,
            epochs: cfg.multitask_epochs,
            objective: stage_one_objective,
            active: all.clone(),
            train: &train_set,
            validation: &val_set,
        },
        &mut history,
    )?;
    let stage_one = model.store.clone();
    let active = if cfg.variant.fine_tunes_everything() { all } else { model.survival_ids() };
    run_stage(
        &mut model,
        cfg,
        Stage {
            number: 2,
            epochs: cfg.max_epochs - cfg.multitask_epochs,
            objective: Objective::Survival,
            active,
            train: &train_set,
            validation: &val_set,
        },
        &mut history,
    )?;

    let scores = model.scores(&prepared)?;
    let times: Vec<f64> = prepared.iter().map(|p| p.time).collect();
    let events: Vec<bool> = prepared.iter().map(|p| p.event).collect();
    let baseline = breslow_baseline(&scores, &times, &events)?;
    Ok(TrainedModel {
        model,
        config: cfg.clone(),
        lab_names: ds.lab_names.clone(),
        stats,
        baseline,
        history,
        stage_one: Some(stage_one),
    })
}

impl TrainedModel {
    fn check_schema(&self, ds: &Dataset) -> Result<()> {
        if ds.lab_names == self.lab_names {
            return Ok(());
        }
        let missing: Vec<_> = self.lab_names.iter().filter(|n| !ds.lab_names.contains(n)).cloned().collect();
        let extra: Vec<_> = ds.lab_names.iter().filter(|n| !self.lab_names.contains(n)).cloned().collect();
        Err(Error::data(format!(
            "lab schema mismatch: model labs missing from data [{}], unexpected labs in data [{}]",
            missing.join(", "),
            extra.join(", ")
        )))
    }

    pub fn prepare(&self, ds: &Dataset) -> Result<Vec<PreparedPatient>> {
        self.check_schema(ds)?;
        prepare(&window_records(ds)?, &self.stats, self.config.variant.input_mode())
    }

    pub fn risk_scores(&self, ds: &Dataset) -> Result<Vec<f64>> {
        self.model.scores(&self.prepare(ds)?)
    }

    /// Survival probabilities at `horizons` (days after the window).
    pub fn survival_curves(&self, ds: &Dataset, horizons: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .risk_scores(ds)?
            .into_iter()
            .map(|s| {
                let est = SurvivalEstimate { risk_score: s, baseline: &self.baseline };
                crate::heads::survival_curve(&est, horizons)
            })
            .collect())
    }

    pub fn predictions(&self, ds: &Dataset, horizons: &[f64]) -> Result<PredictionSet> {
        let prepared = self.prepare(ds)?;
        let scores = self.model.scores(&prepared)?;
        let risks = scores
            .iter()
            .map(|&s| {
                let est = SurvivalEstimate { risk_score: s, baseline: &self.baseline };
                horizons.iter().map(|&t| (1.0 - est.survival(t)).clamp(0.0, 1.0)).collect()
            })
            .collect();
        PredictionSet::new(
            horizons.to_vec(),
            risks,
            prepared.iter().map(|p| p.time).collect(),
            prepared.iter().map(|p| p.event).collect(),
        )
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let grud_mean = match &self.model.encoder {
            Encoder::Grud(g) => g.empirical_mean.clone(),
            _ => Vec::new(),
        };
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            lab_names: self.lab_names.clone(),
            grud_mean,
            params: self.model.store.to_map(),
            stats: self.stats.clone(),
            baseline: self.baseline.clone(),
            history: self.history.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!("unsupported checkpoint format '{}'", ck.format)));
        }
        let n_labs = ck.lab_names.len();
        let mean = if ck.grud_mean.is_empty() { vec![0.0; n_labs] } else { ck.grud_mean.clone() };
        let mut model = Model::new(ck.config.variant, &ck.config.model, n_labs, &mean, 0)?;
        model.store.load_map(&ck.params)?;
        Ok(TrainedModel {
            model,
            config: ck.config,
            lab_names: ck.lab_names,
            stats: ck.stats,
            baseline: ck.baseline,
            history: ck.history,
            stage_one: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "deepjoint-checkpoint-v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub lab_names: Vec<String>,
    #[serde(default)]
    pub grud_mean: Vec<f64>,
    pub params: BTreeMap<String, Tensor>,
    pub stats: NormalizationStats,
    pub baseline: BaselineHazard,
    pub history: LossHistory,
}

// ---------------------------------------------------------------------------
// Gradient checks of the full objective

/// Finite-difference checks of each head loss and of the DWA-weighted
/// combined loss on a small random model.
pub fn gradient_check_suite(seed: u64, step: f64, tolerance: f64) -> Result<Vec<(String, crate::autodiff::GradCheckReport)>> {
    use crate::synthgen::{generate, RegimeConfig};
    let regime = RegimeConfig::informative(2, seed);
    let ds = generate(6, &regime)?;
    let windowed = window_records(&ds)?;
    let stats = NormalizationStats::fit(&windowed)?;
    let mut prepared = prepare(&windowed, &stats, InputMode::Featurized)?;
    // keep sequences short so the check stays fast
    for p in &mut prepared {
        if let AssembledInput::Sequence(rows) = &mut p.input {
            rows.truncate(4);
        }
        if let Some(t) = &mut p.targets {
            let keep = t.labs.rows().min(3);
            let cut = |x: &Tensor| Tensor::from_rows(&(0..keep).map(|r| x.row_slice(r).to_vec()).collect::<Vec<_>>());
            *t = PresenceTargets { labs: cut(&t.labs)?, masks: cut(&t.masks)?, gap_scaled: cut(&t.gap_scaled)?, gap_hours: cut(&t.gap_hours)? };
        }
    }
    let cfg = ModelConfig { rnn_layers: 2, hidden: 3, head_layers: 1, head_nodes: 4 };
    let model = Model::new(Variant::DeepJointFeature, &cfg, 2, &[0.0, 0.0], sub_seed(seed, 3))?;
    let batch: Vec<&PreparedPatient> = prepared.iter().collect();
    let weights = [0.5, 0.2, 0.3];
    let mut reports = Vec::new();
    for (name, pick) in [("l_L", 0usize), ("l_I", 1), ("l_M", 2), ("l_S", 3), ("combined", 4)] {
        let report = crate::autodiff::finite_difference_check(
            |g, p| {
                if pick == 3 {
                    return Ok(model.batch_losses(g, p, &batch, false)?.l_s);
                }
                let losses = model.batch_losses(g, p, &batch, true)?;
                let pres = losses.presence.ok_or_else(|| Error::Numerical("presence losses missing".into()))?;
                if pick < 3 {
                    Ok(pres[pick])
                } else {
                    combined_loss_graph(g, losses.l_s, pres, weights, 0.5)
                }
            },
            &model.store,
            step,
            tolerance,
        )?;
        reports.push((name.to_string(), report));
    }

    let grud_inputs = prepare(&windowed, &stats, InputMode::GrudStyle)?;
    let grud = Model::new(Variant::GruD, &cfg, 2, &[0.1, -0.2], sub_seed(seed, 4))?;
    let batch: Vec<&PreparedPatient> = grud_inputs.iter().collect();
    let report = crate::autodiff::finite_difference_check(
        |g, p| Ok(grud.batch_losses(g, p, &batch, false)?.l_s),
        &grud.store,
        step,
        tolerance,
    )?;
    reports.push(("l_S (GRU-D)".to_string(), report));
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dwa_cases() {
        assert_eq!(dwa_weights([1.0; 3], [1.0; 3], 2.0).unwrap(), [1.0 / 3.0; 3]);
        assert_eq!(dwa_weights([1.0; 3], [2.0, 1.0, 1.0], 1.0).unwrap(), [0.5, 0.25, 0.25]);
        let a = dwa_weights([1.0, 2.0, 3.0], [1.5, 1.0, 4.0], 2.0).unwrap();
        let b = dwa_weights([2.0, 4.0, 6.0], [3.0, 2.0, 8.0], 2.0).unwrap();
        for t in 0..3 {
            assert!((a[t] - b[t]).abs() < 1e-15);
        }
        assert!(dwa_weights([0.0, 1.0, 1.0], [1.0; 3], 2.0).is_err());
    }

    #[test]
    fn dwa_state_handles_negative_losses() {
        let mut s = DwaState::new();
        assert_eq!(s.next_weights(2.0).unwrap(), [1.0 / 3.0; 3]);
        s.record([-3.0, 1.0, 0.5]);
        assert_eq!(s.next_weights(2.0).unwrap(), [1.0 / 3.0; 3]);
        s.record([-4.0, 0.8, 0.6]);
        let w = s.next_weights(2.0).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn combined_cases() {
        assert_eq!(combined_loss(1.7, 5.0, 3.0, 2.0, [0.2, 0.3, 0.5], 0.0), 1.7);
        assert_eq!(combined_loss(9.0, 2.5, 2.5, 2.5, [1.0 / 3.0; 3], 1.0), 2.5);
        assert_eq!(combined_loss(2.0, 4.0, 0.0, 0.0, [0.5, 0.25, 0.25], 0.5), 2.0);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("grud".parse::<Variant>().unwrap(), Variant::GruD);
        let err = "Nope".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("DeepJointFineTune") && err.contains("Last"));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.multitask_epochs = 2000;
        assert!(c.validate().is_err());
        let c = TrainConfig { validation_fraction: 1.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }
}
