//! Input construction for each experiment arm and the recurrent encoders
//! (stacked LSTM, GRU-D) that turn an irregular sequence into embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamBinding, ParamId, ParamStore, Tensor, Var};
use crate::data::{resample_hourly, NormalizationStats, PatientRecord, MINUTES_PER_HOUR, WINDOW_HOURS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputMode {
    /// Imputed values only, one step per observation.
    ValuesOnly,
    /// Values, mask, then elapsed time since the previous observation.
    Featurized,
    /// Values, mask and per-lab time since last measurement, kept apart.
    GrudStyle,
    /// Values on the hourly grid of the observation window.
    ResampledHourly,
    /// Final imputed vector.
    StaticLast,
    /// Final imputed vector followed by per-lab test counts.
    StaticLastPlusCounts,
}

impl InputMode {
    pub fn is_static(self) -> bool {
        matches!(self, InputMode::StaticLast | InputMode::StaticLastPlusCounts)
    }

    /// Width of one assembled input vector for `k` labs.
    pub fn input_width(self, k: usize) -> usize {
        match self {
            InputMode::ValuesOnly | InputMode::ResampledHourly | InputMode::StaticLast => k,
            InputMode::Featurized => 2 * k + 1,
            InputMode::GrudStyle => 2 * k,
            InputMode::StaticLastPlusCounts => 2 * k,
        }
    }
}

/// Model-ready input for one patient.
#[derive(Clone, Debug, PartialEq)]
pub enum AssembledInput {
    Sequence(Vec<Vec<f64>>),
    Static(Vec<f64>),
    Grud { values: Vec<Vec<f64>>, masks: Vec<Vec<f64>>, deltas_hours: Vec<Vec<f64>> },
}

impl AssembledInput {
    pub fn n_steps(&self) -> usize {
        match self {
            AssembledInput::Sequence(s) => s.len(),
            AssembledInput::Static(_) => 1,
            AssembledInput::Grud { values, .. } => values.len(),
        }
    }
}

/// Per-lab hours since the lab was last measured, GRU-D style.
fn grud_deltas(record: &PatientRecord) -> Vec<Vec<f64>> {
    let k = record.n_labs();
    let gaps = record.gaps_hours();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(record.n_steps());
    for j in 0..record.n_steps() {
        let row = (0..k)
            .map(|lab| {
                if j == 0 || record.masks[j - 1][lab] == 1 {
                    gaps[j]
                } else {
                    gaps[j] + out[j - 1][lab]
                }
            })
            .collect();
        out.push(row);
    }
    out
}

/// Builds raw inputs from an imputed record. Elapsed time and counts are
/// left in their natural units (minutes, tests); see [`scale_inputs`].
pub fn assemble_inputs(record: &PatientRecord, mode: InputMode) -> Result<AssembledInput> {
    if record.n_steps() == 0 {
        return Err(Error::data(format!("patient {} has no observations", record.id)));
    }
    let values = record.dense_values()?;
    let masks: Vec<Vec<f64>> =
        record.masks.iter().map(|m| m.iter().map(|&v| f64::from(v)).collect()).collect();
    Ok(match mode {
        InputMode::ValuesOnly => AssembledInput::Sequence(values),
        InputMode::Featurized => {
            let gaps = record.gaps();
            AssembledInput::Sequence(
                values
                    .into_iter()
                    .zip(&masks)
                    .zip(gaps)
                    .map(|((mut v, m), g)| {
                        v.extend_from_slice(m);
                        v.push(g);
                        v
                    })
                    .collect(),
            )
        }
        InputMode::GrudStyle => {
            AssembledInput::Grud { values, masks, deltas_hours: grud_deltas(record) }
        }
        InputMode::ResampledHourly => {
            AssembledInput::Sequence(resample_hourly(record, WINDOW_HOURS as usize)?)
        }
        InputMode::StaticLast => AssembledInput::Static(values.last().cloned().unwrap_or_default()),
        InputMode::StaticLastPlusCounts => {
            let mut v = values.last().cloned().unwrap_or_default();
            v.extend(record.lab_counts());
            AssembledInput::Static(v)
        }
    })
}

/// Rescales the non-lab columns: elapsed minutes become z-scored hours and
/// counts are z-scored with training statistics.
pub fn scale_inputs(input: &mut AssembledInput, mode: InputMode, stats: &NormalizationStats) {
    let k = stats.n_labs();
    match (mode, input) {
        (InputMode::Featurized, AssembledInput::Sequence(rows)) => {
            for r in rows {
                let last = r.len() - 1;
                r[last] = stats.scale_gap_hours(r[last] / MINUTES_PER_HOUR);
            }
        }
        (InputMode::StaticLastPlusCounts, AssembledInput::Static(v)) => {
            for lab in 0..k {
                v[k + lab] = stats.scale_count(lab, v[k + lab]);
            }
        }
        _ => {}
    }
}

/// Hidden states of every step, top layer only.
pub struct EncodedSequence {
    pub hidden: Vec<Var>,
    pub width: usize,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }

    pub fn last(&self) -> Var {
        *self.hidden.last().expect("non-empty sequence")
    }

    /// All hidden states stacked into a `[steps, width]` matrix.
    pub fn stacked(&self, g: &mut Graph) -> Result<Var> {
        g.concat_rows(&self.hidden)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LstmLayer {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LstmParams {
    pub layers: Vec<LstmLayer>,
    pub input_width: usize,
    pub hidden: usize,
}

impl LstmParams {
    /// Gate order is input, forget, cell, output; forget bias starts at 1.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_width: usize,
        hidden: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let fan_in = if l == 0 { input_width } else { hidden };
            let bound = 1.0 / ((fan_in + hidden) as f64).sqrt();
            let w_input = store.insert_uniform(format!("{prefix}.{l}.w_input"), fan_in, 4 * hidden, bound, rng);
            let w_hidden = store.insert_uniform(format!("{prefix}.{l}.w_hidden"), hidden, 4 * hidden, bound, rng);
            let mut b = vec![0.0; 4 * hidden];
            b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
            let bias = store.insert(format!("{prefix}.{l}.bias"), Tensor::row(b));
            layers.push(LstmLayer { w_input, w_hidden, bias });
        }
        LstmParams { layers, input_width, hidden }
    }
}

/// Stacked LSTM over `inputs` (`[steps, input_width]`), zero initial state.
pub fn lstm_forward(g: &mut Graph, p: &ParamBinding, params: &LstmParams, inputs: Var) -> Result<EncodedSequence> {
    let [steps, width] = g.value(inputs).shape();
    if width != params.input_width {
        return Err(Error::Shape(format!("lstm expects input width {}, got {width}", params.input_width)));
    }
    if steps == 0 {
        return Err(Error::Shape("lstm needs at least one step".into()));
    }
    let hs = params.hidden;
    let mut layer_input = inputs;
    let mut hidden = Vec::new();
    for (li, layer) in params.layers.iter().enumerate() {
        let projected = g.linear(layer_input, p[layer.w_input], p[layer.bias])?;
        let mut h = g.constant(Tensor::zeros(1, hs));
        let mut c = g.constant(Tensor::zeros(1, hs));
        hidden = Vec::with_capacity(steps);
        for j in 0..steps {
            let xj = g.slice_rows(projected, j, j + 1)?;
            let hw = g.matmul(h, p[layer.w_hidden])?;
            let z = g.add(xj, hw)?;
            let zi = g.slice_cols(z, 0, hs)?;
            let zf = g.slice_cols(z, hs, 2 * hs)?;
            let zg = g.slice_cols(z, 2 * hs, 3 * hs)?;
            let zo = g.slice_cols(z, 3 * hs, 4 * hs)?;
            let i = g.sigmoid(zi)?;
            let f = g.sigmoid(zf)?;
            let cand = g.tanh(zg)?;
            let o = g.sigmoid(zo)?;
            let fc = g.mul(f, c)?;
            let ig = g.mul(i, cand)?;
            c = g.add(fc, ig)?;
            let tc = g.tanh(c)?;
            h = g.mul(o, tc)?;
            hidden.push(h);
        }
        if li + 1 < params.layers.len() {
            layer_input = g.concat_rows(&hidden)?;
        }
    }
    Ok(EncodedSequence { hidden, width: hs })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GruParams {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_width: usize,
    pub hidden: usize,
}

impl GruParams {
    /// Gate order is update, reset, candidate.
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, input_width: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((input_width + hidden) as f64).sqrt();
        let w_input = store.insert_uniform(format!("{prefix}.w_input"), input_width, 3 * hidden, bound, rng);
        let w_hidden = store.insert_uniform(format!("{prefix}.w_hidden"), hidden, 3 * hidden, bound, rng);
        let bias = store.insert(format!("{prefix}.bias"), Tensor::zeros(1, 3 * hidden));
        GruParams { w_input, w_hidden, bias, input_width, hidden }
    }
}

/// One GRU update: `h' = (1 - z) * h + z * tanh(x Wn + (r * h) Un + bn)`.
pub fn gru_cell(g: &mut Graph, p: &ParamBinding, params: &GruParams, x: Var, h: Var) -> Result<Var> {
    let hs = params.hidden;
    let xw = g.linear(x, p[params.w_input], p[params.bias])?;
    let wh = p[params.w_hidden];
    let wh_zr = g.slice_cols(wh, 0, 2 * hs)?;
    let wh_n = g.slice_cols(wh, 2 * hs, 3 * hs)?;
    let x_zr = g.slice_cols(xw, 0, 2 * hs)?;
    let x_n = g.slice_cols(xw, 2 * hs, 3 * hs)?;
    let h_zr = g.matmul(h, wh_zr)?;
    let zr_pre = g.add(x_zr, h_zr)?;
    let zr = g.sigmoid(zr_pre)?;
    let z = g.slice_cols(zr, 0, hs)?;
    let r = g.slice_cols(zr, hs, 2 * hs)?;
    let rh = g.mul(r, h)?;
    let rh_n = g.matmul(rh, wh_n)?;
    let n_pre = g.add(x_n, rh_n)?;
    let n = g.tanh(n_pre)?;
    // (1 - z) * h + z * n == h + z * (n - h)
    let diff = g.sub(n, h)?;
    let step = g.mul(z, diff)?;
    g.add(h, step)
}

/// Plain GRU over `[steps, input_width]`.
pub fn gru_forward(g: &mut Graph, p: &ParamBinding, params: &GruParams, inputs: Var) -> Result<EncodedSequence> {
    let [steps, width] = g.value(inputs).shape();
    if width != params.input_width {
        return Err(Error::Shape(format!("gru expects input width {}, got {width}", params.input_width)));
    }
    let mut h = g.constant(Tensor::zeros(1, params.hidden));
    let mut hidden = Vec::with_capacity(steps);
    for j in 0..steps {
        let x = g.slice_rows(inputs, j, j + 1)?;
        h = gru_cell(g, p, params, x, h)?;
        hidden.push(h);
    }
    Ok(EncodedSequence { hidden, width: params.hidden })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrudParams {
    pub gru: GruParams,
    pub decay_input_w: ParamId,
    pub decay_input_b: ParamId,
    pub decay_hidden_w: ParamId,
    pub decay_hidden_b: ParamId,
    /// Per-lab means of the (normalized) training values.
    pub empirical_mean: Vec<f64>,
}

impl GrudParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        n_labs: usize,
        hidden: usize,
        empirical_mean: Vec<f64>,
        rng: &mut R,
    ) -> Self {
        let gru = GruParams::init(store, &format!("{prefix}.gru"), 2 * n_labs, hidden, rng);
        let decay_input_w = store.insert_uniform(format!("{prefix}.decay_input_w"), 1, n_labs, 1.0, rng);
        let decay_input_b = store.insert(format!("{prefix}.decay_input_b"), Tensor::zeros(1, n_labs));
        let bound = 1.0 / (n_labs as f64).sqrt();
        let decay_hidden_w = store.insert_uniform(format!("{prefix}.decay_hidden_w"), n_labs, hidden, bound, rng);
        let decay_hidden_b = store.insert(format!("{prefix}.decay_hidden_b"), Tensor::zeros(1, hidden));
        GrudParams { gru, decay_input_w, decay_input_b, decay_hidden_w, decay_hidden_b, empirical_mean }
    }
}

/// `exp(-max(0, z))`, in `(0, 1]`.
fn decay(g: &mut Graph, z: Var) -> Result<Var> {
    let r = g.relu(z)?;
    let n = g.neg(r)?;
    g.exp(n)
}

/// GRU-D: inputs decay towards the empirical mean and the hidden state
/// decays towards zero as the time since the last measurement grows.
pub fn grud_forward(
    g: &mut Graph,
    p: &ParamBinding,
    params: &GrudParams,
    values: &[Vec<f64>],
    masks: &[Vec<f64>],
    deltas_hours: &[Vec<f64>],
) -> Result<EncodedSequence> {
    let steps = values.len();
    if steps == 0 || masks.len() != steps || deltas_hours.len() != steps {
        return Err(Error::Shape("grud: values, masks and deltas must align and be non-empty".into()));
    }
    if deltas_hours.iter().flatten().any(|&d| d < 0.0 || !d.is_finite()) {
        return Err(Error::Domain { op: "grud_forward", detail: "negative or non-finite delta".into() });
    }
    let k = params.empirical_mean.len();
    let mean = g.constant(Tensor::row(params.empirical_mean.clone()));
    let mut h = g.constant(Tensor::zeros(1, params.gru.hidden));
    let mut hidden = Vec::with_capacity(steps);
    for j in 0..steps {
        if values[j].len() != k || masks[j].len() != k || deltas_hours[j].len() != k {
            return Err(Error::Shape(format!("grud: step {j} width differs from {k} labs")));
        }
        let x = g.constant(Tensor::row(values[j].clone()));
        let m = g.constant(Tensor::row(masks[j].clone()));
        let inv_m = g.constant(Tensor::row(masks[j].iter().map(|v| 1.0 - v).collect()));
        let delta = g.constant(Tensor::row(deltas_hours[j].clone()));

        let dz = g.mul(delta, p[params.decay_input_w])?;
        let dz = g.add(dz, p[params.decay_input_b])?;
        let gamma_x = decay(g, dz)?;
        // gamma * x + (1 - gamma) * mean == mean + gamma * (x - mean)
        let centered = g.sub(x, mean)?;
        let scaled = g.mul(gamma_x, centered)?;
        let decayed = g.add(mean, scaled)?;
        let observed = g.mul(m, x)?;
        let filled = g.mul(inv_m, decayed)?;
        let x_hat = g.add(observed, filled)?;

        let hz = g.linear(delta, p[params.decay_hidden_w], p[params.decay_hidden_b])?;
        let gamma_h = decay(g, hz)?;
        let h_decayed = g.mul(gamma_h, h)?;

        let input = g.concat_cols(&[x_hat, m])?;
        h = gru_cell(g, p, &params.gru, input, h_decayed)?;
        hidden.push(h);
    }
    Ok(EncodedSequence { hidden, width: params.gru.hidden })
}
