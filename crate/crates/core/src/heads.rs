//! Task heads on top of the embedding: longitudinal (Gaussian),
//! missingness (Bernoulli), inter-observation timing (monotone cumulative
//! hazard network) and survival (proportional hazards).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamBinding, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-4;
pub const LOGIT_CLAMP: f64 = 30.0;
pub const INTENSITY_FLOOR: f64 = 1e-10;
const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_8;

/// Fully connected network with ReLU hidden layers and a linear output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<(ParamId, Option<ParamId>)>,
    pub input_width: usize,
    pub output_width: usize,
}

impl Mlp {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input_width: usize,
        hidden_layers: usize,
        hidden_width: usize,
        output_width: usize,
        output_bias: bool,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut fan_in = input_width;
        for l in 0..=hidden_layers {
            let last = l == hidden_layers;
            let out = if last { output_width } else { hidden_width };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = store.insert_uniform(format!("{prefix}.{l}.w"), fan_in, out, bound, rng);
            let b = (!last || output_bias).then(|| store.insert(format!("{prefix}.{l}.b"), Tensor::zeros(1, out)));
            layers.push((w, b));
            fan_in = out;
        }
        Mlp { layers, input_width, output_width }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamBinding, x: Var) -> Result<Var> {
        let mut z = x;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            z = g.matmul(z, p[*w])?;
            if let Some(b) = b {
                z = g.add(z, p[*b])?;
            }
            if l + 1 < self.layers.len() {
                z = g.relu(z)?;
            }
        }
        Ok(z)
    }
}

// ---------------------------------------------------------------------------
// Longitudinal head

/// Gaussian predictive distribution of the next lab values.
#[derive(Clone, Debug, PartialEq)]
pub struct LongitudinalPrediction {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl LongitudinalPrediction {
    pub fn nll(&self, labs: &Tensor, mask: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let mu = g.constant(self.mu.clone());
        let sigma = g.constant(self.sigma.clone());
        let v = longitudinal_nll(&mut g, mu, sigma, labs, mask)?;
        g.scalar(v)
    }
}

/// Masked Gaussian negative log-likelihood summed over all entries.
/// Entries with a zero mask contribute exactly zero.
pub fn longitudinal_nll(g: &mut Graph, mu: Var, sigma: Var, labs: &Tensor, mask: &Tensor) -> Result<Var> {
    if g.value(mu).shape() != labs.shape() || labs.shape() != mask.shape() {
        return Err(Error::Shape("longitudinal_nll: mu, labs and mask must align".into()));
    }
    if !labs.is_finite() {
        return Err(Error::NonFinite { op: "longitudinal_nll" });
    }
    if g.value(sigma).data().iter().any(|&s| s <= 0.0) {
        return Err(Error::Domain { op: "longitudinal_nll", detail: "sigma must be positive".into() });
    }
    // masked coordinates never see the caller's values
    let masked_labs = Tensor::new(
        labs.rows(),
        labs.cols(),
        labs.data().iter().zip(mask.data()).map(|(&x, &m)| if m != 0.0 { x } else { 0.0 }).collect(),
    )?;
    let x = g.constant(masked_labs);
    let m = g.constant(mask.clone());
    let diff = g.sub(x, mu)?;
    let z = g.div(diff, sigma)?;
    let z2 = g.square(z)?;
    let half = g.scale(z2, 0.5)?;
    let log_sigma = g.log(sigma)?;
    let term = g.add(half, log_sigma)?;
    let term = g.add_scalar(term, HALF_LOG_TWO_PI)?;
    let masked = g.mul(term, m)?;
    g.sum(masked)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LongitudinalHead {
    pub mlp: Mlp,
    pub n_labs: usize,
}

impl LongitudinalHead {
    pub fn init<R: Rng>(store: &mut ParamStore, embed: usize, n_labs: usize, layers: usize, nodes: usize, rng: &mut R) -> Self {
        LongitudinalHead { mlp: Mlp::init(store, "head.l", embed + 1, layers, nodes, 2 * n_labs, true, rng), n_labs }
    }

    /// `(mu, sigma)`, each `[rows, K]`, from embeddings and prediction gaps in hours.
    pub fn predict(&self, g: &mut Graph, p: &ParamBinding, h: Var, gap_hours: Var) -> Result<(Var, Var)> {
        let x = g.concat_cols(&[h, gap_hours])?;
        let out = self.mlp.forward(g, p, x)?;
        let k = self.n_labs;
        let mu = g.slice_cols(out, 0, k)?;
        let raw = g.slice_cols(out, k, 2 * k)?;
        let sp = g.softplus(raw)?;
        let sigma = g.add_scalar(sp, SIGMA_FLOOR)?;
        Ok((mu, sigma))
    }
}

// ---------------------------------------------------------------------------
// Missingness head

/// Bernoulli probabilities of each lab being measured at the next step.
#[derive(Clone, Debug, PartialEq)]
pub struct MissingnessPrediction {
    pub probs: Vec<f64>,
}

impl MissingnessPrediction {
    pub fn nll(&self, mask: &[f64]) -> Result<f64> {
        if mask.len() != self.probs.len() {
            return Err(Error::Shape("missingness_nll: mask width".into()));
        }
        let mut total = 0.0;
        for (&p, &m) in self.probs.iter().zip(mask) {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Domain { op: "missingness_nll", detail: format!("probability {p}") });
            }
            total -= m * p.ln() + (1.0 - m) * (1.0 - p).ln();
        }
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "missingness_nll" });
        }
        Ok(total)
    }
}

/// Binary cross-entropy from logits, `softplus(z) - m z`, summed.
pub fn missingness_nll(g: &mut Graph, logits: Var, mask: &Tensor) -> Result<Var> {
    if g.value(logits).shape() != mask.shape() {
        return Err(Error::Shape("missingness_nll: logits and mask must align".into()));
    }
    let z = g.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP)?;
    let m = g.constant(mask.clone());
    let sp = g.softplus(z)?;
    let mz = g.mul(m, z)?;
    let d = g.sub(sp, mz)?;
    g.sum(d)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MissingnessHead {
    pub mlp: Mlp,
}

impl MissingnessHead {
    pub fn init<R: Rng>(store: &mut ParamStore, embed: usize, n_labs: usize, layers: usize, nodes: usize, rng: &mut R) -> Self {
        MissingnessHead { mlp: Mlp::init(store, "head.m", embed + 1, layers, nodes, n_labs, true, rng) }
    }

    pub fn logits(&self, g: &mut Graph, p: &ParamBinding, h: Var, gap_hours: Var) -> Result<Var> {
        let x = g.concat_cols(&[h, gap_hours])?;
        self.mlp.forward(g, p, x)
    }

    pub fn predict(&self, g: &mut Graph, p: &ParamBinding, h: Var, gap_hours: Var) -> Result<MissingnessPrediction> {
        let z = self.logits(g, p, h, gap_hours)?;
        let z = g.clamp(z, -LOGIT_CLAMP, LOGIT_CLAMP)?;
        let s = g.sigmoid(z)?;
        Ok(MissingnessPrediction { probs: g.value(s).data().to_vec() })
    }
}

// ---------------------------------------------------------------------------
// Temporal head

/// Cumulative intensity network `I(h, t)`, monotone in `t`.
///
/// The time input enters through weights that are squares of free
/// parameters and flows through tanh layers with squared weights, so every
/// path from `t` to the output is nondecreasing. The derivative in `t` is
/// carried alongside the forward pass, giving the intensity exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemporalHeadParams {
    pub w_embed: ParamId,
    pub w_time_free: ParamId,
    pub b_first: ParamId,
    /// Extra tanh layers: `(free weight, bias)`.
    pub hidden: Vec<(ParamId, ParamId)>,
    pub w_out_free: ParamId,
    /// Linear-in-time skip term keeps the cumulative hazard unbounded.
    pub w_skip_free: ParamId,
}

impl TemporalHeadParams {
    /// `layers` is clamped to at least one tanh layer.
    pub fn init<R: Rng>(store: &mut ParamStore, embed: usize, layers: usize, nodes: usize, rng: &mut R) -> Self {
        let layers = layers.max(1);
        let be = 1.0 / (embed as f64).sqrt();
        let w_embed = store.insert_uniform("head.i.w_embed", embed, nodes, be, rng);
        let w_time_free = store.insert_uniform("head.i.w_time_free", 1, nodes, 1.0, rng);
        let b_first = store.insert("head.i.b_first", Tensor::zeros(1, nodes));
        let bn = 1.0 / (nodes as f64).sqrt();
        let hidden = (1..layers)
            .map(|l| {
                let w = store.insert_uniform(format!("head.i.{l}.w_free"), nodes, nodes, bn, rng);
                let b = store.insert(format!("head.i.{l}.b"), Tensor::zeros(1, nodes));
                (w, b)
            })
            .collect();
        let w_out_free = store.insert_uniform("head.i.w_out_free", nodes, 1, bn, rng);
        let w_skip_free = store.insert("head.i.w_skip_free", Tensor::scalar(0.5));
        TemporalHeadParams { w_embed, w_time_free, b_first, hidden, w_out_free, w_skip_free }
    }

    /// Cumulative hazard `I(h,t) - I(h,0)` and intensity `dI/dt`, both
    /// `[rows, 1]`, for embeddings `h` (`[rows, H]`) and times `t` (`[rows, 1]`).
    pub fn hazard(&self, g: &mut Graph, p: &ParamBinding, h: Var, t: Var) -> Result<(Var, Var)> {
        if g.value(t).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain { op: "cumulative_hazard", detail: "negative time".into() });
        }
        let rows = g.value(t).rows();
        let base = g.linear(h, p[self.w_embed], p[self.b_first])?;
        let w_time = g.square(p[self.w_time_free])?;
        let squared: Vec<(Var, ParamId)> = self
            .hidden
            .iter()
            .map(|(w, b)| g.square(p[*w]).map(|sq| (sq, *b)))
            .collect::<Result<_>>()?;
        let w_out = g.square(p[self.w_out_free])?;
        let w_skip = g.square(p[self.w_skip_free])?;

        // I(h, t) and dI/dt
        let eval = |g: &mut Graph, t: Var, want_rate: bool| -> Result<(Var, Option<Var>)> {
            let tw = g.matmul(t, w_time)?;
            let a = g.add(base, tw)?;
            let mut z = g.tanh(a)?;
            let mut dz = if want_rate { Some(tanh_slope(g, z, w_time)?) } else { None };
            for &(w_sq, b) in &squared {
                let zw = g.matmul(z, w_sq)?;
                let a = g.add(zw, p[b])?;
                z = g.tanh(a)?;
                if let Some(d) = dz {
                    let dw = g.matmul(d, w_sq)?;
                    dz = Some(tanh_slope(g, z, dw)?);
                }
            }
            let zo = g.matmul(z, w_out)?;
            let skip = g.mul(t, w_skip)?;
            let value = g.add(zo, skip)?;
            let rate = match dz {
                Some(d) => {
                    let dzo = g.matmul(d, w_out)?;
                    Some(g.add(dzo, w_skip)?)
                }
                None => None,
            };
            Ok((value, rate))
        };
        let (at_t, rate) = eval(g, t, true)?;
        let zero = g.constant(Tensor::zeros(rows, 1));
        let (at_zero, _) = eval(g, zero, false)?;
        let cumulative = g.sub(at_t, at_zero)?;
        Ok((cumulative, rate.expect("rate requested")))
    }
}

/// `(1 - z^2) * upstream`, the derivative through a tanh layer.
fn tanh_slope(g: &mut Graph, z: Var, upstream: Var) -> Result<Var> {
    let z2 = g.square(z)?;
    let one_minus = g.neg(z2)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    g.mul(one_minus, upstream)
}

/// `Λ(h, t)` for a single embedding row.
pub fn cumulative_hazard(store: &ParamStore, head: &TemporalHeadParams, h: &Tensor, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(Error::Domain { op: "cumulative_hazard", detail: format!("t = {t} < 0") });
    }
    let mut g = Graph::new();
    let p = g.bind(store);
    let hv = g.constant(h.clone());
    let tv = g.constant(Tensor::scalar(t));
    let (lam, _) = head.hazard(&mut g, &p, hv, tv)?;
    g.scalar(lam)
}

/// Intensity `dΛ/dt` at `t` for a single embedding row.
pub fn intensity(store: &ParamStore, head: &TemporalHeadParams, h: &Tensor, t: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.bind(store);
    let hv = g.constant(h.clone());
    let tv = g.constant(Tensor::scalar(t));
    let (_, rate) = head.hazard(&mut g, &p, hv, tv)?;
    g.scalar(rate)
}

/// Point-process negative log-likelihood of the observed gaps,
/// `Σ Λ(h, ε) - log max(λ(h, ε), floor)`.
pub fn tpp_nll(g: &mut Graph, p: &ParamBinding, head: &TemporalHeadParams, h: Var, gaps: Var) -> Result<Var> {
    if let Some(&bad) = g.value(gaps).data().iter().find(|&&v| v <= 0.0) {
        return Err(Error::Domain { op: "tpp_nll", detail: format!("gap {bad} must be positive") });
    }
    let (cumulative, rate) = head.hazard(g, p, h, gaps)?;
    let floored = g.clamp_min(rate, INTENSITY_FLOOR)?;
    let log_rate = g.log(floored)?;
    let d = g.sub(cumulative, log_rate)?;
    g.sum(d)
}

// ---------------------------------------------------------------------------
// Survival head

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SurvivalHead {
    pub mlp: Mlp,
}

impl SurvivalHead {
    /// The output layer has no bias: the partial likelihood cannot see one.
    pub fn init<R: Rng>(store: &mut ParamStore, input_width: usize, layers: usize, nodes: usize, rng: &mut R) -> Self {
        SurvivalHead { mlp: Mlp::init(store, "head.s", input_width, layers, nodes, 1, false, rng) }
    }

    pub fn score(&self, g: &mut Graph, p: &ParamBinding, x: Var) -> Result<Var> {
        self.mlp.forward(g, p, x)
    }
}

/// Value of the partial likelihood loss and whether it was degenerate.
pub struct CoxLoss {
    pub value: Var,
    /// Set when the sample had no events; the loss is then the constant zero.
    pub no_events: bool,
}

/// Sort order by decreasing time, and for each sorted position the last
/// position whose time is still `>=` its own (end of the tie group).
fn risk_set_layout(times: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let n = times.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));
    let mut group_end = vec![0; n];
    let mut pos = 0;
    while pos < n {
        let mut end = pos;
        while end + 1 < n && times[order[end + 1]] == times[order[pos]] {
            end += 1;
        }
        for q in pos..=end {
            group_end[q] = end;
        }
        pos = end + 1;
    }
    (order, group_end)
}

/// Negative Cox partial log-likelihood with Breslow handling of ties:
/// `-Σ_{events} [s_i - log Σ_{T_k >= T_i} exp(s_k)]`.
pub fn cox_partial_nll(g: &mut Graph, scores: Var, times: &[f64], events: &[bool]) -> Result<CoxLoss> {
    let n = times.len();
    if n == 0 || events.len() != n || g.value(scores).shape() != [n, 1] {
        return Err(Error::Shape(format!(
            "cox_partial_nll: {} scores, {} times, {} events",
            g.value(scores).rows(),
            n,
            events.len()
        )));
    }
    if times.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::Domain { op: "cox_partial_nll", detail: "times must be positive".into() });
    }
    let event_idx: Vec<usize> = (0..n).filter(|&i| events[i]).collect();
    if event_idx.is_empty() {
        let zero = g.scalar_const(0.0);
        return Ok(CoxLoss { value: zero, no_events: true });
    }
    let (order, group_end) = risk_set_layout(times);
    let mut position = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        position[i] = pos;
    }
    let sorted = g.gather_rows(scores, &order)?;
    let lse = g.log_cumsumexp(sorted)?;
    let risk_rows: Vec<usize> = event_idx.iter().map(|&i| group_end[position[i]]).collect();
    let risk_terms = g.gather_rows(lse, &risk_rows)?;
    let event_scores = g.gather_rows(scores, &event_idx)?;
    let a = g.sum(risk_terms)?;
    let b = g.sum(event_scores)?;
    let value = g.sub(a, b)?;
    Ok(CoxLoss { value, no_events: false })
}

/// Convenience evaluation on plain numbers.
pub fn cox_partial_nll_value(scores: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(Tensor::column(scores.to_vec()));
    let loss = cox_partial_nll(&mut g, s, times, events)?;
    g.scalar(loss.value)
}

/// Piecewise-constant baseline cumulative hazard, right-continuous,
/// stored as `(event time, cumulative value)` knots.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineHazard {
    pub knots: Vec<(f64, f64)>,
}

impl BaselineHazard {
    /// `Λ0(t)`; zero before the first knot.
    pub fn at(&self, t: f64) -> f64 {
        let n = self.knots.partition_point(|&(kt, _)| kt <= t);
        if n == 0 {
            0.0
        } else {
            self.knots[n - 1].1
        }
    }
}

/// Breslow estimator: at each distinct event time the cumulative hazard
/// jumps by `#events / Σ_{T_k >= τ} exp(s_k)`.
pub fn breslow_baseline(scores: &[f64], times: &[f64], events: &[bool]) -> Result<BaselineHazard> {
    let n = times.len();
    if scores.len() != n || events.len() != n {
        return Err(Error::Shape("breslow_baseline: lengths differ".into()));
    }
    let (order, _) = risk_set_layout(times);
    // walk from the latest time backwards accumulating the risk-set sum
    let mut jumps: Vec<(f64, f64)> = Vec::new();
    let mut risk_sum = 0.0;
    let mut pos = 0;
    while pos < n {
        let t = times[order[pos]];
        let mut d = 0.0;
        while pos < n && times[order[pos]] == t {
            let i = order[pos];
            risk_sum += scores[i].exp();
            if events[i] {
                d += 1.0;
            }
            pos += 1;
        }
        if d > 0.0 {
            jumps.push((t, d / risk_sum));
        }
    }
    jumps.reverse();
    let mut acc = 0.0;
    let knots = jumps
        .into_iter()
        .map(|(t, inc)| {
            acc += inc;
            (t, acc)
        })
        .collect();
    Ok(BaselineHazard { knots })
}

/// Risk score of one patient against a population baseline.
#[derive(Clone, Copy, Debug)]
pub struct SurvivalEstimate<'a> {
    pub risk_score: f64,
    pub baseline: &'a BaselineHazard,
}

impl SurvivalEstimate<'_> {
    pub fn survival(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        (-self.baseline.at(t) * self.risk_score.exp()).exp()
    }
}

/// `S(τ | x) = exp(-Λ0(τ) exp(score))` at each horizon.
pub fn survival_curve(estimate: &SurvivalEstimate<'_>, horizons: &[f64]) -> Vec<f64> {
    horizons.iter().map(|&t| estimate.survival(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_nll_values() {
        let one = |x: f64, m: f64| {
            LongitudinalPrediction { mu: Tensor::scalar(0.0), sigma: Tensor::scalar(1.0) }
                .nll(&Tensor::scalar(x), &Tensor::scalar(m))
                .unwrap()
        };
        assert!((one(0.0, 1.0) - 0.918939).abs() < 1e-6);
        assert!((one(1.0, 1.0) - 1.418939).abs() < 1e-6);
        assert_eq!(one(123.0, 0.0), 0.0);
    }

    #[test]
    fn gaussian_nll_ignores_masked_values() {
        let pred = LongitudinalPrediction {
            mu: Tensor::row(vec![0.1, -0.3, 2.0]),
            sigma: Tensor::row(vec![0.5, 1.5, 0.9]),
        };
        let mask = Tensor::row(vec![1.0, 0.0, 1.0]);
        let a = pred.nll(&Tensor::row(vec![0.4, 7.0, 1.0]), &mask).unwrap();
        let b = pred.nll(&Tensor::row(vec![0.4, -1e6, 1.0]), &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bernoulli_nll_values() {
        let p = MissingnessPrediction { probs: vec![0.5] };
        assert!((p.nll(&[1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let p = MissingnessPrediction { probs: vec![1.0 - 1e-12] };
        assert!(p.nll(&[1.0]).unwrap() < 1e-9);
        let p = MissingnessPrediction { probs: vec![0.9, 0.2] };
        let v = p.nll(&[1.0, 0.0]).unwrap();
        assert!((v - 0.328504).abs() < 1e-6);
        assert!((v + (0.9f64.ln() + 0.8f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn logit_form_matches_probability_form() {
        let probs = [0.9, 0.2, 0.55];
        let mask = [1.0, 0.0, 0.0];
        let logits: Vec<f64> = probs.iter().map(|p: &f64| (p / (1.0 - p)).ln()).collect();
        let mut g = Graph::new();
        let z = g.constant(Tensor::row(logits));
        let v = missingness_nll(&mut g, z, &Tensor::row(mask.to_vec())).unwrap();
        let direct = MissingnessPrediction { probs: probs.to_vec() }.nll(&mask).unwrap();
        assert!((g.scalar(v).unwrap() - direct).abs() < 1e-12);
    }

    fn frozen_rate_head(rate: f64) -> (ParamStore, TemporalHeadParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = TemporalHeadParams::init(&mut store, 3, 1, 4, &mut rng);
        store.get_mut(head.w_out_free).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut(head.w_skip_free).data_mut()[0] = rate.sqrt();
        (store, head)
    }

    fn tpp_value(store: &ParamStore, head: &TemporalHeadParams, gap: f64) -> f64 {
        let mut g = Graph::new();
        let p = g.bind(store);
        let h = g.constant(Tensor::row(vec![0.3, -0.2, 1.0]));
        let gaps = g.constant(Tensor::scalar(gap));
        let v = tpp_nll(&mut g, &p, head, h, gaps).unwrap();
        g.scalar(v).unwrap()
    }

    #[test]
    fn unit_rate_process() {
        let (store, head) = frozen_rate_head(1.0);
        assert!((tpp_value(&store, &head, 1.0) - 1.0).abs() < 1e-12);
        let (store, head) = frozen_rate_head(2.0);
        assert!((tpp_value(&store, &head, 0.5) - (1.0 - 2f64.ln())).abs() < 1e-12);
        assert!((tpp_value(&store, &head, 0.5) - 0.306853).abs() < 1e-6);
    }

    #[test]
    fn hazard_anchored_and_monotone() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let head = TemporalHeadParams::init(&mut store, 3, 2, 5, &mut rng);
        let h = Tensor::row(vec![0.5, -1.0, 0.2]);
        assert_eq!(cumulative_hazard(&store, &head, &h, 0.0).unwrap(), 0.0);
        let mut prev = 0.0;
        for i in 1..50 {
            let t = i as f64 * 0.2;
            let v = cumulative_hazard(&store, &head, &h, t).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        assert!(cumulative_hazard(&store, &head, &h, -1.0).is_err());
    }

    #[test]
    fn intensity_is_time_derivative() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = TemporalHeadParams::init(&mut store, 2, 3, 4, &mut rng);
        let h = Tensor::row(vec![-0.4, 0.9]);
        for &t in &[0.1, 1.0, 3.7] {
            let step = 1e-6;
            let fd = (cumulative_hazard(&store, &head, &h, t + step).unwrap()
                - cumulative_hazard(&store, &head, &h, t - step).unwrap())
                / (2.0 * step);
            let exact = intensity(&store, &head, &h, t).unwrap();
            assert!((fd - exact).abs() < 1e-7 * exact.abs().max(1.0), "{fd} vs {exact}");
        }
    }

    #[test]
    fn tpp_rejects_nonpositive_gap() {
        let (store, head) = frozen_rate_head(1.0);
        let mut g = Graph::new();
        let p = g.bind(&store);
        let h = g.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
        let gaps = g.constant(Tensor::scalar(0.0));
        assert!(tpp_nll(&mut g, &p, &head, h, gaps).is_err());
    }

    #[test]
    fn cox_values() {
        assert_eq!(cox_partial_nll_value(&[0.0], &[1.0], &[true]).unwrap(), 0.0);
        let v = cox_partial_nll_value(&[0.0, 0.0], &[1.0, 2.0], &[true, true]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cox_shift_and_permutation_invariance() {
        let s = [0.3, -1.2, 0.8, 0.1, 2.0];
        let t = [2.0, 1.0, 3.5, 2.0, 0.5];
        let d = [true, false, true, true, false];
        let base = cox_partial_nll_value(&s, &t, &d).unwrap();
        let shifted: Vec<f64> = s.iter().map(|v| v + 4.2).collect();
        assert!((cox_partial_nll_value(&shifted, &t, &d).unwrap() - base).abs() < 1e-10);
        let perm = [3, 0, 4, 2, 1];
        let ps: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
        let pt: Vec<f64> = perm.iter().map(|&i| t[i]).collect();
        let pd: Vec<bool> = perm.iter().map(|&i| d[i]).collect();
        assert!((cox_partial_nll_value(&ps, &pt, &pd).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn cox_matches_direct_sum_with_ties() {
        let s: [f64; 6] = [0.3, -1.2, 0.8, 0.1, 2.0, -0.5];
        let t = [2.0, 1.0, 2.0, 2.0, 0.5, 1.0];
        let d = [true, true, false, true, false, true];
        let mut direct = 0.0;
        for i in 0..s.len() {
            if d[i] {
                let denom: f64 = (0..s.len()).filter(|&k| t[k] >= t[i]).map(|k| s[k].exp()).sum();
                direct -= s[i] - denom.ln();
            }
        }
        assert!((cox_partial_nll_value(&s, &t, &d).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn cox_all_censored_is_flagged() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::column(vec![0.1, 0.2]));
        let loss = cox_partial_nll(&mut g, s, &[1.0, 2.0], &[false, false]).unwrap();
        assert!(loss.no_events);
        assert_eq!(g.scalar(loss.value).unwrap(), 0.0);
    }

    #[test]
    fn breslow_values() {
        let b = breslow_baseline(&[0.0, 0.0], &[1.0, 2.0], &[true, false]).unwrap();
        assert_eq!(b.knots, vec![(1.0, 0.5)]);
        assert_eq!(b.at(0.999), 0.0);
        assert_eq!(b.at(1.0), 0.5);
        assert_eq!(b.at(10.0), 0.5);
        let none = breslow_baseline(&[0.3, 0.1], &[1.0, 2.0], &[false, false]).unwrap();
        assert_eq!(none.at(5.0), 0.0);
    }

    #[test]
    fn survival_curve_values() {
        let b = BaselineHazard { knots: vec![(1.0, 0.5)] };
        let est = SurvivalEstimate { risk_score: 0.0, baseline: &b };
        let s = survival_curve(&est, &[0.0, 0.5, 1.0, 3.0]);
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], 1.0);
        assert!((s[2] - 0.606531).abs() < 1e-6);
        let high = SurvivalEstimate { risk_score: 50.0, baseline: &b };
        assert!(high.survival(2.0) < 1e-12);
    }
}
