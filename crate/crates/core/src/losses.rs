//! Pairwise losses and the baseline / variance-reduced empirical risks.
//!
//! Every risk here is a weighted sum over cells `(x, y1, y2)` and labels `u`:
//! `sum_c sum_u W[c][u] * loss(u; gap_c)`. The baseline uses the empirical
//! label counts, and the variance-reduced risk adds the control-variate terms
//! to the same weights. Counting keeps evaluation cost independent of `n`
//! and makes both risks exactly invariant to dataset order.

use serde::{Deserialize, Serialize};

use crate::models::{dot, Activation, AuxiliaryModel, PreferenceModel};
use crate::rng::RandomStream;
use crate::world::{Dataset, PolicyTable, PreferenceDatum};
use crate::{Error, Result};

const CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Hinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default = "default_margin")]
    pub hinge_margin: f64,
}

fn default_margin() -> f64 {
    1.0
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::cross_entropy()
    }
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            hinge_margin: 1.0,
        }
    }

    pub fn hinge(margin: f64) -> Result<Self> {
        let s = Self {
            kind: LossKind::Hinge,
            hinge_margin: margin,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hinge_margin > 0.0) || !self.hinge_margin.is_finite() {
            return Err(Error::InvalidConfig(format!("hinge margin must be positive, got {}", self.hinge_margin)));
        }
        Ok(())
    }

    /// Loss of label `u` at reward gap `gap = r(x, y2) - r(x, y1)`.
    pub fn value(&self, activation: Activation, gap: f64, u: u8) -> f64 {
        match self.kind {
            LossKind::CrossEntropy => {
                let t = if u == 1 { gap } else { -gap };
                activation.neg_log(t).clamp(-(1.0 - CLAMP).ln(), -CLAMP.ln())
            }
            LossKind::Hinge => {
                let s = if u == 1 { 1.0 } else { -1.0 };
                (self.hinge_margin - s * gap).max(0.0)
            }
        }
    }

    /// Derivative of [`LossSpec::value`] in `gap`; 0 wherever the clamp is
    /// active and at the hinge kink.
    pub fn derivative(&self, activation: Activation, gap: f64, u: u8) -> f64 {
        match self.kind {
            LossKind::CrossEntropy => {
                let (t, sign) = if u == 1 { (gap, 1.0) } else { (-gap, -1.0) };
                let v = activation.neg_log(t);
                if v > -CLAMP.ln() || v < -(1.0 - CLAMP).ln() {
                    0.0
                } else {
                    sign * activation.neg_log_derivative(t)
                }
            }
            LossKind::Hinge => {
                let s = if u == 1 { 1.0 } else { -1.0 };
                if s * gap < self.hinge_margin {
                    -s
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThirdTermMode {
    #[default]
    ExactEnumeration,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrpoConfig {
    pub third_term_mode: ThirdTermMode,
    /// Pairs drawn per datum in Monte-Carlo mode.
    pub mc_pairs: usize,
    /// Reference policy used for the third term (may differ from the truth).
    pub specified_ref: PolicyTable,
    pub aux: AuxiliaryModel,
    /// Selects the Monte-Carlo draw; the same epoch always gives the same pairs.
    #[serde(default)]
    pub epoch: u64,
}

impl VrpoConfig {
    pub fn exact(specified_ref: PolicyTable, aux: AuxiliaryModel) -> Self {
        Self {
            third_term_mode: ThirdTermMode::ExactEnumeration,
            mc_pairs: 1,
            specified_ref,
            aux,
            epoch: 0,
        }
    }

    pub fn monte_carlo(specified_ref: PolicyTable, aux: AuxiliaryModel, mc_pairs: usize) -> Self {
        Self {
            third_term_mode: ThirdTermMode::MonteCarlo,
            mc_pairs,
            specified_ref,
            aux,
            epoch: 0,
        }
    }

    fn validate(&self, data: &Dataset) -> Result<()> {
        if self.third_term_mode == ThirdTermMode::MonteCarlo && self.mc_pairs == 0 {
            return Err(Error::InvalidConfig("mc_pairs must be at least 1".into()));
        }
        let shape = (data.num_prompts, data.num_responses);
        if (self.specified_ref.num_prompts, self.specified_ref.num_responses) != shape
            || (self.aux.num_prompts, self.aux.num_responses) != shape
        {
            return Err(Error::DimensionMismatch(
                "specified reference or auxiliary model does not match the dataset shape".into(),
            ));
        }
        Ok(())
    }
}

/// Per-cell label weights `W[(x * V + y1) * V + y2][u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellWeights {
    pub num_prompts: usize,
    pub num_responses: usize,
    pub weights: Vec<[f64; 2]>,
}

impl CellWeights {
    pub fn zeros(num_prompts: usize, num_responses: usize) -> Self {
        Self {
            num_prompts,
            num_responses,
            weights: vec![[0.0; 2]; num_prompts * num_responses * num_responses],
        }
    }

    pub fn index(&self, x: usize, y1: usize, y2: usize) -> usize {
        (x * self.num_responses + y1) * self.num_responses + y2
    }

    pub fn cell(&self, i: usize) -> (usize, usize, usize) {
        let v = self.num_responses;
        (i / (v * v), (i / v) % v, i % v)
    }

    /// Cells with a nonzero weight on either label, in index order.
    pub fn active(&self) -> impl Iterator<Item = ((usize, usize, usize), [f64; 2])> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| w[0] != 0.0 || w[1] != 0.0)
            .map(|(i, w)| (self.cell(i), *w))
    }
}

struct Counts {
    /// `[n_c0, n_c1]` per cell.
    labels: Vec<[u64; 2]>,
    per_prompt: Vec<u64>,
    n: usize,
}

fn count(data: &Dataset) -> Result<Counts> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.validate()?;
    let v = data.num_responses;
    let mut labels = vec![[0u64; 2]; data.num_prompts * v * v];
    let mut per_prompt = vec![0u64; data.num_prompts];
    for d in &data.items {
        labels[(d.prompt * v + d.first) * v + d.second][d.label as usize] += 1;
        per_prompt[d.prompt] += 1;
    }
    Ok(Counts {
        labels,
        per_prompt,
        n: data.len(),
    })
}

pub fn baseline_weights(data: &Dataset) -> Result<CellWeights> {
    let c = count(data)?;
    let n = c.n as f64;
    let mut w = CellWeights::zeros(data.num_prompts, data.num_responses);
    for (dst, src) in w.weights.iter_mut().zip(&c.labels) {
        *dst = [src[0] as f64 / n, src[1] as f64 / n];
    }
    Ok(w)
}

/// Weights of `term1 - term2 + term3`, averaged over the data.
///
/// For each cell the control-variate part enters as
/// `(w3_c - n_c / n) * p_eta(u)`, so when the third-term mass on a cell
/// equals its empirical mass (a deterministic reference), the correction is
/// exactly zero and the weights coincide bitwise with [`baseline_weights`].
pub fn vrpo_weights(data: &Dataset, cfg: &VrpoConfig, stream: &RandomStream) -> Result<CellWeights> {
    cfg.validate(data)?;
    let c = count(data)?;
    let n = c.n as f64;
    let (k, v) = (data.num_prompts, data.num_responses);
    let mut third = vec![0.0; k * v * v];
    match cfg.third_term_mode {
        ThirdTermMode::ExactEnumeration => {
            for x in 0..k {
                if c.per_prompt[x] == 0 {
                    continue;
                }
                let share = c.per_prompt[x] as f64 / n;
                let row = cfg.specified_ref.row(x);
                for a in 0..v {
                    for b in 0..v {
                        third[(x * v + a) * v + b] = share * row[a] * row[b];
                    }
                }
            }
        }
        ThirdTermMode::MonteCarlo => {
            let mut hits = vec![0u64; k * v * v];
            let base = stream.child(cfg.epoch);
            for (i, d) in data.items.iter().enumerate() {
                let mut rng = base.child(i as u64).rng();
                let row = cfg.specified_ref.row(d.prompt);
                for _ in 0..cfg.mc_pairs {
                    let a = rng.categorical(row);
                    let b = rng.categorical(row);
                    hits[(d.prompt * v + a) * v + b] += 1;
                }
            }
            let total = n * cfg.mc_pairs as f64;
            for (t, h) in third.iter_mut().zip(&hits) {
                *t = *h as f64 / total;
            }
        }
    }
    let mut w = CellWeights::zeros(k, v);
    for i in 0..w.weights.len() {
        let (x, a, b) = w.cell(i);
        let [n0, n1] = c.labels[i];
        let correction = third[i] - (n0 + n1) as f64 / n;
        let p1 = cfg.aux.prob(x, a, b);
        w.weights[i] = [n0 as f64 / n + correction * (1.0 - p1), n1 as f64 / n + correction * p1];
    }
    Ok(w)
}

/// `sum_c sum_u W[c][u] * loss(u; gap_c)` and its gradient in theta.
pub fn risk_from_weights<M: PreferenceModel>(
    spec: &LossSpec,
    model: &M,
    activation: Activation,
    weights: &CellWeights,
) -> (f64, Vec<f64>) {
    let theta = model.theta();
    let mut value = 0.0;
    let mut grad = vec![0.0; model.dim()];
    for ((x, a, b), w) in weights.active() {
        let slope = model.slope(x, a, b);
        let gap = dot(theta, &slope) + model.offset(x, a, b);
        value += w[0] * spec.value(activation, gap, 0) + w[1] * spec.value(activation, gap, 1);
        let dg = w[0] * spec.derivative(activation, gap, 0) + w[1] * spec.derivative(activation, gap, 1);
        if dg != 0.0 {
            for (g, s) in grad.iter_mut().zip(&slope) {
                *g += dg * s;
            }
        }
    }
    (value, grad)
}

fn label_of(datum: &PreferenceDatum, label_override: Option<u8>) -> u8 {
    label_override.unwrap_or(datum.label)
}

pub fn loss_value<M: PreferenceModel>(
    spec: &LossSpec,
    model: &M,
    activation: Activation,
    datum: &PreferenceDatum,
    label_override: Option<u8>,
) -> f64 {
    let gap = model.gap(datum.prompt, datum.first, datum.second);
    spec.value(activation, gap, label_of(datum, label_override))
}

pub fn loss_grad<M: PreferenceModel>(
    spec: &LossSpec,
    model: &M,
    activation: Activation,
    datum: &PreferenceDatum,
    label_override: Option<u8>,
) -> Vec<f64> {
    let slope = model.slope(datum.prompt, datum.first, datum.second);
    let gap = dot(model.theta(), &slope) + model.offset(datum.prompt, datum.first, datum.second);
    let dg = spec.derivative(activation, gap, label_of(datum, label_override));
    slope.into_iter().map(|s| dg * s).collect()
}

pub fn baseline_risk<M: PreferenceModel>(
    spec: &LossSpec,
    model: &M,
    activation: Activation,
    data: &Dataset,
) -> Result<(f64, Vec<f64>)> {
    Ok(risk_from_weights(spec, model, activation, &baseline_weights(data)?))
}

pub fn vrpo_risk<M: PreferenceModel>(
    spec: &LossSpec,
    model: &M,
    activation: Activation,
    data: &Dataset,
    cfg: &VrpoConfig,
    stream: &RandomStream,
) -> Result<(f64, Vec<f64>)> {
    Ok(risk_from_weights(spec, model, activation, &vrpo_weights(data, cfg, stream)?))
}

/// `sum_{y1*, y2*} ref(y1*|x) ref(y2*|x) sum_u loss(u) p_eta(u)` under the
/// specified reference.
pub fn term3_per_prompt<M: PreferenceModel>(
    spec: &LossSpec,
    model: &M,
    activation: Activation,
    x: usize,
    cfg: &VrpoConfig,
) -> Result<f64> {
    if cfg.third_term_mode != ThirdTermMode::ExactEnumeration {
        return Err(Error::InvalidConfig("term3_per_prompt needs exact enumeration".into()));
    }
    let v = cfg.specified_ref.num_responses;
    if x >= cfg.specified_ref.num_prompts {
        return Err(Error::OutOfBounds(format!("prompt {x}")));
    }
    let row = cfg.specified_ref.row(x);
    let mut total = 0.0;
    for a in 0..v {
        for b in 0..v {
            total += row[a] * row[b] * label_averaged_loss(spec, model, activation, x, a, b, &cfg.aux);
        }
    }
    Ok(total)
}

/// `sum_u loss(x, y1, y2, u) * p_eta(x, y1, y2, u)`, the second term for one
/// datum.
pub fn label_averaged_loss<M: PreferenceModel>(
    spec: &LossSpec,
    model: &M,
    activation: Activation,
    x: usize,
    y1: usize,
    y2: usize,
    aux: &AuxiliaryModel,
) -> f64 {
    let gap = model.gap(x, y1, y2);
    let p1 = aux.prob(x, y1, y2);
    (1.0 - p1) * spec.value(activation, gap, 0) + p1 * spec.value(activation, gap, 1)
}
