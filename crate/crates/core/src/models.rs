//! Linear-feature reward models, softmax policies, the reward/policy
//! transforms, and tabular auxiliary preference models.

use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::numfmt;
use crate::world::{sigmoid, Dataset, PolicyTable, PreferenceKernel, RewardTable};
use crate::{Error, Result};

/// Link from a reward gap to a preference probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Sigmoid,
    /// Standard normal CDF.
    Probit,
}

impl Activation {
    /// Evaluated on `|t|` and reflected, so `eval(t) + eval(-t) == 1` holds
    /// exactly in floating point.
    pub fn eval(self, t: f64) -> f64 {
        if t < 0.0 {
            1.0 - self.upper(-t)
        } else {
            self.upper(t)
        }
    }

    fn upper(self, t: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(t),
            Activation::Probit => 0.5 * erfc(-t / std::f64::consts::SQRT_2),
        }
    }

    /// `-ln a(t)` without forming `a(t)` for large negative `t`.
    pub fn neg_log(self, t: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                if t > 0.0 {
                    (-t).exp().ln_1p()
                } else {
                    -t + t.exp().ln_1p()
                }
            }
            Activation::Probit => -(0.5 * erfc(-t / std::f64::consts::SQRT_2)).ln(),
        }
    }

    /// `d/dt [-ln a(t)] = -a'(t) / a(t)`.
    pub fn neg_log_derivative(self, t: f64) -> f64 {
        match self {
            Activation::Sigmoid => -sigmoid(-t),
            Activation::Probit => -self.derivative(t) / (0.5 * erfc(-t / std::f64::consts::SQRT_2)),
        }
    }

    pub fn derivative(self, t: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let p = sigmoid(t);
                p * (1.0 - p)
            }
            Activation::Probit => (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        }
    }
}

/// `phi(x, y)` for every prompt/response, stored row-major as `K * V` rows of
/// length `dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub dim: usize,
    pub num_prompts: usize,
    pub num_responses: usize,
    #[serde(with = "numfmt::matrix")]
    table: Vec<Vec<f64>>,
}

impl FeatureMap {
    pub fn new(num_prompts: usize, num_responses: usize, dim: usize, table: Vec<Vec<f64>>) -> Result<Self> {
        if table.len() != num_prompts * num_responses || table.iter().any(|r| r.len() != dim) {
            return Err(Error::DimensionMismatch(format!(
                "feature table must have {} rows of length {dim}",
                num_prompts * num_responses
            )));
        }
        if table.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidWorld("features must be finite".into()));
        }
        Ok(Self {
            dim,
            num_prompts,
            num_responses,
            table,
        })
    }

    pub fn phi(&self, x: usize, y: usize) -> &[f64] {
        &self.table[x * self.num_responses + y]
    }

    /// `phi(x, y2) - phi(x, y1)`.
    pub fn diff(&self, x: usize, y1: usize, y2: usize) -> Vec<f64> {
        self.phi(x, y2).iter().zip(self.phi(x, y1)).map(|(b, a)| b - a).collect()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            table: self.table.iter().map(|r| r.iter().map(|v| v * c).collect()).collect(),
            ..self.clone()
        }
    }

    /// Smallest singular value of the stacked within-prompt difference design
    /// over all pairs. Fails if it is not above 1e-8.
    pub fn check_identifiable(&self) -> Result<f64> {
        let d = self.dim;
        let mut gram = nalgebra::DMatrix::<f64>::zeros(d, d);
        for x in 0..self.num_prompts {
            for a in 0..self.num_responses {
                for b in a + 1..self.num_responses {
                    let v = nalgebra::DVector::from_vec(self.diff(x, a, b));
                    gram += &v * v.transpose();
                }
            }
        }
        let smallest = gram
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
            .max(0.0)
            .sqrt();
        if d == 0 || !(smallest > 1e-8) {
            return Err(Error::InvalidWorld(format!(
                "difference design is rank deficient (smallest singular value {smallest:e})"
            )));
        }
        Ok(smallest)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Anything that maps `theta` to an affine reward gap
/// `gap(x, y1, y2) = theta . slope(x, y1, y2) + offset(x, y1, y2)`.
pub trait PreferenceModel: Clone + Send + Sync {
    fn features(&self) -> &FeatureMap;
    fn theta(&self) -> &[f64];
    fn set_theta(&mut self, theta: &[f64]);
    fn scale(&self) -> f64;
    fn offset(&self, x: usize, y1: usize, y2: usize) -> f64;

    fn dim(&self) -> usize {
        self.features().dim
    }

    fn slope(&self, x: usize, y1: usize, y2: usize) -> Vec<f64> {
        let s = self.scale();
        let mut v = self.features().diff(x, y1, y2);
        if s != 1.0 {
            v.iter_mut().for_each(|e| *e *= s);
        }
        v
    }

    fn gap(&self, x: usize, y1: usize, y2: usize) -> f64 {
        dot(self.theta(), &self.slope(x, y1, y2)) + self.offset(x, y1, y2)
    }

    fn preference(&self, activation: Activation, x: usize, y1: usize, y2: usize) -> f64 {
        activation.eval(self.gap(x, y1, y2))
    }

    fn with_theta(&self, theta: &[f64]) -> Self {
        let mut m = self.clone();
        m.set_theta(theta);
        m
    }
}

/// `r_theta(x, y) = theta . phi(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    #[serde(with = "numfmt::vector")]
    pub theta: Vec<f64>,
    pub features: FeatureMap,
}

impl RewardModel {
    pub fn new(features: FeatureMap, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != features.dim {
            return Err(Error::DimensionMismatch(format!(
                "theta has length {}, features have dim {}",
                theta.len(),
                features.dim
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidConfig("theta must be finite".into()));
        }
        Ok(Self { theta, features })
    }

    pub fn zeros(features: FeatureMap) -> Self {
        Self {
            theta: vec![0.0; features.dim],
            features,
        }
    }

    pub fn reward_value(&self, x: usize, y: usize) -> f64 {
        dot(&self.theta, self.features.phi(x, y))
    }

    pub fn preference_from_reward(&self, activation: Activation, x: usize, y1: usize, y2: usize) -> f64 {
        self.preference(activation, x, y1, y2)
    }

    pub fn reward_table(&self) -> RewardTable {
        let (k, v) = (self.features.num_prompts, self.features.num_responses);
        let values = (0..k)
            .flat_map(|x| (0..v).map(move |y| (x, y)))
            .map(|(x, y)| self.reward_value(x, y))
            .collect();
        RewardTable::new(k, v, values).expect("finite theta and features give finite rewards")
    }

    /// Maximizer of `E_pi[r_theta] - beta KL(pi || ref)` prompt by prompt.
    pub fn policy_from_reward(&self, reference: &PolicyTable, beta: f64) -> Result<PolicyTable> {
        policy_from_reward(&self.reward_table(), reference, beta)
    }
}

impl PreferenceModel for RewardModel {
    fn features(&self) -> &FeatureMap {
        &self.features
    }
    fn theta(&self) -> &[f64] {
        &self.theta
    }
    fn set_theta(&mut self, theta: &[f64]) {
        self.theta.copy_from_slice(theta);
    }
    fn scale(&self) -> f64 {
        1.0
    }
    fn offset(&self, _: usize, _: usize, _: usize) -> f64 {
        0.0
    }
}

/// `pi(y|x) ∝ ref(y|x) exp(r(x,y) / beta)`; responses outside the reference
/// support keep probability 0.
pub fn policy_from_reward(reward: &RewardTable, reference: &PolicyTable, beta: f64) -> Result<PolicyTable> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")));
    }
    let (k, v) = (reference.num_prompts, reference.num_responses);
    if (reward.num_prompts, reward.num_responses) != (k, v) {
        return Err(Error::DimensionMismatch("reward and reference tables differ in shape".into()));
    }
    let mut probs = Vec::with_capacity(k * v);
    for x in 0..k {
        let row = reference.row(x);
        let logits: Vec<f64> = row
            .iter()
            .zip(reward.row(x))
            .map(|(&p, &r)| if p > 0.0 { p.ln() + r / beta } else { f64::NEG_INFINITY })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::DegeneratePrompt(x));
        }
        probs.extend(softmax_shifted(&logits, m));
    }
    PolicyTable::new(k, v, probs)
}

fn softmax_shifted(logits: &[f64], max: f64) -> Vec<f64> {
    let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|e| e / z).collect()
}

/// Softmax policy `pi_theta(y|x) ∝ exp(theta . phi(x, y))` together with the
/// regularization strength and the reference policy it is measured against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    #[serde(with = "numfmt::vector")]
    pub theta: Vec<f64>,
    pub features: FeatureMap,
    #[serde(with = "numfmt::scalar")]
    pub beta: f64,
    pub reference: PolicyTable,
    #[serde(skip)]
    log_ref: Vec<f64>,
}

impl PolicyModel {
    /// The reference must be strictly positive: the implied reward contains
    /// `log ref(y|x)` for every response.
    pub fn new(features: FeatureMap, theta: Vec<f64>, beta: f64, reference: PolicyTable) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidConfig(format!("beta must be positive, got {beta}")));
        }
        if theta.len() != features.dim {
            return Err(Error::DimensionMismatch(format!(
                "theta has length {}, features have dim {}",
                theta.len(),
                features.dim
            )));
        }
        if (reference.num_prompts, reference.num_responses) != (features.num_prompts, features.num_responses) {
            return Err(Error::DimensionMismatch("reference and features differ in shape".into()));
        }
        let v = reference.num_responses;
        let mut log_ref = Vec::with_capacity(reference.as_slice().len());
        for (i, &p) in reference.as_slice().iter().enumerate() {
            if !(p > 0.0) {
                return Err(Error::SupportViolation { x: i / v, y: i % v });
            }
            log_ref.push(p.ln());
        }
        Ok(Self {
            theta,
            features,
            beta,
            reference,
            log_ref,
        })
    }

    fn logits(&self, x: usize) -> Vec<f64> {
        (0..self.features.num_responses)
            .map(|y| dot(&self.theta, self.features.phi(x, y)))
            .collect()
    }

    pub fn policy_probabilities(&self) -> PolicyTable {
        policy_probabilities(&self.features, &self.theta)
    }

    /// `beta * log(pi_theta(y|x) / ref(y|x))` with the per-prompt constant
    /// pinned to 0.
    pub fn reward_from_policy(&self, x: usize, y: usize) -> Result<f64> {
        let logits = self.logits(x);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        let log_pi = logits[y] - lse;
        let r = self.reference.prob(x, y);
        if log_pi == f64::NEG_INFINITY || !(r > 0.0) {
            return Err(Error::SupportViolation { x, y });
        }
        Ok(self.beta * (log_pi - r.ln()))
    }

    fn log_ref(&self, x: usize, y: usize) -> f64 {
        if self.log_ref.is_empty() {
            self.reference.prob(x, y).ln()
        } else {
            self.log_ref[x * self.features.num_responses + y]
        }
    }
}

impl PreferenceModel for PolicyModel {
    fn features(&self) -> &FeatureMap {
        &self.features
    }
    fn theta(&self) -> &[f64] {
        &self.theta
    }
    fn set_theta(&mut self, theta: &[f64]) {
        self.theta.copy_from_slice(theta);
    }
    fn scale(&self) -> f64 {
        self.beta
    }
    fn offset(&self, x: usize, y1: usize, y2: usize) -> f64 {
        -self.beta * (self.log_ref(x, y2) - self.log_ref(x, y1))
    }
}

pub fn policy_probabilities(features: &FeatureMap, theta: &[f64]) -> PolicyTable {
    let (k, v) = (features.num_prompts, features.num_responses);
    let mut probs = Vec::with_capacity(k * v);
    for x in 0..k {
        let logits: Vec<f64> = (0..v).map(|y| dot(theta, features.phi(x, y))).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        probs.extend(softmax_shifted(&logits, m));
    }
    PolicyTable::new(k, v, probs).expect("softmax rows are normalized")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxProvenance {
    Fitted,
    Oracle,
    Corrupted,
}

/// Saturated preference table `p_eta(x, y1, y2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxiliaryModel {
    pub num_prompts: usize,
    pub num_responses: usize,
    #[serde(with = "numfmt::vector")]
    probs: Vec<f64>,
    pub provenance: AuxProvenance,
}

impl AuxiliaryModel {
    pub fn prob(&self, x: usize, y1: usize, y2: usize) -> f64 {
        self.probs[(x * self.num_responses + y1) * self.num_responses + y2]
    }

    /// Modeled probability of label `u`.
    pub fn label_prob(&self, x: usize, y1: usize, y2: usize, u: u8) -> f64 {
        let p = self.prob(x, y1, y2);
        if u == 1 {
            p
        } else {
            1.0 - p
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// Pools both orderings of every unordered pair and applies add-`alpha`
/// smoothing; unseen pairs get 0.5.
pub fn fit_auxiliary(data: &Dataset, num_prompts: usize, num_responses: usize, alpha: f64) -> Result<AuxiliaryModel> {
    if !(alpha >= 0.0) {
        return Err(Error::InvalidConfig(format!("smoothing must be non-negative, got {alpha}")));
    }
    let v = num_responses;
    // wins[x][a][b]: times b beat a, over both orderings
    let mut wins = vec![0u64; num_prompts * v * v];
    for d in &data.items {
        if d.prompt >= num_prompts || d.first >= v || d.second >= v {
            return Err(Error::OutOfBounds(format!("{d:?}")));
        }
        let (winner, loser) = if d.label == 1 { (d.second, d.first) } else { (d.first, d.second) };
        wins[(d.prompt * v + loser) * v + winner] += 1;
    }
    let mut probs = vec![0.5; num_prompts * v * v];
    for x in 0..num_prompts {
        for a in 0..v {
            for b in a + 1..v {
                let w_b = wins[(x * v + a) * v + b] as f64;
                let w_a = wins[(x * v + b) * v + a] as f64;
                let denom = w_a + w_b + 2.0 * alpha;
                let p = if denom > 0.0 { (w_b + alpha) / denom } else { 0.5 };
                probs[(x * v + a) * v + b] = p;
                probs[(x * v + b) * v + a] = 1.0 - p;
            }
        }
    }
    Ok(AuxiliaryModel {
        num_prompts,
        num_responses: v,
        probs,
        provenance: AuxProvenance::Fitted,
    })
}

pub fn oracle_auxiliary(kernel: &PreferenceKernel) -> AuxiliaryModel {
    AuxiliaryModel {
        num_prompts: kernel.num_prompts,
        num_responses: kernel.num_responses,
        probs: kernel.as_slice().to_vec(),
        provenance: AuxProvenance::Oracle,
    }
}

/// `p' = 1 - p`: every preference reversed.
pub fn corrupt_auxiliary(aux: &AuxiliaryModel) -> AuxiliaryModel {
    AuxiliaryModel {
        probs: aux.probs.iter().map(|p| 1.0 - p).collect(),
        provenance: AuxProvenance::Corrupted,
        ..aux.clone()
    }
}

/// On-disk form of a feature map plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterDocument {
    pub dim: usize,
    pub num_prompts: usize,
    pub num_responses: usize,
    #[serde(with = "numfmt::matrix")]
    pub table: Vec<Vec<f64>>,
    #[serde(with = "numfmt::vector")]
    pub theta: Vec<f64>,
    #[serde(with = "numfmt::optional", default)]
    pub beta: Option<f64>,
}

impl ParameterDocument {
    pub fn from_reward_model(m: &RewardModel) -> Self {
        Self {
            dim: m.features.dim,
            num_prompts: m.features.num_prompts,
            num_responses: m.features.num_responses,
            table: m.features.table.clone(),
            theta: m.theta.clone(),
            beta: None,
        }
    }

    pub fn from_policy_model(m: &PolicyModel) -> Self {
        Self {
            beta: Some(m.beta),
            ..Self::from_reward_model(&RewardModel {
                theta: m.theta.clone(),
                features: m.features.clone(),
            })
        }
    }

    pub fn features(&self) -> Result<FeatureMap> {
        FeatureMap::new(self.num_prompts, self.num_responses, self.dim, self.table.clone())
    }

    pub fn reward_model(&self) -> Result<RewardModel> {
        RewardModel::new(self.features()?, self.theta.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;
    use crate::world::{build_bt_kernel, sample_dataset, PreferenceDatum, World};
    use proptest::prelude::*;

    fn random_features(k: usize, v: usize, d: usize, seed: u64) -> FeatureMap {
        let mut rng = RandomStream::at(seed, &[]).rng();
        let table = (0..k * v).map(|_| (0..d).map(|_| 2.0 * rng.uniform() - 1.0).collect()).collect();
        FeatureMap::new(k, v, d, table).unwrap()
    }

    fn scalar_features(k: usize, vals: &[f64]) -> FeatureMap {
        let table = (0..k).flat_map(|_| vals.iter().map(|&f| vec![f])).collect();
        FeatureMap::new(k, vals.len(), 1, table).unwrap()
    }

    #[test]
    fn reward_value_basics() {
        let f = random_features(2, 3, 4, 1);
        let zero = RewardModel::zeros(f.clone());
        assert_eq!(zero.reward_value(1, 2), 0.0);
        let e2 = RewardModel::new(f.clone(), vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(e2.reward_value(1, 2), f.phi(1, 2)[2]);
        let theta = vec![0.3, -1.2, 0.7, 2.0];
        let m = RewardModel::new(f.clone(), theta.clone()).unwrap();
        for x in 0..2 {
            for y in 0..3 {
                let mut naive = 0.0;
                for i in 0..4 {
                    naive += theta[i] * f.phi(x, y)[i];
                }
                assert!((m.reward_value(x, y) - naive).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn preference_from_reward_symmetry_and_truth() {
        let f = random_features(3, 4, 2, 2);
        let theta = vec![0.8, -0.4];
        let m = RewardModel::new(f, theta).unwrap();
        for x in 0..3 {
            for a in 0..4 {
                assert_eq!(m.preference_from_reward(Activation::Sigmoid, x, a, a), 0.5);
                for b in 0..4 {
                    let p = m.preference_from_reward(Activation::Sigmoid, x, a, b);
                    let q = m.preference_from_reward(Activation::Sigmoid, x, b, a);
                    assert_eq!(p + q, 1.0, "({x},{a},{b})");
                }
            }
        }
        let truth = build_bt_kernel(&m.reward_table(), sigmoid).unwrap();
        for x in 0..3 {
            for a in 0..4 {
                for b in 0..4 {
                    let p = m.preference_from_reward(Activation::Sigmoid, x, a, b);
                    assert!((p - truth.prob(x, a, b)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn probit_activation_is_a_valid_link() {
        let p = Activation::Probit;
        assert!((p.eval(0.0) - 0.5).abs() < 1e-16);
        let phi1 = p.eval(1.0);
        assert!((phi1 - 0.841_344_746_068_542_9).abs() < 1e-14, "{phi1:e}");
        for t in [-3.0, -0.2, 0.7, 5.0] {
            assert!((p.eval(t) + p.eval(-t) - 1.0).abs() < 1e-14);
            let fd = (p.eval(t + 1e-6) - p.eval(t - 1e-6)) / 2e-6;
            assert!((fd - p.derivative(t)).abs() < 1e-8);
        }
        let r = RewardTable::new(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(build_bt_kernel(&r, |t| p.eval(t)).is_ok());
    }

    #[test]
    fn policy_from_reward_examples() {
        let uniform = PolicyTable::uniform(1, 3);
        let flat = RewardTable::new(1, 3, vec![2.0; 3]).unwrap();
        assert_eq!(policy_from_reward(&flat, &uniform, 0.7).unwrap(), uniform);

        let reward = RewardTable::new(1, 3, vec![0.0, 1.0, 2.0]).unwrap();
        let ref_pi = PolicyTable::new(1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let lazy = policy_from_reward(&reward, &ref_pi, 1e9).unwrap();
        for y in 0..3 {
            assert!((lazy.prob(0, y) - ref_pi.prob(0, y)).abs() < 1e-6);
        }

        let pi = policy_from_reward(&reward, &uniform, 1.0).unwrap();
        let e = std::f64::consts::E;
        let z = 1.0 + e + e * e;
        for (y, w) in [1.0, e, e * e].iter().enumerate() {
            assert!((pi.prob(0, y) - w / z).abs() < 1e-15);
        }
        assert!(total_variation(pi.row(0), &mirror_ascent(&[0.0, 1.0, 2.0], uniform.row(0), 1.0)) < 1e-6);
    }

    #[test]
    fn policy_from_reward_support_and_errors() {
        let reward = RewardTable::new(2, 3, vec![5.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let ref_pi = PolicyTable::new(2, 3, vec![0.0, 0.5, 0.5, 1.0, 0.0, 0.0]).unwrap();
        let pi = policy_from_reward(&reward, &ref_pi, 0.5).unwrap();
        assert_eq!(pi.prob(0, 0), 0.0);
        assert_eq!(pi.row(1), &[1.0, 0.0, 0.0]);
        assert!(policy_from_reward(&reward, &ref_pi, 0.0).is_err());

        // A zero row cannot be built through the validated constructor, so
        // go through deserialization to get one.
        let bad: PolicyTable = serde_json::from_str(
            r#"{"num_prompts":1,"num_responses":2,"probs":[0.0,0.0]}"#,
        )
        .unwrap();
        let r = RewardTable::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(policy_from_reward(&r, &bad, 1.0), Err(Error::DegeneratePrompt(0))));
    }

    #[test]
    fn policy_probabilities_examples() {
        let f = scalar_features(2, &[0.0, 1.0]);
        let pm = PolicyModel::new(f.clone(), vec![0.0], 1.0, PolicyTable::uniform(2, 2)).unwrap();
        assert_eq!(pm.policy_probabilities(), PolicyTable::uniform(2, 2));
        let p = policy_probabilities(&f, &[3f64.ln()]);
        assert!((p.prob(0, 0) - 0.25).abs() < 1e-15 && (p.prob(0, 1) - 0.75).abs() < 1e-15);
        let huge = policy_probabilities(&f, &[1e4]);
        assert_eq!(huge.row(0), &[0.0, 1.0]);

        // shifting every logit of a prompt by c leaves the row unchanged
        let g = FeatureMap::new(1, 3, 2, vec![vec![0.2, 1.0], vec![-0.4, 1.0], vec![1.1, 1.0]]).unwrap();
        let a = policy_probabilities(&g, &[0.9, 0.0]);
        let b = policy_probabilities(&g, &[0.9, 7.5]);
        for y in 0..3 {
            assert!((a.prob(0, y) - b.prob(0, y)).abs() < 1e-15);
        }
    }

    #[test]
    fn reward_from_policy_examples() {
        let f = random_features(2, 3, 2, 8);
        let ref_pi = PolicyTable::new(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]).unwrap();
        // theta chosen so that pi_theta = ref: logits must equal log ref up to
        // a constant, which these features cannot do in general. Use a
        // one-hot feature map instead.
        let onehot = FeatureMap::new(
            2,
            3,
            6,
            (0..6).map(|i| (0..6).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect(),
        )
        .unwrap();
        let theta: Vec<f64> = ref_pi.as_slice().iter().map(|p| p.ln()).collect();
        let pm = PolicyModel::new(onehot.clone(), theta.clone(), 0.8, ref_pi.clone()).unwrap();
        for x in 0..2 {
            for y in 0..3 {
                assert!(pm.reward_from_policy(x, y).unwrap().abs() < 1e-14);
            }
        }

        let pm = PolicyModel::new(f.clone(), vec![0.4, -1.0], 0.8, ref_pi.clone()).unwrap();
        let pm2 = PolicyModel::new(f.clone(), vec![0.4, -1.0], 1.6, ref_pi.clone()).unwrap();
        assert!((2.0 * pm.reward_from_policy(1, 2).unwrap() - pm2.reward_from_policy(1, 2).unwrap()).abs() < 1e-14);

        // two-stage then one-stage: policy_from_reward followed by the implied
        // reward recovers within-prompt differences
        let rm = RewardModel::new(f, vec![1.3, -0.6]).unwrap();
        let beta = 0.7;
        let pi = rm.policy_from_reward(&ref_pi, beta).unwrap();
        let logits: Vec<f64> = pi.as_slice().iter().map(|p| p.ln()).collect();
        let back = PolicyModel::new(onehot, logits, beta, ref_pi).unwrap();
        for x in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    let lhs = back.reward_from_policy(x, b).unwrap() - back.reward_from_policy(x, a).unwrap();
                    let rhs = rm.reward_value(x, b) - rm.reward_value(x, a);
                    assert!((lhs - rhs).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn one_stage_gap_matches_implied_reward_difference() {
        let f = random_features(2, 3, 2, 4);
        let ref_pi = PolicyTable::new(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]).unwrap();
        let pm = PolicyModel::new(f, vec![0.9, 0.2], 0.5, ref_pi).unwrap();
        for x in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    let implied = pm.reward_from_policy(x, b).unwrap() - pm.reward_from_policy(x, a).unwrap();
                    assert!((pm.gap(x, a, b) - implied).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn policy_model_requires_positive_reference() {
        let f = scalar_features(1, &[0.0, 1.0]);
        let r = PolicyTable::new(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            PolicyModel::new(f, vec![0.0], 1.0, r),
            Err(Error::SupportViolation { x: 0, y: 1 })
        ));
    }

    #[test]
    fn identifiability_check() {
        let f = random_features(2, 3, 3, 5);
        assert!(f.check_identifiable().unwrap() > 1e-8);
        let constant = FeatureMap::new(1, 3, 2, vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]]).unwrap();
        assert!(constant.check_identifiable().is_err());
    }

    fn datum(x: usize, y1: usize, y2: usize, z: u8) -> PreferenceDatum {
        PreferenceDatum {
            prompt: x,
            first: y1,
            second: y2,
            label: z,
        }
    }

    fn dataset(items: Vec<PreferenceDatum>) -> Dataset {
        Dataset {
            num_prompts: 1,
            num_responses: 2,
            items,
            seed_info: RandomStream::new(0),
        }
    }

    #[test]
    fn fit_auxiliary_counts() {
        let empty = dataset(vec![]);
        let aux = fit_auxiliary(&empty, 1, 2, 1.0).unwrap();
        assert!(aux.as_slice().iter().all(|&p| p == 0.5));

        // response 1 beats 0 three times (two orderings), loses once
        let d = dataset(vec![datum(0, 0, 1, 1), datum(0, 0, 1, 1), datum(0, 1, 0, 0), datum(0, 0, 1, 0)]);
        let aux = fit_auxiliary(&d, 1, 2, 1.0).unwrap();
        assert!((aux.prob(0, 0, 1) - 2.0 / 3.0).abs() < 1e-15);
        assert!((aux.prob(0, 1, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(aux.prob(0, 1, 1), 0.5);
        assert_eq!(aux.provenance, AuxProvenance::Fitted);
        assert!(fit_auxiliary(&d, 1, 2, -1.0).is_err());
    }

    #[test]
    fn fit_auxiliary_is_consistent() {
        let reward = RewardTable::new(2, 3, vec![0.0, 1.0, -0.5, 0.4, 0.0, 2.0]).unwrap();
        let kernel = build_bt_kernel(&reward, sigmoid).unwrap();
        let w = World::new(vec![0.5, 0.5], reward, kernel.clone(), PolicyTable::uniform(2, 3)).unwrap();
        let data = sample_dataset(&w, 200_000, &RandomStream::at(21, &[])).unwrap();
        let aux = fit_auxiliary(&data, 2, 3, 1.0).unwrap();
        let mut counts = [0usize; 18];
        for d in &data.items {
            counts[(d.prompt * 3 + d.first) * 3 + d.second] += 1;
            counts[(d.prompt * 3 + d.second) * 3 + d.first] += 1;
        }
        let mut worst: f64 = 0.0;
        for x in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    if counts[(x * 3 + a) * 3 + b] >= 100 {
                        worst = worst.max((aux.prob(x, a, b) - kernel.prob(x, a, b)).abs());
                    }
                }
            }
        }
        assert!(worst < 0.02, "max deviation {worst}");
    }

    #[test]
    fn oracle_and_corrupted() {
        let reward = RewardTable::new(1, 3, vec![0.0, 3f64.ln(), 0.2]).unwrap();
        let kernel = build_bt_kernel(&reward, sigmoid).unwrap();
        let oracle = oracle_auxiliary(&kernel);
        assert_eq!(oracle.as_slice(), kernel.as_slice());
        assert_eq!(oracle.provenance, AuxProvenance::Oracle);
        let bad = corrupt_auxiliary(&oracle);
        assert!((bad.prob(0, 0, 1) - 0.25).abs() < 1e-15);
        assert_eq!(bad.prob(0, 2, 2), 0.5);
        assert_ne!(bad.as_slice(), oracle.as_slice());
        assert_eq!(bad.provenance, AuxProvenance::Corrupted);
        let twice = corrupt_auxiliary(&bad);
        for (a, b) in twice.as_slice().iter().zip(oracle.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        for x in [&oracle, &bad] {
            for a in 0..3 {
                for b in 0..3 {
                    assert!((x.prob(0, a, b) + x.prob(0, b, a) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn parameter_document_round_trip() {
        let f = random_features(2, 3, 2, 13);
        let ref_pi = PolicyTable::uniform(2, 3);
        let pm = PolicyModel::new(f, vec![0.1, 1.0 / 3.0], 0.35, ref_pi).unwrap();
        let doc = ParameterDocument::from_policy_model(&pm);
        let text = serde_json::to_string(&doc).unwrap();
        assert!(text.contains(r#""dim":2"#) && text.contains(r#""beta":3.4999999999999998e-1"#));
        let back: ParameterDocument = serde_json::from_str(&text).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.features().unwrap(), pm.features);
    }

    /// Exponentiated-gradient ascent on `E_pi[r] - beta KL(pi || ref)`.
    fn mirror_ascent(r: &[f64], reference: &[f64], beta: f64) -> Vec<f64> {
        let n = r.len();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..20_000 {
            let grad: Vec<f64> = (0..n).map(|y| r[y] - beta * ((pi[y] / reference[y]).ln() + 1.0)).collect();
            let w: Vec<f64> = (0..n).map(|y| pi[y] * (0.2 * grad[y]).exp()).collect();
            let z: f64 = w.iter().sum();
            pi = w.into_iter().map(|v| v / z).collect();
        }
        pi
    }

    fn total_variation(a: &[f64], b: &[f64]) -> f64 {
        0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
    }

    proptest! {
        #[test]
        fn closed_form_matches_brute_force_maximizer(
            r in proptest::collection::vec(-2.0f64..2.0, 4),
            w in proptest::collection::vec(0.2f64..1.0, 4),
            beta in 0.5f64..2.0,
        ) {
            let z: f64 = w.iter().sum();
            let reference: Vec<f64> = w.iter().map(|v| v / z).collect();
            let rt = RewardTable::new(1, 4, r.clone()).unwrap();
            let rp = PolicyTable::new(1, 4, reference.clone());
            prop_assume!(rp.is_ok());
            let pi = policy_from_reward(&rt, &rp.unwrap(), beta).unwrap();
            prop_assert!(total_variation(pi.row(0), &mirror_ascent(&r, &reference, beta)) < 1e-6);
        }

        #[test]
        fn per_prompt_shift_invariance(shift in -5.0f64..5.0, beta in 0.1f64..3.0) {
            let base = RewardTable::new(2, 3, vec![0.1, 0.7, -0.3, 1.0, 0.0, 0.5]).unwrap();
            let shifted = RewardTable::new(2, 3, vec![0.1 + shift, 0.7 + shift, -0.3 + shift, 1.0, 0.0, 0.5]).unwrap();
            let reference = PolicyTable::new(2, 3, vec![0.2, 0.3, 0.5, 0.6, 0.3, 0.1]).unwrap();
            let a = policy_from_reward(&base, &reference, beta).unwrap();
            let b = policy_from_reward(&shifted, &reference, beta).unwrap();
            for (p, q) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
