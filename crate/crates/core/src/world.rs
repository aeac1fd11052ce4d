//! Finite data-generating process: prompts, responses, true rewards,
//! preference kernels and reference policies, plus dataset sampling and the
//! line-delimited dataset format.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::numfmt;
use crate::rng::RandomStream;
use crate::{Error, Result};

const SUM_TOL: f64 = 1e-12;
const KERNEL_TOL: f64 = 1e-9;

/// Conditional distribution over responses for every prompt, `probs[x][y] =
/// pi(y | x)`. Used for reference policies and for induced policies alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub num_prompts: usize,
    pub num_responses: usize,
    #[serde(with = "numfmt::vector")]
    probs: Vec<f64>,
}

pub type ReferencePolicy = PolicyTable;

impl PolicyTable {
    pub fn new(num_prompts: usize, num_responses: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_prompts * num_responses {
            return Err(Error::DimensionMismatch(format!(
                "policy table has {} entries, expected {}x{}",
                probs.len(),
                num_prompts,
                num_responses
            )));
        }
        for x in 0..num_prompts {
            let row = &probs[x * num_responses..(x + 1) * num_responses];
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::InvalidWorld(format!("policy row {x} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > SUM_TOL {
                return Err(Error::InvalidWorld(format!("policy row {x} sums to {s}")));
            }
        }
        Ok(Self {
            num_prompts,
            num_responses,
            probs,
        })
    }

    pub fn uniform(num_prompts: usize, num_responses: usize) -> Self {
        Self {
            num_prompts,
            num_responses,
            probs: vec![1.0 / num_responses as f64; num_prompts * num_responses],
        }
    }

    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.probs[x * self.num_responses + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.probs[x * self.num_responses..(x + 1) * self.num_responses]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// `(1 - weight) * self + weight * other`.
    pub fn mix(&self, other: &PolicyTable, weight: f64) -> Result<Self> {
        if other.num_prompts != self.num_prompts || other.num_responses != self.num_responses {
            return Err(Error::DimensionMismatch("policy mixture operands differ in shape".into()));
        }
        let probs = self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (1.0 - weight) * a + weight * b)
            .collect();
        Self::new(self.num_prompts, self.num_responses, probs)
    }

    /// Every prompt puts all its mass on one response.
    pub fn is_deterministic(&self) -> bool {
        (0..self.num_prompts).all(|x| self.row(x).iter().filter(|&&p| p > 0.0).count() == 1)
    }
}

/// `r*(x, y)` for every prompt/response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub num_prompts: usize,
    pub num_responses: usize,
    #[serde(with = "numfmt::vector")]
    values: Vec<f64>,
}

impl RewardTable {
    pub fn new(num_prompts: usize, num_responses: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_prompts * num_responses {
            return Err(Error::DimensionMismatch(format!(
                "reward table has {} entries, expected {}x{}",
                values.len(),
                num_prompts,
                num_responses
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidWorld("true reward must be finite".into()));
        }
        Ok(Self {
            num_prompts,
            num_responses,
            values,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x * self.num_responses + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.values[x * self.num_responses..(x + 1) * self.num_responses]
    }
}

/// `probs[x][y1][y2] = P(y2 preferred over y1 | x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceKernel {
    pub num_prompts: usize,
    pub num_responses: usize,
    #[serde(with = "numfmt::vector")]
    probs: Vec<f64>,
    pub reward_based: bool,
}

impl PreferenceKernel {
    pub fn prob(&self, x: usize, y1: usize, y2: usize) -> f64 {
        self.probs[(x * self.num_responses + y1) * self.num_responses + y2]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Largest `|p(x,y1,y2) + p(x,y2,y1) - 1|` over the table, with its cell.
    pub fn antisymmetry_defect(&self) -> (f64, (usize, usize, usize)) {
        let mut worst = (0.0, (0, 0, 0));
        for x in 0..self.num_prompts {
            for a in 0..self.num_responses {
                for b in a..self.num_responses {
                    let dev = (self.prob(x, a, b) + self.prob(x, b, a) - 1.0).abs();
                    if dev > worst.0 {
                        worst = (dev, (x, a, b));
                    }
                }
            }
        }
        worst
    }

    fn validate(&self, tol: f64) -> Result<()> {
        if let Some(p) = self.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidWorld(format!("kernel entry {p} outside [0,1]")));
        }
        let (dev, (x, y1, y2)) = self.antisymmetry_defect();
        if dev > tol {
            return Err(Error::MalformedKernel {
                x,
                y1,
                y2,
                deviation: dev,
            });
        }
        Ok(())
    }
}

/// Logistic sigmoid evaluated without overflow.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn check_activation(activation: &impl Fn(f64) -> f64) -> Result<()> {
    let mut prev = f64::NEG_INFINITY;
    for k in -160..=160 {
        let t = k as f64 * 0.125;
        let a = activation(t);
        if !(0.0..=1.0).contains(&a) || (a + activation(-t) - 1.0).abs() > SUM_TOL || a < prev {
            return Err(Error::InvalidActivation { probe: t });
        }
        prev = a;
    }
    Ok(())
}

/// Reward-based kernel `p(x,y1,y2) = a(r*(x,y2) - r*(x,y1))`.
///
/// The activation is probed on a grid over [-20, 20] for range, monotonicity
/// and `a(t) + a(-t) = 1`. Each unordered pair is evaluated once and its mirror
/// filled in as the complement, so antisymmetry holds exactly.
pub fn build_bt_kernel(reward: &RewardTable, activation: impl Fn(f64) -> f64) -> Result<PreferenceKernel> {
    check_activation(&activation)?;
    let (k, v) = (reward.num_prompts, reward.num_responses);
    let mut probs = vec![0.0; k * v * v];
    for x in 0..k {
        for a in 0..v {
            probs[(x * v + a) * v + a] = 0.5;
            for b in a + 1..v {
                let p = activation(reward.get(x, b) - reward.get(x, a));
                probs[(x * v + a) * v + b] = p;
                probs[(x * v + b) * v + a] = 1.0 - p;
            }
        }
    }
    Ok(PreferenceKernel {
        num_prompts: k,
        num_responses: v,
        probs,
        reward_based: true,
    })
}

/// Symmetric label noise: each label is inverted with probability `eps`.
pub fn flip_labels_kernel(base: &PreferenceKernel, eps: f64) -> Result<PreferenceKernel> {
    if !(0.0..0.5).contains(&eps) {
        return Err(Error::InvalidFlipProbability(eps));
    }
    if eps == 0.0 {
        return Ok(base.clone());
    }
    let v = base.num_responses;
    let mut probs = base.probs.clone();
    for x in 0..base.num_prompts {
        for a in 0..v {
            for b in a..v {
                let p = base.prob(x, a, b);
                let q = (1.0 - eps) * p + eps * (1.0 - p);
                probs[(x * v + a) * v + b] = q;
                probs[(x * v + b) * v + a] = if a == b { q } else { 1.0 - q };
            }
        }
    }
    Ok(PreferenceKernel {
        num_prompts: base.num_prompts,
        num_responses: v,
        probs,
        reward_based: false,
    })
}

/// Wraps an arbitrary table (for example an intransitive cycle) verbatim.
pub fn explicit_kernel(num_prompts: usize, num_responses: usize, probs: Vec<f64>) -> Result<PreferenceKernel> {
    if probs.len() != num_prompts * num_responses * num_responses {
        return Err(Error::DimensionMismatch(format!(
            "kernel has {} entries, expected {}x{}x{}",
            probs.len(),
            num_prompts,
            num_responses,
            num_responses
        )));
    }
    let kernel = PreferenceKernel {
        num_prompts,
        num_responses,
        probs,
        reward_based: false,
    };
    kernel.validate(KERNEL_TOL)?;
    Ok(kernel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub num_prompts: usize,
    pub num_responses: usize,
    #[serde(with = "numfmt::vector")]
    pub prompt_dist: Vec<f64>,
    pub true_reward: RewardTable,
    pub kernel: PreferenceKernel,
    /// The policy that actually generates response pairs.
    pub ref_policy: ReferencePolicy,
}

impl World {
    pub fn new(
        prompt_dist: Vec<f64>,
        true_reward: RewardTable,
        kernel: PreferenceKernel,
        ref_policy: ReferencePolicy,
    ) -> Result<Self> {
        let k = prompt_dist.len();
        let v = true_reward.num_responses;
        if k == 0 || v == 0 {
            return Err(Error::InvalidWorld("need at least one prompt and one response".into()));
        }
        if prompt_dist.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::InvalidWorld("prompt distribution has a negative entry".into()));
        }
        let total: f64 = prompt_dist.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidWorld(format!("prompt distribution sums to {total}")));
        }
        let shapes = [
            (true_reward.num_prompts, true_reward.num_responses),
            (kernel.num_prompts, kernel.num_responses),
            (ref_policy.num_prompts, ref_policy.num_responses),
        ];
        if shapes.iter().any(|&s| s != (k, v)) {
            return Err(Error::DimensionMismatch(format!(
                "world components disagree on shape: {shapes:?} vs ({k}, {v})"
            )));
        }
        kernel.validate(KERNEL_TOL)?;
        Ok(Self {
            num_prompts: k,
            num_responses: v,
            prompt_dist,
            true_reward,
            kernel,
            ref_policy,
        })
    }

    /// Same world with a different preference kernel.
    pub fn with_kernel(&self, kernel: PreferenceKernel) -> Result<Self> {
        Self::new(
            self.prompt_dist.clone(),
            self.true_reward.clone(),
            kernel,
            self.ref_policy.clone(),
        )
    }

    /// Same world with a different response-generating policy.
    pub fn with_ref_policy(&self, ref_policy: ReferencePolicy) -> Result<Self> {
        Self::new(
            self.prompt_dist.clone(),
            self.true_reward.clone(),
            self.kernel.clone(),
            ref_policy,
        )
    }
}

/// One labeled comparison; `label = 1` iff `second` was preferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferenceDatum {
    #[serde(rename = "x")]
    pub prompt: usize,
    #[serde(rename = "y1")]
    pub first: usize,
    #[serde(rename = "y2")]
    pub second: usize,
    #[serde(rename = "z")]
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_prompts: usize,
    pub num_responses: usize,
    pub items: Vec<PreferenceDatum>,
    pub seed_info: RandomStream,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.items.iter().enumerate() {
            if d.prompt >= self.num_prompts || d.first >= self.num_responses || d.second >= self.num_responses {
                return Err(Error::OutOfBounds(format!("datum {i}: {d:?}")));
            }
            if d.label > 1 {
                return Err(Error::OutOfBounds(format!("datum {i}: label {}", d.label)));
            }
        }
        Ok(())
    }
}

/// Draws `n` i.i.d. comparisons: prompt from the prompt distribution, two
/// independent responses from the true reference policy (ties allowed), and a
/// Bernoulli label from the kernel.
pub fn sample_dataset(world: &World, n: usize, stream: &RandomStream) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = stream.rng();
    let items = (0..n)
        .map(|_| {
            let x = rng.categorical(&world.prompt_dist);
            let row = world.ref_policy.row(x);
            let y1 = rng.categorical(row);
            let y2 = rng.categorical(row);
            let z = rng.bernoulli(world.kernel.prob(x, y1, y2));
            PreferenceDatum {
                prompt: x,
                first: y1,
                second: y2,
                label: z as u8,
            }
        })
        .collect();
    Ok(Dataset {
        num_prompts: world.num_prompts,
        num_responses: world.num_responses,
        items,
        seed_info: stream.clone(),
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    #[serde(rename = "K")]
    num_prompts: usize,
    #[serde(rename = "V")]
    num_responses: usize,
    root_seed: u64,
    path: Vec<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DatumLine {
    x: usize,
    y1: usize,
    y2: usize,
    z: u8,
}

/// Header object on the first line, then one `{"x","y1","y2","z"}` object per
/// line.
pub fn write_dataset<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    let header = DatasetHeader {
        num_prompts: data.num_prompts,
        num_responses: data.num_responses,
        root_seed: data.seed_info.root_seed,
        path: data.seed_info.path.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for d in &data.items {
        writeln!(out, r#"{{"x":{},"y1":{},"y2":{},"z":{}}}"#, d.prompt, d.first, d.second, d.label)?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines().enumerate();
    let header: DatasetHeader = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| Error::Parse {
            line: 1,
            message: format!("header: {e}"),
        })?,
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let mut items = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: DatumLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if d.x >= header.num_prompts || d.y1 >= header.num_responses || d.y2 >= header.num_responses || d.z > 1 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!(
                    "record out of range for K={}, V={}",
                    header.num_prompts, header.num_responses
                ),
            });
        }
        items.push(PreferenceDatum {
            prompt: d.x,
            first: d.y1,
            second: d.y2,
            label: d.z,
        });
    }
    Ok(Dataset {
        num_prompts: header.num_prompts,
        num_responses: header.num_responses,
        items,
        seed_info: RandomStream::at(header.root_seed, &header.path),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rewards(k: usize, v: usize, vals: Vec<f64>) -> RewardTable {
        RewardTable::new(k, v, vals).unwrap()
    }

    fn two_response_world(gap: f64) -> World {
        let r = rewards(1, 2, vec![0.0, gap]);
        let kernel = build_bt_kernel(&r, sigmoid).unwrap();
        World::new(vec![1.0], r, kernel, PolicyTable::uniform(1, 2)).unwrap()
    }

    #[test]
    fn equal_rewards_give_one_half() {
        let k = build_bt_kernel(&rewards(1, 2, vec![0.3, 0.3]), sigmoid).unwrap();
        assert_eq!(k.prob(0, 0, 1), 0.5);
        assert_eq!(k.prob(0, 1, 1), 0.5);
        assert!(k.reward_based);
    }

    #[test]
    fn log_three_gap_gives_three_quarters() {
        let k = build_bt_kernel(&rewards(1, 2, vec![0.0, 3f64.ln()]), sigmoid).unwrap();
        assert!((k.prob(0, 0, 1) - 0.75).abs() < 1e-15);
        assert!((k.prob(0, 1, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn bt_table_matches_elementwise_sigmoid() {
        let r = [0.0, 1.0, 2.0];
        let k = build_bt_kernel(&rewards(1, 3, r.to_vec()), sigmoid).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let expect = 1.0 / (1.0 + (-(r[b] - r[a])).exp());
                assert!((k.prob(0, a, b) - expect).abs() < 1e-15, "({a},{b})");
            }
        }
    }

    #[test]
    fn asymmetric_activation_is_rejected() {
        let r = rewards(1, 2, vec![0.0, 1.0]);
        let err = build_bt_kernel(&r, |t| sigmoid(t + 0.1)).unwrap_err();
        assert!(matches!(err, Error::InvalidActivation { .. }));
        let err = build_bt_kernel(&r, |t: f64| 0.5 + 0.5 * t.tanh() * 2.0).unwrap_err();
        assert!(matches!(err, Error::InvalidActivation { .. }));
    }

    #[test]
    fn flip_mixture() {
        let base = explicit_kernel(1, 2, vec![0.5, 1.0, 0.0, 0.5]).unwrap();
        let flipped = flip_labels_kernel(&base, 0.1).unwrap();
        assert!((flipped.prob(0, 0, 1) - 0.9).abs() < 1e-15);
        assert!(!flipped.reward_based);
        assert_eq!(flip_labels_kernel(&base, 0.0).unwrap(), base);
        assert!(matches!(flip_labels_kernel(&base, 0.5), Err(Error::InvalidFlipProbability(_))));
        assert!(matches!(flip_labels_kernel(&base, -0.1), Err(Error::InvalidFlipProbability(_))));
    }

    #[test]
    fn rock_paper_scissors_is_accepted_and_round_trips() {
        // y1 -> y2 along the cycle 0 -> 1 -> 2 -> 0 is preferred w.p. 0.9
        let mut p = vec![0.5; 9];
        for (a, b) in [(0, 1), (1, 2), (2, 0)] {
            p[a * 3 + b] = 0.9;
            p[b * 3 + a] = 0.1;
        }
        let k = explicit_kernel(1, 3, p).unwrap();
        assert!(!k.reward_based);
        let text = serde_json::to_string(&k).unwrap();
        let back: PreferenceKernel = serde_json::from_str(&text).unwrap();
        assert_eq!(
            back.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            k.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back, k);
    }

    #[test]
    fn broken_diagonal_is_rejected() {
        let err = explicit_kernel(1, 2, vec![0.6, 0.5, 0.5, 0.5]).unwrap_err();
        assert!(matches!(err, Error::MalformedKernel { y1: 0, y2: 0, .. }));
    }

    #[test]
    fn world_validation() {
        let r = rewards(2, 2, vec![0.0; 4]);
        let k = build_bt_kernel(&r, sigmoid).unwrap();
        let pi = PolicyTable::uniform(2, 2);
        assert!(World::new(vec![0.5, 0.6], r.clone(), k.clone(), pi.clone()).is_err());
        assert!(World::new(vec![1.5, -0.5], r.clone(), k.clone(), pi.clone()).is_err());
        assert!(World::new(vec![0.5, 0.5], r, k, pi).is_ok());
        assert!(RewardTable::new(1, 2, vec![0.0, f64::INFINITY]).is_err());
        assert!(PolicyTable::new(1, 2, vec![0.7, 0.2]).is_err());
    }

    #[test]
    fn deterministic_reference_produces_ties_with_fair_labels() {
        let r = rewards(2, 3, vec![0.0, 1.0, 2.0, 2.0, 1.0, 0.0]);
        let k = build_bt_kernel(&r, sigmoid).unwrap();
        let pi = PolicyTable::new(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(pi.is_deterministic());
        let w = World::new(vec![0.5, 0.5], r, k, pi).unwrap();
        let n = 40_000;
        let data = sample_dataset(&w, n, &RandomStream::at(3, &[0])).unwrap();
        assert!(data.items.iter().all(|d| d.first == d.second));
        let mean = data.items.iter().map(|d| d.label as f64).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 4.0 * 0.5 / (n as f64).sqrt());
    }

    #[test]
    fn sampling_is_reproducible() {
        let w = two_response_world(1.0);
        let s = RandomStream::at(11, &[4, 2]);
        assert_eq!(sample_dataset(&w, 500, &s).unwrap(), sample_dataset(&w, 500, &s).unwrap());
        assert_ne!(
            sample_dataset(&w, 500, &s).unwrap().items,
            sample_dataset(&w, 500, &s.child(0)).unwrap().items
        );
        assert!(matches!(sample_dataset(&w, 0, &s), Err(Error::EmptyDataset)));
    }

    #[test]
    fn label_frequency_matches_kernel() {
        let w = two_response_world(3f64.ln());
        let data = sample_dataset(&w, 100_000, &RandomStream::at(5, &[])).unwrap();
        let cell: Vec<_> = data.items.iter().filter(|d| d.first == 0 && d.second == 1).collect();
        let m = cell.len() as f64;
        let freq = cell.iter().map(|d| d.label as f64).sum::<f64>() / m;
        let se = (0.75 * 0.25 / m).sqrt();
        assert!((freq - 0.75).abs() < 3.0 * se, "freq {freq}, se {se}");
    }

    #[test]
    fn dataset_file_round_trip() {
        let w = two_response_world(0.4);
        let data = sample_dataset(&w, 25, &RandomStream::at(9, &[1, 2])).unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 26);
        assert!(text.starts_with(r#"{"K":1,"V":2,"root_seed":9,"path":[1,2]}"#));
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn dataset_parse_errors_name_the_line() {
        let text = "{\"K\":1,\"V\":2,\"root_seed\":0,\"path\":[]}\n{\"x\":0,\"y1\":0,\"y2\":1,\"z\":1}\n{\"x\":0,\"y1\":5,\"y2\":1,\"z\":1}\n";
        match read_dataset(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "{\"K\":1,\"V\":2,\"root_seed\":0,\"path\":[]}\n{\"x\":0,\"y1\":0,\"y2\":1,\"w\":1}\n";
        assert!(matches!(read_dataset(text.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    fn random_kernel(k: usize, v: usize, seed: u64) -> PreferenceKernel {
        let mut rng = RandomStream::at(seed, &[]).rng();
        let mut p = vec![0.5; k * v * v];
        for x in 0..k {
            for a in 0..v {
                for b in a + 1..v {
                    let q = rng.uniform();
                    p[(x * v + a) * v + b] = q;
                    p[(x * v + b) * v + a] = 1.0 - q;
                }
            }
        }
        explicit_kernel(k, v, p).unwrap()
    }

    proptest! {
        #[test]
        fn flip_preserves_antisymmetry_and_composes(seed in 0u64..1000, e1 in 0.0f64..0.49, e2 in 0.0f64..0.49) {
            let base = random_kernel(2, 4, seed);
            let once = flip_labels_kernel(&base, e1).unwrap();
            prop_assert!(once.antisymmetry_defect().0 <= 1e-12);
            let twice = flip_labels_kernel(&once, e2).unwrap();
            let combined = e1 + e2 - 2.0 * e1 * e2;
            let direct = flip_labels_kernel(&base, combined).unwrap();
            for (a, b) in twice.as_slice().iter().zip(direct.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn bt_kernels_are_antisymmetric(vals in proptest::collection::vec(-30.0f64..30.0, 2 * 5)) {
            let k = build_bt_kernel(&rewards(2, 5, vals), sigmoid).unwrap();
            prop_assert!(k.antisymmetry_defect().0 <= 1e-12);
        }
    }
}
