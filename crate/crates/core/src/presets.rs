//! Named simulation worlds with their feature maps.

use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::models::{FeatureMap, RewardModel};
use crate::rng::{RandomStream, StreamRng};
use crate::world::{build_bt_kernel, explicit_kernel, flip_labels_kernel, sigmoid, PolicyTable, RewardTable, World};
use crate::Result;

/// KL weight at which the label-flip target parameter also maximizes the
/// induced two-stage policy's expected true reward.
pub const LABEL_FLIP_BETA: f64 = 0.349_832_497_298_662_34;

/// A world together with the features every model of it uses.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub world: World,
    pub features: FeatureMap,
    pub beta: f64,
    /// Parameter generating the true reward, when it lies in the feature span.
    pub truth: Option<Vec<f64>>,
}

fn default_eps() -> f64 {
    0.2
}
fn default_strength() -> f64 {
    0.9
}
fn default_k() -> usize {
    48
}
fn default_v() -> usize {
    4
}
fn default_d() -> usize {
    24
}
fn default_scale() -> f64 {
    0.02
}
fn default_world_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorldSpec {
    /// Four prompts, four responses, a Bradley-Terry kernel with labels
    /// flipped at rate `eps`.
    LabelFlip {
        #[serde(default = "default_eps")]
        eps: f64,
    },
    /// Gaussian features and a reward inside their span, so the
    /// Bradley-Terry model is correct.
    CorrectlySpecified {
        #[serde(default = "default_k")]
        num_prompts: usize,
        #[serde(default = "default_v")]
        num_responses: usize,
        #[serde(default = "default_d")]
        dim: usize,
        #[serde(default = "default_scale")]
        reward_scale: f64,
        #[serde(default = "default_world_seed")]
        world_seed: u64,
    },
    /// Every prompt's reference puts all its mass on one response.
    DeterministicRef {
        #[serde(default = "default_eps")]
        eps: f64,
    },
    /// A single-prompt rock-paper-scissors cycle.
    Intransitive {
        #[serde(default = "default_strength")]
        strength: f64,
    },
    /// Random features, a reward partly outside their span, flipped labels.
    Random {
        num_prompts: usize,
        num_responses: usize,
        dim: usize,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_world_seed")]
        world_seed: u64,
    },
}

impl WorldSpec {
    pub fn build(&self) -> Result<Scenario> {
        match *self {
            WorldSpec::LabelFlip { eps } => label_flip(eps),
            WorldSpec::CorrectlySpecified {
                num_prompts,
                num_responses,
                dim,
                reward_scale,
                world_seed,
            } => correctly_specified(num_prompts, num_responses, dim, reward_scale, world_seed),
            WorldSpec::DeterministicRef { eps } => deterministic_ref(eps),
            WorldSpec::Intransitive { strength } => intransitive(strength),
            WorldSpec::Random {
                num_prompts,
                num_responses,
                dim,
                eps,
                world_seed,
            } => random_misspecified(num_prompts, num_responses, dim, eps, world_seed),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WorldSpec::LabelFlip { .. } => "label_flip",
            WorldSpec::CorrectlySpecified { .. } => "correctly_specified",
            WorldSpec::DeterministicRef { .. } => "deterministic_ref",
            WorldSpec::Intransitive { .. } => "intransitive",
            WorldSpec::Random { .. } => "random",
        }
    }
}

/// Block features `phi(x, y) = f(y) e_x` with `f = (0, 0, 1, 2)`, reward
/// `(3, -5, 5, -1)` and reference `(0.2, 0.3, 0.3, 0.2)` for every prompt.
pub fn label_flip(eps: f64) -> Result<Scenario> {
    let (k, v) = (4, 4);
    let f = [0.0, 0.0, 1.0, 2.0];
    let r = [3.0, -5.0, 5.0, -1.0];
    let pi = [0.2, 0.3, 0.3, 0.2];
    let mut table = Vec::with_capacity(k * v);
    for x in 0..k {
        for fy in f {
            let mut row = vec![0.0; k];
            row[x] = fy;
            table.push(row);
        }
    }
    let features = FeatureMap::new(k, v, k, table)?;
    let reward = RewardTable::new(k, v, r.repeat(k))?;
    let kernel = flip_labels_kernel(&build_bt_kernel(&reward, sigmoid)?, eps)?;
    let world = World::new(vec![0.25; k], reward, kernel, PolicyTable::new(k, v, pi.repeat(k))?)?;
    Ok(Scenario {
        world,
        features,
        beta: LABEL_FLIP_BETA,
        truth: None,
    })
}

fn normal(rng: &mut StreamRng) -> f64 {
    StandardNormal.sample(rng.inner())
}

fn dirichlet_ones(rng: &mut StreamRng, v: usize) -> Vec<f64> {
    let g = Gamma::new(1.0, 1.0).expect("valid shape");
    let draws: Vec<f64> = (0..v).map(|_| g.sample(rng.inner())).collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

/// Reference rows `0.95 Dirichlet(1) + 0.05 / V`, renormalized against rounding.
fn floored_dirichlet_rows(rng: &mut StreamRng, k: usize, v: usize) -> Result<PolicyTable> {
    let mut probs = Vec::with_capacity(k * v);
    for _ in 0..k {
        let row: Vec<f64> = dirichlet_ones(rng, v).into_iter().map(|p| 0.95 * p + 0.05 / v as f64).collect();
        let total: f64 = row.iter().sum();
        probs.extend(row.into_iter().map(|p| p / total));
    }
    PolicyTable::new(k, v, probs)
}

fn gaussian_features(rng: &mut StreamRng, k: usize, v: usize, d: usize) -> Result<FeatureMap> {
    let table = (0..k * v).map(|_| (0..d).map(|_| normal(rng)).collect()).collect();
    FeatureMap::new(k, v, d, table)
}

pub fn correctly_specified(k: usize, v: usize, d: usize, reward_scale: f64, world_seed: u64) -> Result<Scenario> {
    let mut rng = RandomStream::at(world_seed, &[0]).rng();
    let features = gaussian_features(&mut rng, k, v, d)?;
    let truth: Vec<f64> = (0..d).map(|_| reward_scale * normal(&mut rng)).collect();
    let ref_policy = floored_dirichlet_rows(&mut rng, k, v)?;
    let reward = RewardModel::new(features.clone(), truth.clone())?.reward_table();
    let kernel = build_bt_kernel(&reward, sigmoid)?;
    let world = World::new(vec![1.0 / k as f64; k], reward, kernel, ref_policy)?;
    Ok(Scenario {
        world,
        features,
        beta: 1.0,
        truth: Some(truth),
    })
}

/// Three prompts and three responses; prompt `x` only ever sees response `x`.
pub fn deterministic_ref(eps: f64) -> Result<Scenario> {
    let (k, v, d) = (3, 3, 3);
    let mut rng = RandomStream::at(7, &[0]).rng();
    let table = (0..k * v).map(|_| (0..d).map(|_| 2.0 * rng.uniform() - 1.0).collect()).collect();
    let features = FeatureMap::new(k, v, d, table)?;
    let reward = RewardTable::new(k, v, (0..k * v).map(|_| normal(&mut rng)).collect())?;
    let kernel = flip_labels_kernel(&build_bt_kernel(&reward, sigmoid)?, eps)?;
    let mut probs = vec![0.0; k * v];
    for x in 0..k {
        probs[x * v + x % v] = 1.0;
    }
    let world = World::new(vec![1.0 / k as f64; k], reward, kernel, PolicyTable::new(k, v, probs)?)?;
    Ok(Scenario {
        world,
        features,
        beta: 1.0,
        truth: None,
    })
}

/// Response `y + 1 (mod 3)` beats `y` with probability `strength`.
pub fn intransitive(strength: f64) -> Result<Scenario> {
    let v = 3;
    let mut probs = vec![0.5; v * v];
    for a in 0..v {
        probs[a * v + (a + 1) % v] = strength;
        probs[a * v + (a + 2) % v] = 1.0 - strength;
    }
    let kernel = explicit_kernel(1, v, probs)?;
    let features = FeatureMap::new(1, v, 2, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]])?;
    let reward = RewardTable::new(1, v, vec![0.0; v])?;
    let world = World::new(vec![1.0], reward, kernel, PolicyTable::uniform(1, v))?;
    Ok(Scenario {
        world,
        features,
        beta: 1.0,
        truth: None,
    })
}

/// Uniform features on [-1, 1]; the reward adds an off-span Gaussian
/// component to a linear one and labels are flipped at rate `eps`.
pub fn random_misspecified(k: usize, v: usize, d: usize, eps: f64, world_seed: u64) -> Result<Scenario> {
    let mut rng = RandomStream::at(world_seed, &[1]).rng();
    let table = (0..k * v).map(|_| (0..d).map(|_| 2.0 * rng.uniform() - 1.0).collect()).collect();
    let features = FeatureMap::new(k, v, d, table)?;
    let theta: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let linear = RewardModel::new(features.clone(), theta)?.reward_table();
    let values = (0..k)
        .flat_map(|x| linear.row(x).to_vec())
        .map(|r| r + 0.5 * normal(&mut rng))
        .collect();
    let reward = RewardTable::new(k, v, values)?;
    let kernel = flip_labels_kernel(&build_bt_kernel(&reward, sigmoid)?, eps)?;
    let ref_policy = floored_dirichlet_rows(&mut rng, k, v)?;
    let rho = dirichlet_ones(&mut rng, k);
    let total: f64 = rho.iter().sum();
    let rho = rho.into_iter().map(|p| p / total).collect();
    let world = World::new(rho, reward, kernel, ref_policy)?;
    Ok(Scenario {
        world,
        features,
        beta: 1.0,
        truth: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_build_and_are_deterministic() {
        let specs = [
            WorldSpec::LabelFlip { eps: 0.2 },
            WorldSpec::CorrectlySpecified {
                num_prompts: 48,
                num_responses: 4,
                dim: 24,
                reward_scale: 0.02,
                world_seed: 1,
            },
            WorldSpec::DeterministicRef { eps: 0.2 },
            WorldSpec::Intransitive { strength: 0.9 },
            WorldSpec::Random {
                num_prompts: 3,
                num_responses: 3,
                dim: 2,
                eps: 0.2,
                world_seed: 5,
            },
        ];
        for s in specs {
            let a = s.build().unwrap();
            assert_eq!(a, s.build().unwrap(), "{}", s.name());
        }
    }

    #[test]
    fn label_flip_layout() {
        let s = label_flip(0.2).unwrap();
        // prompt 2, response 3 has feature 2 in coordinate 2 only
        assert_eq!(s.features.phi(2, 3), &[0.0, 0.0, 2.0, 0.0]);
        let q = 0.8 * sigmoid(5.0 - 3.0) + 0.2 * (1.0 - sigmoid(2.0));
        assert!((s.world.kernel.prob(1, 0, 2) - q).abs() < 1e-15);
        assert!(!s.world.kernel.reward_based);
    }

    #[test]
    fn deterministic_preset_is_deterministic() {
        let s = deterministic_ref(0.2).unwrap();
        assert!(s.world.ref_policy.is_deterministic());
    }

    #[test]
    fn intransitive_cycle() {
        let s = intransitive(0.9).unwrap();
        let k = &s.world.kernel;
        assert_eq!(k.prob(0, 0, 1), 0.9);
        assert_eq!(k.prob(0, 1, 2), 0.9);
        assert_eq!(k.prob(0, 2, 0), 0.9);
        assert!((k.prob(0, 1, 0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn spec_parses_with_defaults() {
        let s: WorldSpec = serde_json::from_str(r#"{"preset":"label_flip"}"#).unwrap();
        assert_eq!(s, WorldSpec::LabelFlip { eps: 0.2 });
        assert!(serde_json::from_str::<WorldSpec>(r#"{"preset":"label_flip","epz":0.1}"#).is_err());
    }
}
