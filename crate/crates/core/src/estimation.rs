//! Deterministic full-batch minimization of the empirical risks.

use serde::{Deserialize, Serialize};

use crate::losses::{baseline_weights, risk_from_weights, vrpo_weights, CellWeights, LossSpec, VrpoConfig};
use crate::models::{Activation, PreferenceModel};
use crate::numfmt;
use crate::rng::RandomStream;
use crate::world::Dataset;
use crate::{Error, Result};

/// A differentiable scalar function of `theta`.
pub trait Objective {
    fn dim(&self) -> usize;
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>);
}

impl<F: Fn(&[f64]) -> (f64, Vec<f64>)> Objective for (usize, F) {
    fn dim(&self) -> usize {
        self.0
    }
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        (self.1)(theta)
    }
}

/// Cell-weighted pairwise risk, see [`crate::losses`].
pub struct PairObjective<'a, M: PreferenceModel> {
    pub spec: LossSpec,
    pub activation: Activation,
    pub model: &'a M,
    pub weights: CellWeights,
}

impl<M: PreferenceModel> Objective for PairObjective<'_, M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn eval(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        risk_from_weights(&self.spec, &self.model.with_theta(theta), self.activation, &self.weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Starting point; zeros when absent.
    pub init: Option<Vec<f64>>,
    pub shrink: f64,
    pub armijo: f64,
    pub initial_step: f64,
    pub max_backtracks: usize,
    pub restarts: usize,
    /// Standard deviation of the uniform perturbation applied to later
    /// restarts' starting points.
    pub restart_scale: f64,
    pub restart_seed: u64,
    pub record_trace: bool,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            grad_tol: 1e-9,
            init: None,
            shrink: 0.5,
            armijo: 1e-4,
            initial_step: 1.0,
            max_backtracks: 60,
            restarts: 1,
            restart_scale: 1.0,
            restart_seed: 0,
            record_trace: false,
        }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iters > 0
            && self.grad_tol > 0.0
            && self.shrink > 0.0
            && self.shrink < 1.0
            && self.armijo > 0.0
            && self.armijo < 1.0
            && self.initial_step > 0.0
            && self.restarts >= 1
            && self.restart_scale >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(with = "numfmt::vector")]
    pub theta: Vec<f64>,
    #[serde(with = "numfmt::scalar")]
    pub final_risk: f64,
    #[serde(with = "numfmt::scalar")]
    pub grad_norm: f64,
    pub iters: usize,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none", default, with = "trace_format")]
    pub trace: Option<Vec<f64>>,
}

mod trace_format {
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Option<Vec<f64>>, s: S) -> Result<S::Ok, S::Error> {
        match t {
            Some(v) => crate::numfmt::vector::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<f64>>, D::Error> {
        crate::numfmt::vector::deserialize(d).map(Some)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient descent from one start: the first trial step is
/// `initial_step`, later trial steps are Barzilai-Borwein, and every step is
/// accepted by Armijo backtracking.
///
/// Once the predicted decrease falls below the resolution of the risk value
/// itself, Armijo cannot tell a good step from rounding noise. In that regime
/// a step is also accepted if the risk stays within a few ulps and the
/// gradient norm strictly decreases.
fn descend(obj: &dyn Objective, start: Vec<f64>, s: &OptimizerSettings) -> Result<FitResult> {
    let mut theta = start;
    let (mut f, mut g) = obj.eval(&theta);
    if !f.is_finite() {
        return Err(Error::Diverged { what: "risk", iter: 0 });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { what: "gradient", iter: 0 });
    }
    let mut trace = s.record_trace.then(|| vec![f]);
    let mut gn = norm(&g);
    let mut step = s.initial_step;
    let mut iters = 0;
    while iters < s.max_iters && gn > s.grad_tol {
        let mut t = step;
        let mut accepted = None;
        let mut saw_finite = false;
        for _ in 0..=s.max_backtracks {
            let cand: Vec<f64> = theta.iter().zip(&g).map(|(a, b)| a - t * b).collect();
            let (fc, gc) = obj.eval(&cand);
            if fc.is_finite() && gc.iter().all(|v| v.is_finite()) {
                saw_finite = true;
                let decrease = s.armijo * t * gn * gn;
                let resolution = 8.0 * f64::EPSILON * f.abs().max(1.0);
                let armijo = fc <= f - decrease;
                let flat = decrease < resolution && fc <= f + resolution && norm(&gc) < gn;
                if armijo || flat {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            t *= s.shrink;
        }
        let Some((cand, fc, gc)) = accepted else {
            if !saw_finite {
                return Err(Error::Diverged { what: "risk", iter: iters });
            }
            break;
        };
        let sv: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = sv.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let ss: f64 = sv.iter().map(|a| a * a).sum();
        step = if sy > 0.0 && (ss / sy).is_finite() { ss / sy } else { s.initial_step };
        theta = cand;
        f = fc;
        g = gc;
        gn = norm(&g);
        iters += 1;
        if let Some(tr) = trace.as_mut() {
            tr.push(f);
        }
    }
    Ok(FitResult {
        theta,
        final_risk: f,
        grad_norm: gn,
        iters,
        converged: gn <= s.grad_tol,
        trace,
    })
}

/// Minimizes `obj`; with several restarts, the lowest final risk wins (ties
/// go to the earliest restart).
pub fn minimize(obj: &dyn Objective, settings: &OptimizerSettings) -> Result<FitResult> {
    settings.validate()?;
    let d = obj.dim();
    let init = match &settings.init {
        Some(v) if v.len() != d => {
            return Err(Error::DimensionMismatch(format!("init has length {}, objective has dim {d}", v.len())))
        }
        Some(v) => v.clone(),
        None => vec![0.0; d],
    };
    let mut best: Option<FitResult> = None;
    for r in 0..settings.restarts {
        let start = if r == 0 {
            init.clone()
        } else {
            let mut rng = RandomStream::at(settings.restart_seed, &[u64::MAX - 1, r as u64]).rng();
            let half_width = settings.restart_scale * 3f64.sqrt();
            init.iter().map(|v| v + half_width * (2.0 * rng.uniform() - 1.0)).collect()
        };
        let fit = descend(obj, start, settings)?;
        if best.as_ref().is_none_or(|b| fit.final_risk < b.final_risk) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn fit_baseline<M: PreferenceModel>(
    spec: &LossSpec,
    activation: Activation,
    template: &M,
    data: &Dataset,
    settings: &OptimizerSettings,
) -> Result<FitResult> {
    let obj = PairObjective {
        spec: *spec,
        activation,
        model: template,
        weights: baseline_weights(data)?,
    };
    minimize(&obj, settings)
}

pub fn fit_vrpo<M: PreferenceModel>(
    spec: &LossSpec,
    activation: Activation,
    template: &M,
    data: &Dataset,
    cfg: &VrpoConfig,
    settings: &OptimizerSettings,
    stream: &RandomStream,
) -> Result<FitResult> {
    let obj = PairObjective {
        spec: *spec,
        activation,
        model: template,
        weights: vrpo_weights(data, cfg, stream)?,
    };
    minimize(&obj, settings)
}
