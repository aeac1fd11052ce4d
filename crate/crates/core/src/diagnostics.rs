//! Exact population quantities: the target parameter, curvature, the
//! conditional-gradient covariance that governs the variance reduction,
//! expected true reward and suboptimality gaps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::estimation::{minimize, OptimizerSettings, PairObjective};
use crate::losses::{risk_from_weights, CellWeights, LossKind, LossSpec};
use crate::models::{dot, policy_from_reward, policy_probabilities, Activation, FeatureMap, PreferenceModel, RewardModel};
use crate::numfmt;
use crate::stats::symmetric_eigenvalues;
use crate::world::{PolicyTable, World};
use crate::{Error, Result};

const SINGULAR_FLOOR: f64 = 1e-10;

/// `W[c][u] = rho(x) pi(y1|x) pi(y2|x) P(z = u | c)` under the true world.
pub fn population_weights(world: &World) -> CellWeights {
    let v = world.num_responses;
    let mut w = CellWeights::zeros(world.num_prompts, v);
    for x in 0..world.num_prompts {
        let row = world.ref_policy.row(x);
        for a in 0..v {
            for b in 0..v {
                let mass = world.prompt_dist[x] * row[a] * row[b];
                let p = world.kernel.prob(x, a, b);
                let i = w.index(x, a, b);
                w.weights[i] = [mass * (1.0 - p), mass * p];
            }
        }
    }
    w
}

/// Pair probability `rho(x) pi(y1|x) pi(y2|x)` per cell.
fn pair_mass(world: &World, x: usize, a: usize, b: usize) -> f64 {
    world.prompt_dist[x] * world.ref_policy.prob(x, a) * world.ref_policy.prob(x, b)
}

fn check_shape<M: PreferenceModel>(model: &M, world: &World) -> Result<()> {
    let f = model.features();
    if (f.num_prompts, f.num_responses) != (world.num_prompts, world.num_responses) {
        return Err(Error::DimensionMismatch("model features do not match the world".into()));
    }
    Ok(())
}

fn require_ce(spec: &LossSpec, what: &'static str) -> Result<()> {
    if spec.kind != LossKind::CrossEntropy {
        return Err(Error::Unsupported(what));
    }
    Ok(())
}

fn require_ce_sigmoid(spec: &LossSpec, activation: Activation, what: &'static str) -> Result<()> {
    require_ce(spec, what)?;
    if activation != Activation::Sigmoid {
        return Err(Error::Unsupported(what));
    }
    Ok(())
}

/// Expected loss and gradient under the world's pair and label distribution.
pub fn population_risk<M: PreferenceModel>(
    spec: &LossSpec,
    model: &M,
    activation: Activation,
    world: &World,
) -> Result<(f64, Vec<f64>)> {
    require_ce(spec, "population_risk")?;
    check_shape(model, world)?;
    Ok(risk_from_weights(spec, model, activation, &population_weights(world)))
}

/// Minimizer of the population risk; the returned point has gradient norm at
/// most 1e-10.
pub fn theta_bar<M: PreferenceModel>(
    spec: &LossSpec,
    template: &M,
    activation: Activation,
    world: &World,
    settings: &OptimizerSettings,
) -> Result<Vec<f64>> {
    require_ce(spec, "theta_bar")?;
    check_shape(template, world)?;
    let settings = OptimizerSettings {
        grad_tol: settings.grad_tol.min(1e-10),
        ..settings.clone()
    };
    let obj = PairObjective {
        spec: *spec,
        activation,
        model: template,
        weights: population_weights(world),
    };
    let fit = minimize(&obj, &settings)?;
    if !fit.converged {
        return Err(Error::NotConverged {
            grad_norm: fit.grad_norm,
            tol: settings.grad_tol,
        });
    }
    Ok(fit.theta)
}

fn outer_add(m: &mut DMatrix<f64>, w: f64, a: &[f64], b: &[f64]) {
    for i in 0..a.len() {
        for j in 0..b.len() {
            m[(i, j)] += w * a[i] * b[j];
        }
    }
}

/// Population Hessian `sum w p (1 - p) s s^T` without the singularity check.
pub fn curvature<M: PreferenceModel>(spec: &LossSpec, activation: Activation, world: &World, model: &M) -> Result<DMatrix<f64>> {
    require_ce_sigmoid(spec, activation, "matrix_A")?;
    check_shape(model, world)?;
    let d = model.dim();
    let mut a = DMatrix::zeros(d, d);
    let v = world.num_responses;
    for x in 0..world.num_prompts {
        for y1 in 0..v {
            for y2 in 0..v {
                let w = pair_mass(world, x, y1, y2);
                if w == 0.0 {
                    continue;
                }
                let s = model.slope(x, y1, y2);
                let p = activation.eval(dot(model.theta(), &s) + model.offset(x, y1, y2));
                outer_add(&mut a, w * p * (1.0 - p), &s, &s);
            }
        }
    }
    Ok(a)
}

/// Positive-definite curvature of the population risk at `model.theta()`;
/// rejected as singular when its smallest eigenvalue is below 1e-10.
pub fn matrix_a<M: PreferenceModel>(spec: &LossSpec, activation: Activation, world: &World, model: &M) -> Result<DMatrix<f64>> {
    let a = curvature(spec, activation, world, model)?;
    let lambda_min = symmetric_eigenvalues(&a).first().copied().unwrap_or(0.0);
    if lambda_min < SINGULAR_FLOOR {
        return Err(Error::SingularCurvature { lambda_min });
    }
    Ok(a)
}

/// Label-conditional expected gradient `g(c) = (p_theta - p*) s(c)`.
fn conditional_gradient<M: PreferenceModel>(activation: Activation, world: &World, model: &M, x: usize, a: usize, b: usize) -> Vec<f64> {
    let s = model.slope(x, a, b);
    let p = activation.eval(dot(model.theta(), &s) + model.offset(x, a, b));
    let r = p - world.kernel.prob(x, a, b);
    s.into_iter().map(|v| r * v).collect()
}

/// `H = sum_x rho(x) E_pairs[(g - gbar(x)) (g - gbar(x))^T]`.
pub fn matrix_h<M: PreferenceModel>(spec: &LossSpec, activation: Activation, world: &World, model: &M) -> Result<DMatrix<f64>> {
    require_ce_sigmoid(spec, activation, "matrix_H")?;
    check_shape(model, world)?;
    let d = model.dim();
    let v = world.num_responses;
    let mut h = DMatrix::zeros(d, d);
    for x in 0..world.num_prompts {
        if world.prompt_dist[x] == 0.0 {
            continue;
        }
        let row = world.ref_policy.row(x);
        let mut gs = Vec::new();
        let mut gbar = vec![0.0; d];
        for a in 0..v {
            for b in 0..v {
                let w = row[a] * row[b];
                if w == 0.0 {
                    continue;
                }
                let g = conditional_gradient(activation, world, model, x, a, b);
                for (m, gi) in gbar.iter_mut().zip(&g) {
                    *m += w * gi;
                }
                gs.push((w, g));
            }
        }
        for (w, g) in gs {
            let c: Vec<f64> = g.iter().zip(&gbar).map(|(a, b)| a - b).collect();
            outer_add(&mut h, world.prompt_dist[x] * w, &c, &c);
        }
    }
    Ok(h)
}

/// `E ||g(pair) - g(pair*)||^2` over two independent reference pairs drawn
/// for the same prompt, by direct quadruple enumeration.
pub fn dispersion<M: PreferenceModel>(spec: &LossSpec, activation: Activation, world: &World, model: &M) -> Result<f64> {
    require_ce_sigmoid(spec, activation, "dispersion")?;
    check_shape(model, world)?;
    let v = world.num_responses;
    let mut total = 0.0;
    for x in 0..world.num_prompts {
        let row = world.ref_policy.row(x);
        let mut gs = Vec::new();
        for a in 0..v {
            for b in 0..v {
                let w = row[a] * row[b];
                if w > 0.0 {
                    gs.push((w, conditional_gradient(activation, world, model, x, a, b)));
                }
            }
        }
        let mut inner = 0.0;
        for (w1, g1) in &gs {
            for (w2, g2) in &gs {
                let sq: f64 = g1.iter().zip(g2).map(|(a, b)| (a - b).powi(2)).sum();
                inner += w1 * w2 * sq;
            }
        }
        total += world.prompt_dist[x] * inner;
    }
    Ok(total)
}

/// Second moment of the per-datum gradient, `E[grad grad^T]`, which equals
/// its covariance at the target parameter.
pub fn score_second_moment<M: PreferenceModel>(spec: &LossSpec, activation: Activation, world: &World, model: &M) -> Result<DMatrix<f64>> {
    require_ce_sigmoid(spec, activation, "score covariance")?;
    check_shape(model, world)?;
    let d = model.dim();
    let v = world.num_responses;
    let mut b = DMatrix::zeros(d, d);
    for x in 0..world.num_prompts {
        for y1 in 0..v {
            for y2 in 0..v {
                let w = pair_mass(world, x, y1, y2);
                if w == 0.0 {
                    continue;
                }
                let s = model.slope(x, y1, y2);
                let p = activation.eval(dot(model.theta(), &s) + model.offset(x, y1, y2));
                let ps = world.kernel.prob(x, y1, y2);
                let m2 = ps * (p - 1.0).powi(2) + (1.0 - ps) * p * p;
                outer_add(&mut b, w * m2, &s, &s);
            }
        }
    }
    Ok(b)
}

fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lambda_min = symmetric_eigenvalues(a).first().copied().unwrap_or(0.0);
    if lambda_min < SINGULAR_FLOOR {
        return Err(Error::SingularCurvature { lambda_min });
    }
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or(Error::SingularCurvature { lambda_min })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `A^-1 B A^-1 / n`.
pub fn sandwich_covariance(a: &DMatrix<f64>, b: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let ai = inverse(a)?;
    Ok(symmetrize(&ai * b * &ai / n as f64))
}

/// `A^-1 H A^-1 / n`.
pub fn predicted_reduction(a: &DMatrix<f64>, h: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    sandwich_covariance(a, h, n)
}

/// `J = sum_x rho(x) sum_y pi(y|x) r*(x, y)`.
pub fn expected_true_reward(world: &World, policy: &PolicyTable) -> f64 {
    (0..world.num_prompts)
        .map(|x| world.prompt_dist[x] * dot(policy.row(x), world.true_reward.row(x)))
        .sum()
}

/// `J* = sum_x rho(x) max_y r*(x, y)`.
pub fn optimal_reward(world: &World) -> f64 {
    (0..world.num_prompts)
        .map(|x| {
            let best = world.true_reward.row(x).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            world.prompt_dist[x] * best
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    OneStage,
    #[default]
    TwoStage,
}

/// Policy induced by `theta`: the softmax policy for one-stage fits, or the
/// KL-regularized maximizer against the true reference for two-stage fits.
pub fn induced_policy(world: &World, features: &FeatureMap, theta: &[f64], pipeline: Pipeline, beta: f64) -> Result<PolicyTable> {
    match pipeline {
        Pipeline::OneStage => Ok(policy_probabilities(features, theta)),
        Pipeline::TwoStage => {
            let rm = RewardModel::new(features.clone(), theta.to_vec())?;
            policy_from_reward(&rm.reward_table(), &world.ref_policy, beta)
        }
    }
}

/// `R(theta) = J* - J(theta)`, clipped at 0 against rounding.
pub fn suboptimality_gap(world: &World, features: &FeatureMap, theta: &[f64], pipeline: Pipeline, beta: f64) -> Result<f64> {
    let pi = induced_policy(world, features, theta, pipeline, beta)?;
    Ok((optimal_reward(world) - expected_true_reward(world, &pi)).max(0.0))
}

const J_STEP: f64 = 1e-4;

fn j_at(world: &World, features: &FeatureMap, theta: &[f64], pipeline: Pipeline, beta: f64) -> Result<f64> {
    Ok(expected_true_reward(world, &induced_policy(world, features, theta, pipeline, beta)?))
}

/// Central-difference gradient of `J`.
pub fn grad_j(world: &World, features: &FeatureMap, theta: &[f64], pipeline: Pipeline, beta: f64) -> Result<Vec<f64>> {
    (0..theta.len())
        .map(|i| {
            let mut p = theta.to_vec();
            let mut m = theta.to_vec();
            p[i] += J_STEP;
            m[i] -= J_STEP;
            Ok((j_at(world, features, &p, pipeline, beta)? - j_at(world, features, &m, pipeline, beta)?) / (2.0 * J_STEP))
        })
        .collect()
}

/// `-∇²J` by central differences with step 1e-4, symmetrized.
pub fn neg_hessian_j(world: &World, features: &FeatureMap, theta: &[f64], pipeline: Pipeline, beta: f64) -> Result<DMatrix<f64>> {
    let d = theta.len();
    let h = J_STEP;
    let mut out = DMatrix::zeros(d, d);
    let eval = |di: f64, i: usize, dj: f64, j: usize| -> Result<f64> {
        let mut t = theta.to_vec();
        t[i] += di;
        t[j] += dj;
        j_at(world, features, &t, pipeline, beta)
    };
    let j0 = j_at(world, features, theta, pipeline, beta)?;
    for i in 0..d {
        let second = (eval(h, i, 0.0, i)? - 2.0 * j0 + eval(-h, i, 0.0, i)?) / (h * h);
        out[(i, i)] = -second;
        for j in 0..i {
            let pp = eval(h, i, h, j)?;
            let pm = eval(h, i, -h, j)?;
            let mp = eval(-h, i, h, j)?;
            let mm = eval(-h, i, -h, j)?;
            let mixed = (pp - pm - mp + mm) / (4.0 * h * h);
            out[(i, j)] = -mixed;
            out[(j, i)] = -mixed;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    #[serde(with = "numfmt::vector")]
    pub theta_bar: Vec<f64>,
    #[serde(rename = "A", with = "numfmt::matrix")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "H", with = "numfmt::matrix")]
    pub h: Vec<Vec<f64>>,
    #[serde(with = "numfmt::scalar")]
    pub lambda_min: f64,
    #[serde(with = "numfmt::scalar")]
    pub lambda_max: f64,
    #[serde(with = "numfmt::scalar")]
    pub h_lambda_min: f64,
    pub n: usize,
    #[serde(with = "numfmt::matrix")]
    pub predicted_reduction: Vec<Vec<f64>>,
    #[serde(with = "numfmt::scalar")]
    pub trace_predicted_reduction: f64,
    /// Sandwich covariance `A^-1 E[grad grad^T] A^-1 / n` of the baseline fit.
    #[serde(with = "numfmt::matrix")]
    pub sandwich: Vec<Vec<f64>>,
    #[serde(with = "numfmt::scalar")]
    pub trace_sandwich: f64,
    #[serde(with = "numfmt::scalar")]
    pub dispersion: f64,
    #[serde(with = "numfmt::scalar")]
    pub trace_h: f64,
    /// `|trace(H) - dispersion / 2|`.
    #[serde(with = "numfmt::scalar")]
    pub identity_gap: f64,
}

impl TheoryReport {
    pub fn a_matrix(&self) -> DMatrix<f64> {
        numfmt::matrix_from_rows(&self.a)
    }
    pub fn h_matrix(&self) -> DMatrix<f64> {
        numfmt::matrix_from_rows(&self.h)
    }
}

/// All population quantities at the target parameter for sample size `n`.
pub fn theory_report<M: PreferenceModel>(
    spec: &LossSpec,
    activation: Activation,
    template: &M,
    world: &World,
    n: usize,
    settings: &OptimizerSettings,
) -> Result<TheoryReport> {
    require_ce_sigmoid(spec, activation, "theory_report")?;
    if n == 0 {
        return Err(Error::InvalidConfig("n must be positive".into()));
    }
    let tb = theta_bar(spec, template, activation, world, settings)?;
    let model = template.with_theta(&tb);
    let a = matrix_a(spec, activation, world, &model)?;
    let h = matrix_h(spec, activation, world, &model)?;
    let b = score_second_moment(spec, activation, world, &model)?;
    let ev = symmetric_eigenvalues(&a);
    let hev = symmetric_eigenvalues(&h);
    let pr = predicted_reduction(&a, &h, n)?;
    let sw = sandwich_covariance(&a, &b, n)?;
    let disp = dispersion(spec, activation, world, &model)?;
    let trace_h = h.trace();
    Ok(TheoryReport {
        theta_bar: tb,
        lambda_min: ev[0],
        lambda_max: *ev.last().expect("non-empty"),
        h_lambda_min: hev.first().copied().unwrap_or(0.0),
        a: numfmt::matrix_rows(&a),
        h: numfmt::matrix_rows(&h),
        n,
        trace_predicted_reduction: pr.trace(),
        predicted_reduction: numfmt::matrix_rows(&pr),
        trace_sandwich: sw.trace(),
        sandwich: numfmt::matrix_rows(&sw),
        dispersion: disp,
        trace_h,
        identity_gap: (trace_h - 0.5 * disp).abs(),
    })
}

/// Trace of `D Q` for symmetric `D`, `Q`.
pub fn trace_product(d: &DMatrix<f64>, q: &DMatrix<f64>) -> f64 {
    (d * q).trace()
}

pub fn to_vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
