//! Replicated studies comparing the baseline estimator against the
//! variance-reduced one.
//!
//! Replicate `m` at sample-size index `i` samples its dataset from stream
//! `[i, m]` under the configured root seed; Monte-Carlo third-term pairs come
//! from `[i, m, 1, ..]`, bootstrap resamples from `[i, u64::MAX, k]`.
//! Replicates run in parallel and are folded in index order, so reports are
//! identical for any thread count.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, Pipeline, TheoryReport};
use crate::estimation::{fit_baseline, fit_vrpo, FitResult, OptimizerSettings};
use crate::losses::{LossSpec, ThirdTermMode, VrpoConfig};
use crate::models::{
    corrupt_auxiliary, fit_auxiliary, oracle_auxiliary, Activation, AuxProvenance, AuxiliaryModel, FeatureMap,
    PolicyModel, PreferenceModel, RewardModel,
};
use crate::numfmt;
use crate::presets::{Scenario, WorldSpec};
use crate::rng::RandomStream;
use crate::stats;
use crate::world::{sample_dataset, Dataset, PolicyTable, World};
use crate::{Error, Result};

/// Either model family behind one type, so studies are written once.
#[derive(Debug, Clone, PartialEq)]
pub enum Template {
    Reward(RewardModel),
    Policy(PolicyModel),
}

impl PreferenceModel for Template {
    fn features(&self) -> &FeatureMap {
        match self {
            Template::Reward(m) => m.features(),
            Template::Policy(m) => m.features(),
        }
    }
    fn theta(&self) -> &[f64] {
        match self {
            Template::Reward(m) => m.theta(),
            Template::Policy(m) => m.theta(),
        }
    }
    fn set_theta(&mut self, theta: &[f64]) {
        match self {
            Template::Reward(m) => m.set_theta(theta),
            Template::Policy(m) => m.set_theta(theta),
        }
    }
    fn scale(&self) -> f64 {
        match self {
            Template::Reward(m) => m.scale(),
            Template::Policy(m) => m.scale(),
        }
    }
    fn offset(&self, x: usize, y1: usize, y2: usize) -> f64 {
        match self {
            Template::Reward(m) => m.offset(x, y1, y2),
            Template::Policy(m) => m.offset(x, y1, y2),
        }
    }
}

/// Zero-parameter model for the pipeline; one-stage fits are anchored at the
/// world's reference policy.
pub fn template_for(scenario: &Scenario, pipeline: Pipeline, beta: f64) -> Result<Template> {
    let d = scenario.features.dim;
    Ok(match pipeline {
        Pipeline::TwoStage => Template::Reward(RewardModel::zeros(scenario.features.clone())),
        Pipeline::OneStage => Template::Policy(PolicyModel::new(
            scenario.features.clone(),
            vec![0.0; d],
            beta,
            scenario.world.ref_policy.clone(),
        )?),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefChoice {
    #[default]
    True,
    /// The true reference mixed with the uniform policy.
    Perturbed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Variance,
    Dr,
    Subopt,
}

impl StudyKind {
    pub const ALL: [StudyKind; 3] = [StudyKind::Variance, StudyKind::Dr, StudyKind::Subopt];

    pub fn as_str(self) -> &'static str {
        match self {
            StudyKind::Variance => "variance",
            StudyKind::Dr => "dr",
            StudyKind::Subopt => "subopt",
        }
    }
}

impl fmt::Display for StudyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StudyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StudyKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::InvalidConfig(format!("unknown study `{s}`; valid options: variance, dr, subopt"))
        })
    }
}

fn default_oracle() -> AuxProvenance {
    AuxProvenance::Oracle
}
fn default_one() -> usize {
    1
}
fn default_resamples() -> usize {
    2000
}
fn default_level() -> f64 {
    0.95
}
fn default_smoothing() -> f64 {
    1.0
}
fn default_mix() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Study run by [`run_configured`] when no kind is given explicitly.
    #[serde(default)]
    pub study: Option<StudyKind>,
    pub world: WorldSpec,
    #[serde(default)]
    pub pipeline: Pipeline,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_oracle")]
    pub aux: AuxProvenance,
    #[serde(default)]
    pub specified_ref: RefChoice,
    #[serde(default)]
    pub third_term_mode: ThirdTermMode,
    #[serde(default = "default_one")]
    pub mc_pairs: usize,
    pub sample_sizes: Vec<usize>,
    pub replicates: usize,
    /// Overrides the scenario's KL weight.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub root_seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    /// Add-alpha smoothing for fitted auxiliary tables.
    #[serde(default = "default_smoothing")]
    pub aux_smoothing: f64,
    /// Weight on the uniform policy in the perturbed reference.
    #[serde(default = "default_mix")]
    pub ref_perturbation: f64,
}

impl StudyConfig {
    pub fn new(world: WorldSpec, sample_sizes: Vec<usize>, replicates: usize, root_seed: u64) -> Self {
        Self {
            study: None,
            world,
            pipeline: Pipeline::default(),
            loss: LossSpec::default(),
            activation: Activation::default(),
            aux: AuxProvenance::Oracle,
            specified_ref: RefChoice::True,
            third_term_mode: ThirdTermMode::ExactEnumeration,
            mc_pairs: 1,
            sample_sizes,
            replicates,
            beta: None,
            root_seed,
            optimizer: OptimizerSettings::default(),
            bootstrap_resamples: 2000,
            ci_level: 0.95,
            aux_smoothing: 1.0,
            ref_perturbation: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::InvalidConfig(format!("replicates must be at least 2, got {}", self.replicates)));
        }
        if self.sample_sizes.is_empty() {
            return Err(Error::InvalidConfig("sample_sizes is empty".into()));
        }
        if let Some(n) = self.sample_sizes.iter().find(|&&n| n < 50) {
            return Err(Error::InvalidConfig(format!("sample size {n} is below 50")));
        }
        if self.bootstrap_resamples == 0 || !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidConfig("bootstrap needs resamples > 0 and a level in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.ref_perturbation) {
            return Err(Error::InvalidConfig("ref_perturbation must lie in [0, 1]".into()));
        }
        if self.beta.is_some_and(|b| !(b > 0.0)) {
            return Err(Error::InvalidConfig("beta must be positive".into()));
        }
        self.loss.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub n: usize,
    /// Replicates that entered the moments.
    pub used: usize,
    #[serde(with = "numfmt::vector")]
    pub mean_theta: Vec<f64>,
    #[serde(with = "numfmt::matrix")]
    pub covariance: Vec<Vec<f64>>,
    #[serde(with = "numfmt::scalar")]
    pub trace_var: f64,
    #[serde(with = "numfmt::scalar")]
    pub cov_min_eigenvalue: f64,
    /// Mean squared distance to the target parameter.
    #[serde(with = "numfmt::optional")]
    pub mse: Option<f64>,
    /// `||mean(theta) - theta_bar||`.
    #[serde(with = "numfmt::optional")]
    pub bias_norm: Option<f64>,
    #[serde(with = "numfmt::optional")]
    pub mean_gap: Option<f64>,
    #[serde(with = "numfmt::optional")]
    pub gap_se: Option<f64>,
}

/// Baseline against the variance-reduced estimator at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub n: usize,
    #[serde(with = "numfmt::scalar")]
    pub trace_var_diff: f64,
    #[serde(with = "numfmt::scalar")]
    pub ci_lo: f64,
    #[serde(with = "numfmt::scalar")]
    pub ci_hi: f64,
    #[serde(with = "numfmt::optional")]
    pub predicted_trace_reduction: Option<f64>,
    #[serde(with = "numfmt::optional")]
    pub reduction_ratio: Option<f64>,
    #[serde(with = "numfmt::optional")]
    pub sandwich_trace: Option<f64>,
    /// Empirical baseline trace variance over the sandwich trace.
    #[serde(with = "numfmt::optional")]
    pub sandwich_ratio: Option<f64>,
    /// Smallest eigenvalue of the empirical covariance difference.
    #[serde(with = "numfmt::scalar")]
    pub diff_min_eigenvalue: f64,
    /// Whether that eigenvalue clears `-0.1 * max(trace_var(baseline), trace_var(vrpo))`.
    pub psd_relaxed: bool,
    #[serde(with = "numfmt::optional")]
    pub gap_diff: Option<f64>,
    #[serde(with = "numfmt::optional")]
    pub gap_diff_se: Option<f64>,
    #[serde(with = "numfmt::optional")]
    pub gap_ci_lo: Option<f64>,
    #[serde(with = "numfmt::optional")]
    pub gap_ci_hi: Option<f64>,
    /// `trace((Cov(baseline) - Cov(vrpo)) (-Hess J(theta_bar)))`.
    #[serde(with = "numfmt::optional")]
    pub gap_trace_formula: Option<f64>,
    #[serde(with = "numfmt::optional")]
    pub gap_ratio: Option<f64>,
    /// `gap_diff` against half the trace formula (second-order Taylor weight).
    #[serde(with = "numfmt::optional")]
    pub half_gap_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySlope {
    pub arm: String,
    /// Least-squares slope of `ln ||mean(theta) - theta_bar||` on `ln n`.
    #[serde(with = "numfmt::scalar")]
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: StudyKind,
    pub world: String,
    pub pipeline: Pipeline,
    pub root_seed: u64,
    pub replicates: usize,
    pub sample_sizes: Vec<usize>,
    /// Excluded replicates per sample size.
    pub failed_replicates: Vec<usize>,
    /// False when more than 1% of the replicates at some sample size failed.
    pub valid: bool,
    #[serde(with = "numfmt::scalar")]
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_bar: Option<Vec<f64>>,
    #[serde(with = "numfmt::optional")]
    pub target_gap: Option<f64>,
    /// Theory at unit sample size; per-n values are divided by n.
    pub theory: Option<TheoryReport>,
    pub theory_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neg_hessian_j: Option<Vec<Vec<f64>>>,
    pub arms: Vec<ArmSummary>,
    pub comparisons: Vec<Comparison>,
    pub slopes: Vec<DecaySlope>,
}

impl StudyReport {
    pub fn arm(&self, name: &str, n: usize) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == name && a.n == n)
    }

    pub fn comparison(&self, n: usize) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.n == n)
    }

    pub fn slope(&self, arm: &str) -> Option<f64> {
        self.slopes.iter().find(|s| s.arm == arm).map(|s| s.slope)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One fitted arm inside a replicate.
#[derive(Debug, Clone)]
enum ArmPlan {
    Baseline,
    Vrpo { reference: PolicyTable, aux: AuxChoice },
}

#[derive(Debug, Clone, Copy)]
enum AuxChoice {
    Fixed(usize),
    Fitted,
}

struct Setup {
    scenario: Scenario,
    template: Template,
    beta: f64,
    arms: Vec<(String, ArmPlan)>,
    fixed_aux: Vec<AuxiliaryModel>,
}

fn specified_reference(world: &World, choice: RefChoice, weight: f64) -> Result<PolicyTable> {
    match choice {
        RefChoice::True => Ok(world.ref_policy.clone()),
        RefChoice::Perturbed => world
            .ref_policy
            .mix(&PolicyTable::uniform(world.num_prompts, world.num_responses), weight),
    }
}

fn setup(cfg: &StudyConfig, kind: StudyKind) -> Result<Setup> {
    cfg.validate()?;
    let scenario = cfg.world.build()?;
    let beta = cfg.beta.unwrap_or(scenario.beta);
    let template = template_for(&scenario, cfg.pipeline, beta)?;
    let world = &scenario.world;
    let oracle = oracle_auxiliary(&world.kernel);
    let corrupted = corrupt_auxiliary(&oracle);
    let fixed_aux = vec![oracle, corrupted];
    let arms = match kind {
        StudyKind::Variance | StudyKind::Subopt => {
            let aux = match cfg.aux {
                AuxProvenance::Oracle => AuxChoice::Fixed(0),
                AuxProvenance::Corrupted => AuxChoice::Fixed(1),
                AuxProvenance::Fitted => AuxChoice::Fitted,
            };
            let reference = specified_reference(world, cfg.specified_ref, cfg.ref_perturbation)?;
            vec![
                ("baseline".to_string(), ArmPlan::Baseline),
                ("vrpo".to_string(), ArmPlan::Vrpo { reference, aux }),
            ]
        }
        StudyKind::Dr => {
            let mut arms = Vec::new();
            for (rname, rc) in [("ref_true", RefChoice::True), ("ref_perturbed", RefChoice::Perturbed)] {
                for (aname, aux) in [("aux_oracle", 0), ("aux_corrupted", 1)] {
                    arms.push((
                        format!("{rname}_{aname}"),
                        ArmPlan::Vrpo {
                            reference: specified_reference(world, rc, cfg.ref_perturbation)?,
                            aux: AuxChoice::Fixed(aux),
                        },
                    ));
                }
            }
            arms
        }
    };
    Ok(Setup {
        scenario,
        template,
        beta,
        arms,
        fixed_aux,
    })
}

fn fit_arm(cfg: &StudyConfig, s: &Setup, plan: &ArmPlan, data: &Dataset, mc: &RandomStream) -> Result<FitResult> {
    match plan {
        ArmPlan::Baseline => fit_baseline(&cfg.loss, cfg.activation, &s.template, data, &cfg.optimizer),
        ArmPlan::Vrpo { reference, aux } => {
            let world = &s.scenario.world;
            let aux = match aux {
                AuxChoice::Fixed(i) => s.fixed_aux[*i].clone(),
                AuxChoice::Fitted => fit_auxiliary(data, world.num_prompts, world.num_responses, cfg.aux_smoothing)?,
            };
            let mut vc = VrpoConfig::exact(reference.clone(), aux);
            vc.third_term_mode = cfg.third_term_mode;
            vc.mc_pairs = cfg.mc_pairs;
            fit_vrpo(&cfg.loss, cfg.activation, &s.template, data, &vc, &cfg.optimizer, mc)
        }
    }
}

/// Parameters per arm, or `None` when any arm failed to converge.
fn run_replicate(cfg: &StudyConfig, s: &Setup, n_idx: usize, m: usize) -> Option<Vec<Vec<f64>>> {
    let stream = RandomStream::at(cfg.root_seed, &[n_idx as u64, m as u64]);
    let data = sample_dataset(&s.scenario.world, cfg.sample_sizes[n_idx], &stream).ok()?;
    let mc = stream.child(1);
    s.arms
        .iter()
        .map(|(_, plan)| match fit_arm(cfg, s, plan, &data, &mc) {
            Ok(fit) if fit.converged => Some(fit.theta),
            _ => None,
        })
        .collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn summarize_arm(name: &str, n: usize, thetas: &[Vec<f64>], theta_bar: Option<&[f64]>, gaps: Option<&[f64]>) -> ArmSummary {
    let mean_theta = stats::mean_vector(thetas);
    let cov = stats::covariance(thetas);
    let cov_min_eigenvalue = stats::symmetric_eigenvalues(&cov).first().copied().unwrap_or(0.0);
    let mse = theta_bar.map(|tb| stats::mean(&thetas.iter().map(|t| l2(t, tb).powi(2)).collect::<Vec<_>>()));
    ArmSummary {
        arm: name.to_string(),
        n,
        used: thetas.len(),
        trace_var: cov.trace(),
        covariance: numfmt::matrix_rows(&cov),
        cov_min_eigenvalue,
        mse,
        bias_norm: theta_bar.map(|tb| l2(&mean_theta, tb)),
        mean_theta,
        mean_gap: gaps.map(stats::mean),
        gap_se: gaps.map(stats::std_error),
    }
}

fn trace_var_of(thetas: &[Vec<f64>], idx: &[usize]) -> f64 {
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| thetas[i].clone()).collect();
    stats::trace_covariance(&rows)
}

fn run(cfg: &StudyConfig, kind: StudyKind) -> Result<StudyReport> {
    let s = setup(cfg, kind)?;
    let world = &s.scenario.world;
    let features = &s.scenario.features;
    let opt = OptimizerSettings {
        restarts: cfg.optimizer.restarts,
        ..OptimizerSettings::default()
    };
    let (theta_bar, theory, theory_error) =
        match diagnostics::theta_bar(&cfg.loss, &s.template, cfg.activation, world, &opt) {
            Ok(tb) => match diagnostics::theory_report(&cfg.loss, cfg.activation, &s.template, world, 1, &opt) {
                Ok(rep) => (Some(tb), Some(rep), None),
                Err(e) => (Some(tb), None, Some(e.to_string())),
            },
            Err(e) => (None, None, Some(e.to_string())),
        };
    // H may vanish even when A is singular, in which case nothing is reducible.
    let h_is_zero = theta_bar.as_ref().is_some_and(|tb| {
        diagnostics::matrix_h(&cfg.loss, cfg.activation, world, &s.template.with_theta(tb))
            .is_ok_and(|h| h.iter().all(|v| *v == 0.0))
    });
    let with_gaps = kind == StudyKind::Subopt;
    let (target_gap, neg_hess) = match (&theta_bar, with_gaps) {
        (Some(tb), true) => (
            Some(diagnostics::suboptimality_gap(world, features, tb, cfg.pipeline, s.beta)?),
            Some(diagnostics::neg_hessian_j(world, features, tb, cfg.pipeline, s.beta)?),
        ),
        _ => (None, None),
    };

    let mut arms = Vec::new();
    let mut comparisons = Vec::new();
    let mut failed = Vec::new();
    for (n_idx, &n) in cfg.sample_sizes.iter().enumerate() {
        let outcomes: Vec<Option<Vec<Vec<f64>>>> = (0..cfg.replicates)
            .into_par_iter()
            .map(|m| run_replicate(cfg, &s, n_idx, m))
            .collect();
        let ok: Vec<Vec<Vec<f64>>> = outcomes.into_iter().flatten().collect();
        failed.push(cfg.replicates - ok.len());
        if ok.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "only {} of {} replicates converged at n = {n}",
                ok.len(),
                cfg.replicates
            )));
        }
        let per_arm: Vec<Vec<Vec<f64>>> = (0..s.arms.len())
            .map(|a| ok.iter().map(|rep| rep[a].clone()).collect())
            .collect();
        let gaps: Option<Vec<Vec<f64>>> = if with_gaps {
            Some(
                per_arm
                    .iter()
                    .map(|thetas| {
                        thetas
                            .iter()
                            .map(|t| diagnostics::suboptimality_gap(world, features, t, cfg.pipeline, s.beta))
                            .collect::<Result<Vec<f64>>>()
                    })
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        for (a, (name, _)) in s.arms.iter().enumerate() {
            arms.push(summarize_arm(
                name,
                n,
                &per_arm[a],
                theta_bar.as_deref(),
                gaps.as_ref().map(|g| g[a].as_slice()),
            ));
        }
        if kind != StudyKind::Dr {
            comparisons.push(compare(cfg, n_idx, n, &per_arm, gaps.as_deref(), theory.as_ref(), h_is_zero, neg_hess.as_ref()));
        }
    }
    let valid = failed.iter().all(|&f| f as f64 <= 0.01 * cfg.replicates as f64);
    let slopes = if kind == StudyKind::Dr && cfg.sample_sizes.len() >= 2 && theta_bar.is_some() {
        let ns: Vec<f64> = cfg.sample_sizes.iter().map(|&n| n as f64).collect();
        s.arms
            .iter()
            .map(|(name, _)| {
                let errs: Vec<f64> = cfg
                    .sample_sizes
                    .iter()
                    .map(|&n| arms.iter().find(|a| a.arm == *name && a.n == n).and_then(|a| a.bias_norm).unwrap_or(f64::NAN))
                    .collect();
                DecaySlope {
                    arm: name.clone(),
                    slope: stats::log_log_slope(&ns, &errs),
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(StudyReport {
        study: kind,
        world: cfg.world.name().to_string(),
        pipeline: cfg.pipeline,
        root_seed: cfg.root_seed,
        replicates: cfg.replicates,
        sample_sizes: cfg.sample_sizes.clone(),
        failed_replicates: failed,
        valid,
        beta: s.beta,
        theta_bar,
        target_gap,
        theory,
        theory_error,
        neg_hessian_j: neg_hess.as_ref().map(numfmt::matrix_rows),
        arms,
        comparisons,
        slopes,
    })
}

#[allow(clippy::too_many_arguments)]
fn compare(
    cfg: &StudyConfig,
    n_idx: usize,
    n: usize,
    per_arm: &[Vec<Vec<f64>>],
    gaps: Option<&[Vec<f64>]>,
    theory: Option<&TheoryReport>,
    h_is_zero: bool,
    neg_hess: Option<&DMatrix<f64>>,
) -> Comparison {
    let (base, vr) = (&per_arm[0], &per_arm[1]);
    let m = base.len();
    let all: Vec<usize> = (0..m).collect();
    let diff = trace_var_of(base, &all) - trace_var_of(vr, &all);
    let boot = RandomStream::at(cfg.root_seed, &[n_idx as u64, u64::MAX]);
    let (ci_lo, ci_hi) = stats::bootstrap_ci(
        m,
        |idx| trace_var_of(base, idx) - trace_var_of(vr, idx),
        cfg.bootstrap_resamples,
        cfg.ci_level,
        &boot.child(0),
    );
    let nf = n as f64;
    let predicted = match theory {
        Some(t) => Some(t.trace_predicted_reduction / nf),
        None if h_is_zero => Some(0.0),
        None => None,
    };
    let sandwich = theory.map(|t| t.trace_sandwich / nf);
    let cov_b = stats::covariance(base);
    let cov_v = stats::covariance(vr);
    let delta = &cov_b - &cov_v;
    let diff_min = stats::symmetric_eigenvalues(&delta).first().copied().unwrap_or(0.0);
    let scale = cov_b.trace().max(cov_v.trace());
    let ratio = |num: f64, den: Option<f64>| den.filter(|d| *d != 0.0).map(|d| num / d);

    let mut c = Comparison {
        n,
        trace_var_diff: diff,
        ci_lo,
        ci_hi,
        predicted_trace_reduction: predicted,
        reduction_ratio: ratio(diff, predicted),
        sandwich_trace: sandwich,
        sandwich_ratio: ratio(cov_b.trace(), sandwich),
        diff_min_eigenvalue: diff_min,
        psd_relaxed: diff_min >= -0.1 * scale,
        gap_diff: None,
        gap_diff_se: None,
        gap_ci_lo: None,
        gap_ci_hi: None,
        gap_trace_formula: None,
        gap_ratio: None,
        half_gap_ratio: None,
    };
    if let Some(g) = gaps {
        let paired: Vec<f64> = g[0].iter().zip(&g[1]).map(|(a, b)| a - b).collect();
        let mean = stats::mean(&paired);
        let (lo, hi) = stats::bootstrap_ci(
            m,
            |idx| idx.iter().map(|&i| paired[i]).sum::<f64>() / idx.len() as f64,
            cfg.bootstrap_resamples,
            cfg.ci_level,
            &boot.child(1),
        );
        c.gap_diff = Some(mean);
        c.gap_diff_se = Some(stats::std_error(&paired));
        c.gap_ci_lo = Some(lo);
        c.gap_ci_hi = Some(hi);
        if let Some(q) = neg_hess {
            let formula = diagnostics::trace_product(&delta, q);
            c.gap_trace_formula = Some(formula);
            c.gap_ratio = ratio(mean, Some(formula));
            c.half_gap_ratio = ratio(mean, Some(0.5 * formula));
        }
    }
    c
}

/// Variance of the baseline and variance-reduced estimators across
/// replicates, against the predicted reduction.
pub fn run_variance_study(cfg: &StudyConfig) -> Result<StudyReport> {
    run(cfg, StudyKind::Variance)
}

/// Four variance-reduced arms: {true, perturbed reference} x {oracle,
/// corrupted auxiliary}. The configured `aux` and `specified_ref` are ignored.
pub fn run_dr_grid(cfg: &StudyConfig) -> Result<StudyReport> {
    run(cfg, StudyKind::Dr)
}

/// Suboptimality gaps of both estimators' induced policies.
pub fn run_subopt_study(cfg: &StudyConfig) -> Result<StudyReport> {
    run(cfg, StudyKind::Subopt)
}

pub fn run_study(kind: StudyKind, cfg: &StudyConfig) -> Result<StudyReport> {
    run(cfg, kind)
}

/// Runs `kind`, falling back to the study named in the config.
pub fn run_configured(kind: Option<StudyKind>, cfg: &StudyConfig) -> Result<StudyReport> {
    let kind = kind.or(cfg.study).ok_or_else(|| {
        Error::InvalidConfig("no study selected; valid options: variance, dr, subopt".into())
    })?;
    run(cfg, kind)
}

pub const CSV_HEADER: [&str; 8] = ["study", "arm", "n", "metric", "value", "stderr", "ci_lo", "ci_hi"];

/// One line of the summary table; empty cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub study: String,
    pub arm: String,
    pub n: Option<usize>,
    pub metric: String,
    pub value: f64,
    pub stderr: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
}

impl SummaryRow {
    fn new(study: StudyKind, arm: &str, n: Option<usize>, metric: &str, value: f64) -> Self {
        Self {
            study: study.to_string(),
            arm: arm.to_string(),
            n,
            metric: metric.to_string(),
            value,
            stderr: None,
            ci_lo: None,
            ci_hi: None,
        }
    }
}

/// Comparison rows use the arm label `vrpo_vs_baseline`.
pub const COMPARISON_ARM: &str = "vrpo_vs_baseline";

/// Flattens a report: per-arm metrics in arm order within each n, then
/// comparison metrics per n, then decay slopes. Absent values are skipped.
pub fn summarize(report: &StudyReport) -> Vec<SummaryRow> {
    let k = report.study;
    let mut rows = Vec::new();
    for a in &report.arms {
        rows.push(SummaryRow::new(k, &a.arm, Some(a.n), "trace_var", a.trace_var));
        let mut opt = |metric: &str, v: Option<f64>, se: Option<f64>| {
            if let Some(v) = v {
                let mut r = SummaryRow::new(k, &a.arm, Some(a.n), metric, v);
                r.stderr = se;
                rows.push(r);
            }
        };
        opt("mse", a.mse, None);
        opt("bias_norm", a.bias_norm, None);
        opt("mean_gap", a.mean_gap, a.gap_se);
    }
    for c in &report.comparisons {
        let mut r = SummaryRow::new(k, COMPARISON_ARM, Some(c.n), "trace_var_diff", c.trace_var_diff);
        r.ci_lo = Some(c.ci_lo);
        r.ci_hi = Some(c.ci_hi);
        rows.push(r);
        let mut opt = |metric: &str, v: Option<f64>| {
            if let Some(v) = v {
                rows.push(SummaryRow::new(k, COMPARISON_ARM, Some(c.n), metric, v));
            }
        };
        opt("predicted_trace_reduction", c.predicted_trace_reduction);
        opt("reduction_ratio", c.reduction_ratio);
        opt("sandwich_trace", c.sandwich_trace);
        opt("sandwich_ratio", c.sandwich_ratio);
        opt("diff_min_eigenvalue", Some(c.diff_min_eigenvalue));
        if let Some(g) = c.gap_diff {
            let mut r = SummaryRow::new(k, COMPARISON_ARM, Some(c.n), "gap_diff", g);
            r.stderr = c.gap_diff_se;
            r.ci_lo = c.gap_ci_lo;
            r.ci_hi = c.gap_ci_hi;
            rows.push(r);
        }
        let mut opt = |metric: &str, v: Option<f64>| {
            if let Some(v) = v {
                rows.push(SummaryRow::new(k, COMPARISON_ARM, Some(c.n), metric, v));
            }
        };
        opt("gap_trace_formula", c.gap_trace_formula);
        opt("gap_ratio", c.gap_ratio);
        opt("half_gap_ratio", c.half_gap_ratio);
    }
    for s in &report.slopes {
        rows.push(SummaryRow::new(k, &s.arm, None, "bias_decay_slope", s.slope));
    }
    rows
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        let n = r.n.map(|n| n.to_string()).unwrap_or_default();
        w.write_record([
            r.study.as_str(),
            r.arm.as_str(),
            &n,
            r.metric.as_str(),
            &numfmt::sig17(r.value),
            &numfmt::sig17_or_empty(r.stderr),
            &numfmt::sig17_or_empty(r.ci_lo),
            &numfmt::sig17_or_empty(r.ci_hi),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary_csv<R: Read>(input: R) -> Result<Vec<SummaryRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let bad = |what: &str| Error::Parse {
            line,
            message: format!("invalid {what}"),
        };
        let float = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(what))
            }
        };
        if rec.len() != CSV_HEADER.len() {
            return Err(bad("field count"));
        }
        rows.push(SummaryRow {
            study: rec[0].to_string(),
            arm: rec[1].to_string(),
            n: if rec[2].is_empty() { None } else { Some(rec[2].parse().map_err(|_| bad("n"))?) },
            metric: rec[3].to_string(),
            value: float(&rec[4], "value")?.ok_or_else(|| bad("value"))?,
            stderr: float(&rec[5], "stderr")?,
            ci_lo: float(&rec[6], "ci_lo")?,
            ci_hi: float(&rec[7], "ci_hi")?,
        });
    }
    Ok(rows)
}
