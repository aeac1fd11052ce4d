//! `vrpo`: generate preference data, fit estimators, run replicated studies
//! and compute population diagnostics from TOML configs.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use vrpo_core::diagnostics::{theory_report, Pipeline, TheoryReport};
use vrpo_core::estimation::{fit_baseline, fit_vrpo, FitResult, OptimizerSettings};
use vrpo_core::experiments::{run_configured, summarize, template_for, write_summary_csv, RefChoice, StudyConfig, StudyKind};
use vrpo_core::losses::{LossSpec, ThirdTermMode, VrpoConfig};
use vrpo_core::models::{corrupt_auxiliary, fit_auxiliary, oracle_auxiliary, Activation, AuxProvenance};
use vrpo_core::presets::WorldSpec;
use vrpo_core::world::{read_dataset, sample_dataset, write_dataset, PolicyTable};
use vrpo_core::RandomStream;

#[derive(Parser)]
#[command(name = "vrpo", version, about = "Variance-reduced preference optimization on synthetic worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a preference dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the baseline and/or variance-reduced estimator to a dataset.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a replicated study; writes report.json and summary.csv.
    Study {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// variance, dr or subopt; defaults to the config's `study`.
        #[arg(long)]
        study: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Population diagnostics at the target parameter.
    Theory {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    world: WorldSpec,
    n: usize,
    #[serde(default)]
    root_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Estimator {
    Baseline,
    Vrpo,
}

fn both_estimators() -> Vec<Estimator> {
    vec![Estimator::Baseline, Estimator::Vrpo]
}
fn default_oracle() -> AuxProvenance {
    AuxProvenance::Oracle
}
fn default_one() -> usize {
    1
}
fn default_smoothing() -> f64 {
    1.0
}
fn default_mix() -> f64 {
    0.5
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    world: WorldSpec,
    #[serde(default = "both_estimators")]
    estimators: Vec<Estimator>,
    #[serde(default)]
    pipeline: Pipeline,
    #[serde(default)]
    loss: LossSpec,
    #[serde(default)]
    activation: Activation,
    #[serde(default = "default_oracle")]
    aux: AuxProvenance,
    #[serde(default)]
    specified_ref: RefChoice,
    #[serde(default = "default_mix")]
    ref_perturbation: f64,
    #[serde(default)]
    third_term_mode: ThirdTermMode,
    #[serde(default = "default_one")]
    mc_pairs: usize,
    #[serde(default = "default_smoothing")]
    aux_smoothing: f64,
    #[serde(default)]
    beta: Option<f64>,
    #[serde(default)]
    root_seed: u64,
    #[serde(default)]
    optimizer: OptimizerSettings,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TheoryConfig {
    world: WorldSpec,
    n: usize,
    #[serde(default)]
    pipeline: Pipeline,
    #[serde(default)]
    loss: LossSpec,
    #[serde(default)]
    activation: Activation,
    #[serde(default)]
    beta: Option<f64>,
    #[serde(default)]
    root_seed: u64,
    #[serde(default)]
    optimizer: OptimizerSettings,
}

#[derive(Serialize)]
struct FitDocument<'a> {
    estimator: Estimator,
    root_seed: u64,
    data_seed: &'a RandomStream,
    #[serde(flatten)]
    fit: &'a FitResult,
}

#[derive(Serialize)]
struct TheoryDocument<'a> {
    world: &'static str,
    root_seed: u64,
    #[serde(flatten)]
    report: &'a TheoryReport,
}

fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg: GenDataConfig = load(config)?;
    let root_seed = seed.unwrap_or(cfg.root_seed);
    let scenario = cfg.world.build()?;
    let data = sample_dataset(&scenario.world, cfg.n, &RandomStream::new(root_seed))?;
    let mut w = create(out)?;
    write_dataset(&data, &mut w)?;
    w.flush()?;
    Ok(())
}

fn fit(config: &Path, data_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg: FitConfig = load(config)?;
    if cfg.estimators.is_empty() {
        bail!("config {}: `estimators` is empty", config.display());
    }
    let root_seed = seed.unwrap_or(cfg.root_seed);
    let file = File::open(data_path).with_context(|| format!("opening data file {}", data_path.display()))?;
    let data = read_dataset(BufReader::new(file)).with_context(|| format!("reading data file {}", data_path.display()))?;
    let scenario = cfg.world.build()?;
    let world = &scenario.world;
    if (data.num_prompts, data.num_responses) != (world.num_prompts, world.num_responses) {
        bail!(
            "data file {} has K={}, V={} but the configured world has K={}, V={}",
            data_path.display(),
            data.num_prompts,
            data.num_responses,
            world.num_prompts,
            world.num_responses
        );
    }
    cfg.loss.validate()?;
    let template = template_for(&scenario, cfg.pipeline, cfg.beta.unwrap_or(scenario.beta))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for est in &cfg.estimators {
        let result = match est {
            Estimator::Baseline => fit_baseline(&cfg.loss, cfg.activation, &template, &data, &cfg.optimizer)?,
            Estimator::Vrpo => {
                let reference = match cfg.specified_ref {
                    RefChoice::True => world.ref_policy.clone(),
                    RefChoice::Perturbed => world
                        .ref_policy
                        .mix(&PolicyTable::uniform(world.num_prompts, world.num_responses), cfg.ref_perturbation)?,
                };
                let aux = match cfg.aux {
                    AuxProvenance::Oracle => oracle_auxiliary(&world.kernel),
                    AuxProvenance::Corrupted => corrupt_auxiliary(&oracle_auxiliary(&world.kernel)),
                    AuxProvenance::Fitted => fit_auxiliary(&data, world.num_prompts, world.num_responses, cfg.aux_smoothing)?,
                };
                let mut vc = VrpoConfig::exact(reference, aux);
                vc.third_term_mode = cfg.third_term_mode;
                vc.mc_pairs = cfg.mc_pairs;
                let stream = RandomStream::at(root_seed, &[1]);
                fit_vrpo(&cfg.loss, cfg.activation, &template, &data, &vc, &cfg.optimizer, &stream)?
            }
        };
        let name = match est {
            Estimator::Baseline => "fit_baseline.json",
            Estimator::Vrpo => "fit_vrpo.json",
        };
        write_json(
            &out.join(name),
            &FitDocument {
                estimator: *est,
                root_seed,
                data_seed: &data.seed_info,
                fit: &result,
            },
        )?;
        if !result.converged {
            bail!("{est:?} fit did not converge (gradient norm {:e})", result.grad_norm);
        }
    }
    Ok(())
}

fn study(config: &Path, out: &Path, name: Option<&str>, seed: Option<u64>) -> Result<()> {
    let mut cfg: StudyConfig = load(config)?;
    if let Some(s) = seed {
        cfg.root_seed = s;
    }
    let kind = name.map(str::parse::<StudyKind>).transpose()?;
    let report = run_configured(kind, &cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("report.json"), &report)?;
    let mut w = create(&out.join("summary.csv"))?;
    write_summary_csv(&summarize(&report), &mut w)?;
    w.flush()?;
    if !report.valid {
        bail!("study invalid: failed replicates per sample size {:?}", report.failed_replicates);
    }
    Ok(())
}

fn theory(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg: TheoryConfig = load(config)?;
    let root_seed = seed.unwrap_or(cfg.root_seed);
    let scenario = cfg.world.build()?;
    let template = template_for(&scenario, cfg.pipeline, cfg.beta.unwrap_or(scenario.beta))?;
    let report = theory_report(&cfg.loss, cfg.activation, &template, &scenario.world, cfg.n, &cfg.optimizer)
        .context("computing population diagnostics")?;
    write_json(
        out,
        &TheoryDocument {
            world: cfg.world.name(),
            root_seed,
            report: &report,
        },
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { config, out, seed } => gen_data(config, out, *seed),
        Command::Fit { config, data, out, seed } => fit(config, data, out, *seed),
        Command::Study { config, out, study: s, seed } => study(config, out, s.as_deref(), *seed),
        Command::Theory { config, out, seed } => theory(config, out, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
