//! Command-line front end: subcommand parsing, config/flag resolution,
//! dispatch into the pipelines and studies, and CSV/JSON artifact output.
//!
//! Every run writes a `run-manifest.json` holding the fully resolved
//! parameters; rerunning from the manifest's seed and parameters
//! reproduces all outputs byte-identically regardless of `--threads`.

use crate::aldex;
use crate::config::{Pipeline, StudyConfig};
use crate::decisions::SignificanceMode;
use crate::error::{Error, Result};
use crate::io::{self, CountTable};
use crate::numkit::Stream;
use crate::scale_models::ScaleModel;
use crate::studies::{self, EstimatorKind, EstimatorSpec, SweepParam};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "scalesim", version, about = "Scale simulation estimators for compositional surveys")]
pub struct Cli {
    /// Cap the worker thread count (results do not depend on it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulated count table from a named scenario.
    Simulate(SimulateArgs),
    /// Run a differential-abundance pipeline on a count table.
    Fit(FitArgs),
    /// Sweep a scale-model dispersion parameter over a grid.
    Sensitivity(SensitivityArgs),
    /// FDR versus sample size for a set of estimators.
    FdrCurve(FdrCurveArgs),
    /// Vessel bootstrap of a paired-design study.
    Bootstrap(BootstrapArgs),
    /// Density summary of the effective scale implied by external estimates.
    EffectiveScale(EffectiveScaleArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleFlag {
    Clr,
    MedianOfRatios,
    Relaxed,
    Informed,
    DesignBased,
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeFlag {
    Test,
    Interval,
}

impl From<ModeFlag> for SignificanceMode {
    fn from(m: ModeFlag) -> Self {
        match m {
            ModeFlag::Test => SignificanceMode::TestBased,
            ModeFlag::Interval => SignificanceMode::CredibleInterval,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario name (only `antibiotic` is defined).
    #[arg(long, default_value = "antibiotic")]
    pub scenario: String,
    /// Target discrepancy between the geometric-mean surrogate and the
    /// true log scale change.
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    /// Samples per condition.
    #[arg(long, default_value_t = studies::DEFAULT_N)]
    pub n: usize,
    #[arg(long, default_value_t = studies::DEFAULT_DEPTH)]
    pub depth: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub counts: PathBuf,
    #[arg(long)]
    pub metadata: PathBuf,
    /// JSON config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub pipeline: Option<PipelineFlag>,
    /// Scale model built from flags (full variants via --config).
    #[arg(long, value_enum)]
    pub scale: Option<ScaleFlag>,
    /// Relaxed-model between-condition dispersion.
    #[arg(long, default_value_t = 0.2)]
    pub gamma: f64,
    /// Per-sample scale dispersion (relaxed/informed/log-normal models).
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    /// Designed between-timepoint log scale ratio (design-based model).
    #[arg(long)]
    pub dbar: Option<f64>,
    /// Design-based model dispersion.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Measurement SD when building a flow model from metadata.
    #[arg(long, default_value_t = 0.1)]
    pub flow_sigma: f64,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha_level: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeFlag>,
    /// Tested regression coefficient (mln pipeline).
    #[arg(long)]
    pub coeff: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PipelineFlag {
    Aldex,
    Mln,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub counts: PathBuf,
    #[arg(long)]
    pub metadata: PathBuf,
    /// Which dispersion parameter to sweep.
    #[arg(long, value_enum)]
    pub param: ParamFlag,
    /// Grid as `start:end:step` or a comma-separated list.
    #[arg(long)]
    pub grid: String,
    #[arg(long, default_value_t = 0.2)]
    pub base_gamma: f64,
    #[arg(long, default_value_t = 0.6)]
    pub base_alpha: f64,
    #[arg(long, default_value_t = aldex::DEFAULT_DRAWS)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha_level: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ParamFlag {
    Gamma,
    Alpha,
}

impl From<ParamFlag> for SweepParam {
    fn from(p: ParamFlag) -> Self {
        match p {
            ParamFlag::Gamma => SweepParam::Gamma,
            ParamFlag::Alpha => SweepParam::Alpha,
        }
    }
}

#[derive(Debug, Args)]
pub struct FdrCurveArgs {
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    /// Comma-separated per-condition sample sizes.
    #[arg(long, default_value = "50,200,800,1600")]
    pub n_grid: String,
    #[arg(long, default_value_t = 10)]
    pub replicates: usize,
    /// Comma-separated estimator names:
    /// clr, median_of_ratios, relaxed, informed.
    #[arg(long, default_value = "clr,relaxed")]
    pub estimators: String,
    #[arg(long, default_value_t = 0.2)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    /// Dispersion of the informed estimator.
    #[arg(long, default_value_t = 0.5)]
    pub informed_alpha: f64,
    #[arg(long, default_value_t = aldex::DEFAULT_DRAWS)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    /// Generate the synthetic paired vessel study instead of reading files.
    #[arg(long, default_value_t = false)]
    pub synthetic: bool,
    #[arg(long, required_unless_present = "synthetic")]
    pub counts: Option<PathBuf>,
    #[arg(long, required_unless_present = "synthetic")]
    pub metadata: Option<PathBuf>,
    /// Truth CSV (`taxon,changed`); required with --counts.
    #[arg(long, required_unless_present = "synthetic")]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value = "2,4,6")]
    pub vessels_grid: String,
    #[arg(long, default_value_t = 10)]
    pub replicates: usize,
    /// Comma-separated estimator names: clr, median_of_ratios, relaxed,
    /// informed, design_based.
    #[arg(long, default_value = "clr,design_based")]
    pub estimators: String,
    #[arg(long, default_value_t = (100.0f64 / 400.0).ln())]
    pub dbar: f64,
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.2)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    pub informed_alpha: f64,
    #[arg(long, default_value_t = aldex::DEFAULT_DRAWS)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EffectiveScaleArgs {
    /// CSV with header `taxon,theta_hat,se`.
    #[arg(long)]
    pub estimates: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parse arguments, run, and map errors to the documented exit codes
/// (2 for schema/config problems, 3 for numerical failures).
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        // Ignore the error if a global pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("scalesim: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(a) => run_simulate(a),
        Command::Fit(a) => run_fit(a),
        Command::Sensitivity(a) => run_sensitivity(a),
        Command::FdrCurve(a) => run_fdr_curve(a),
        Command::Bootstrap(a) => run_bootstrap(a),
        Command::EffectiveScale(a) => run_effective_scale(a),
    }
}

fn env_seed(flag: Option<u64>, default: u64) -> Result<u64> {
    let mut cfg = StudyConfig {
        seed: flag.unwrap_or(default),
        ..StudyConfig::default()
    };
    cfg.apply_env_seed()?;
    Ok(cfg.seed)
}

fn write_manifest(
    out: &Path,
    command: &str,
    seed: u64,
    parameters: serde_json::Value,
) -> Result<()> {
    let manifest = json!({
        "tool": "scalesim",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "parameters": parameters,
    });
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out.join("run-manifest.json"), text + "\n")?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<T>()
                .map_err(|_| Error::config(format!("invalid {what} entry '{tok}'")))
        })
        .collect()
}

fn parse_grid(raw: &str) -> Result<Vec<f64>> {
    if raw.contains(':') {
        let parts: Vec<&str> = raw.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::config(format!(
                "grid '{raw}' must be start:end:step or a comma list"
            )));
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("invalid grid number '{p}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let (start, end, step) = (nums[0], nums[1], nums[2]);
        if !(step > 0.0) || end < start {
            return Err(Error::config(format!(
                "grid '{raw}' needs a positive step and end >= start"
            )));
        }
        let count = ((end - start) / step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|k| start + step * k as f64).collect())
    } else {
        parse_list(raw, "grid")
    }
}

fn parse_estimators(
    raw: &str,
    gamma: f64,
    alpha: f64,
    informed_alpha: f64,
    dbar: f64,
    tau: f64,
) -> Result<Vec<EstimatorSpec>> {
    raw.split(',')
        .map(|tok| {
            let name = tok.trim().to_string();
            let (kind, mode) = match name.as_str() {
                "clr" => (EstimatorKind::ClrRestriction, SignificanceMode::TestBased),
                "median_of_ratios" => (
                    EstimatorKind::MedianOfRatios,
                    SignificanceMode::TestBased,
                ),
                "relaxed" => (
                    EstimatorKind::Relaxed { gamma, alpha },
                    SignificanceMode::CredibleInterval,
                ),
                "informed" => (
                    EstimatorKind::Informed {
                        alpha: informed_alpha,
                    },
                    SignificanceMode::CredibleInterval,
                ),
                "design_based" => (
                    EstimatorKind::DesignBased { dbar, tau },
                    SignificanceMode::CredibleInterval,
                ),
                _ => {
                    return Err(Error::config(format!(
                        "unknown estimator '{name}' (expected clr, median_of_ratios, \
                         relaxed, informed, or design_based)"
                    )))
                }
            };
            Ok(EstimatorSpec { name, kind, mode })
        })
        .collect()
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    if a.scenario != "antibiotic" {
        return Err(Error::config(format!(
            "unknown scenario '{}' (only 'antibiotic' is defined)",
            a.scenario
        )));
    }
    ensure_out(&a.out)?;
    let seed = env_seed(Some(a.seed), 0)?;
    let mut scenario = studies::build_scenario(a.delta, seed)?.with_n(a.n);
    scenario.depth = a.depth;
    let stream = Stream::root(seed);
    let counts = studies::simulate_counts(&scenario, &mut stream.child(0).rng())?;
    io::write_counts(&counts, &a.out.join("counts.csv"), &a.out.join("metadata.csv"))?;
    write_truth(
        &a.out.join("truth.csv"),
        counts.taxa(),
        &scenario.truth,
        &scenario.true_log_fold_changes(),
    )?;
    write_manifest(
        &a.out,
        "simulate",
        seed,
        json!({
            "scenario": a.scenario,
            "delta": a.delta,
            "n": a.n,
            "depth": a.depth,
        }),
    )
}

fn write_truth(path: &Path, taxa: &[String], truth: &[bool], lfc: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["taxon", "changed", "true_lfc"])?;
    for i in 0..taxa.len() {
        w.write_record([
            taxa[i].as_str(),
            if truth[i] { "true" } else { "false" },
            &io::fmt10(lfc[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn read_truth(path: &Path, taxa: &[String]) -> Result<Vec<bool>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut map = std::collections::HashMap::new();
    for rec in reader.records() {
        let rec = rec?;
        let taxon = rec
            .get(0)
            .ok_or_else(|| Error::invalid_data("truth file: missing taxon column"))?
            .to_string();
        let flag = match rec.get(1).map(str::trim) {
            Some("true") | Some("1") => true,
            Some("false") | Some("0") => false,
            other => {
                return Err(Error::invalid_data(format!(
                    "truth file: invalid changed flag {other:?} for taxon '{taxon}'"
                )))
            }
        };
        map.insert(taxon, flag);
    }
    taxa.iter()
        .map(|t| {
            map.get(t).copied().ok_or_else(|| {
                Error::invalid_data(format!("truth file: no row for taxon '{t}'"))
            })
        })
        .collect()
}

/// Build the scale model a `fit` run uses, from config and flags.
fn resolve_scale_model(
    a: &FitArgs,
    cfg: &StudyConfig,
    counts: &CountTable,
) -> Result<ScaleModel> {
    if let Some(flag) = a.scale {
        let model = match flag {
            ScaleFlag::Clr => ScaleModel::ClrRestriction,
            ScaleFlag::MedianOfRatios => ScaleModel::MedianOfRatiosRestriction,
            ScaleFlag::Relaxed => ScaleModel::Relaxed {
                gamma: a.gamma,
                alpha: a.alpha,
                design: counts.condition_labels(),
            },
            ScaleFlag::Informed => ScaleModel::Informed {
                z: metadata_log_scale(counts)?,
                alpha: a.alpha,
            },
            ScaleFlag::DesignBased => ScaleModel::DesignBased {
                dbar: a.dbar.ok_or_else(|| {
                    Error::config("--scale design-based requires --dbar")
                })?,
                tau: a.tau,
                timepoint: metadata_timepoint(counts)?,
            },
            ScaleFlag::Flow => {
                let mu = metadata_log_scale(counts)?;
                let sigma = vec![a.flow_sigma; mu.len()];
                ScaleModel::FlowEmpirical { mu, sigma }
            }
        };
        return Ok(model);
    }
    cfg.scale_model
        .clone()
        .ok_or_else(|| Error::config("no scale model given (use --scale or a config file)"))
}

fn metadata_log_scale(counts: &CountTable) -> Result<Vec<f64>> {
    counts
        .meta()
        .iter()
        .map(|m| {
            m.log_scale.ok_or_else(|| {
                Error::invalid_data(format!(
                    "sample '{}' has no log_scale metadata",
                    m.sample
                ))
            })
        })
        .collect()
}

fn metadata_timepoint(counts: &CountTable) -> Result<Vec<bool>> {
    counts
        .meta()
        .iter()
        .map(|m| {
            m.timepoint.ok_or_else(|| {
                Error::invalid_data(format!(
                    "sample '{}' has no timepoint metadata",
                    m.sample
                ))
            })
        })
        .collect()
}

fn run_fit(a: FitArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => StudyConfig::load(path)?,
        None => StudyConfig::default(),
    };
    if let Some(p) = a.pipeline {
        cfg.pipeline = match p {
            PipelineFlag::Aldex => Pipeline::Aldex,
            PipelineFlag::Mln => Pipeline::Mln,
        };
    }
    if let Some(s) = a.draws {
        cfg.draws = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(l) = a.alpha_level {
        cfg.alpha_level = l;
    }
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    if let Some(c) = a.coeff {
        cfg.coeff = Some(c);
    }
    cfg.apply_env_seed()?;
    cfg.validate()?;

    let counts = io::load_counts(&a.counts, &a.metadata)?;
    let model = resolve_scale_model(&a, &cfg, &counts)?;
    ensure_out(&a.out)?;
    let stream = Stream::root(cfg.seed);
    let table = match cfg.pipeline {
        Pipeline::Aldex => {
            let gamma = vec![cfg.gamma_prior; counts.num_taxa()];
            aldex::run_aldex_scale_sim(
                &counts,
                &gamma,
                &model,
                cfg.draws,
                &counts.condition_labels(),
                cfg.alpha_level,
                cfg.mode,
                &stream,
            )?
        }
        Pipeline::Mln => {
            let prior = cfg
                .prior
                .as_ref()
                .ok_or_else(|| Error::config("the mln pipeline requires a prior"))?
                .to_prior()?;
            let coeff = cfg
                .coeff
                .ok_or_else(|| Error::config("the mln pipeline requires --coeff"))?;
            let (_, table) = crate::mln::run_mln_scale_sim(
                &counts,
                &prior,
                &model,
                coeff,
                cfg.draws,
                cfg.alpha_level,
                cfg.mode,
                &stream,
            )?;
            table
        }
    };
    io::write_decisions(&table, counts.taxa(), &a.out.join("decisions.csv"))?;
    write_draws_summary(&a.out.join("draws_summary.csv"), counts.taxa(), &table)?;
    write_manifest(
        &a.out,
        "fit",
        cfg.seed,
        json!({
            "counts": a.counts,
            "metadata": a.metadata,
            "config": cfg,
            "scale_model": model,
        }),
    )
}

fn write_draws_summary(
    path: &Path,
    taxa: &[String],
    table: &crate::decisions::DecisionTable,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["taxon", "lfc_mean", "lfc_lo", "lfc_hi", "logit_ecdf0"])?;
    for (t, d) in taxa.iter().zip(&table.taxa) {
        w.write_record([
            t.as_str(),
            &io::fmt10(d.lfc_mean),
            &io::fmt10(d.lfc_lo),
            &io::fmt10(d.lfc_hi),
            &io::fmt10(d.logit_ecdf0),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run_sensitivity(a: SensitivityArgs) -> Result<()> {
    let seed = env_seed(Some(a.seed), 0)?;
    let counts = io::load_counts(&a.counts, &a.metadata)?;
    let grid = parse_grid(&a.grid)?;
    ensure_out(&a.out)?;
    let sweep = studies::sensitivity_sweep(
        &counts,
        a.base_gamma,
        a.base_alpha,
        a.param.into(),
        &grid,
        a.draws,
        a.alpha_level,
        &Stream::root(seed),
    )?;
    let mut w = csv::Writer::from_path(a.out.join("sensitivity.csv"))?;
    w.write_record([
        "param",
        "value",
        "taxon",
        "effect_size",
        "lfc_mean",
        "lfc_lo",
        "lfc_hi",
        "significant",
        "logit_ecdf0",
    ])?;
    let param_name = match sweep.param {
        SweepParam::Gamma => "gamma",
        SweepParam::Alpha => "alpha",
    };
    for (g, table) in sweep.grid.iter().zip(&sweep.tables) {
        for (t, d) in counts.taxa().iter().zip(&table.taxa) {
            w.write_record([
                param_name,
                &io::fmt10(*g),
                t.as_str(),
                &io::fmt10(d.effect_size),
                &io::fmt10(d.lfc_mean),
                &io::fmt10(d.lfc_lo),
                &io::fmt10(d.lfc_hi),
                if d.significant { "true" } else { "false" },
                &io::fmt10(d.logit_ecdf0),
            ])?;
        }
    }
    w.flush()?;
    write_manifest(
        &a.out,
        "sensitivity",
        seed,
        json!({
            "counts": a.counts,
            "metadata": a.metadata,
            "param": param_name,
            "grid": grid,
            "base_gamma": a.base_gamma,
            "base_alpha": a.base_alpha,
            "draws": a.draws,
            "alpha_level": a.alpha_level,
        }),
    )
}

fn run_fdr_curve(a: FdrCurveArgs) -> Result<()> {
    let seed = env_seed(Some(a.seed), 0)?;
    let n_grid: Vec<usize> = parse_list(&a.n_grid, "n grid")?;
    let estimators = parse_estimators(
        &a.estimators,
        a.gamma,
        a.alpha,
        a.informed_alpha,
        0.0,
        1.0,
    )?;
    if estimators
        .iter()
        .any(|e| matches!(e.kind, EstimatorKind::DesignBased { .. }))
    {
        return Err(Error::config(
            "the design_based estimator needs a paired design; use `bootstrap`",
        ));
    }
    ensure_out(&a.out)?;
    let scenario = studies::build_scenario(a.delta, seed)?;
    let rows = studies::fdr_vs_n(
        &scenario,
        &estimators,
        &n_grid,
        a.replicates,
        a.draws,
        &Stream::root(seed),
    )?;
    let mut w = csv::Writer::from_path(a.out.join("fdr_curve.csv"))?;
    w.write_record(["estimator", "n", "replicate", "fdr", "sensitivity"])?;
    for r in &rows {
        w.write_record([
            r.estimator.as_str(),
            &r.n.to_string(),
            &r.replicate.to_string(),
            &io::fmt10(r.fdr),
            &io::fmt10(r.sensitivity),
        ])?;
    }
    w.flush()?;
    write_manifest(
        &a.out,
        "fdr-curve",
        seed,
        json!({
            "delta": a.delta,
            "n_grid": n_grid,
            "replicates": a.replicates,
            "estimators": a.estimators,
            "gamma": a.gamma,
            "alpha": a.alpha,
            "informed_alpha": a.informed_alpha,
            "draws": a.draws,
        }),
    )
}

fn run_bootstrap(a: BootstrapArgs) -> Result<()> {
    let seed = env_seed(Some(a.seed), 0)?;
    ensure_out(&a.out)?;
    let stream = Stream::root(seed);
    let (counts, truth) = if a.synthetic {
        let study = studies::build_vessel_study(&stream.child(10))?;
        io::write_counts(
            &study.counts,
            &a.out.join("counts.csv"),
            &a.out.join("metadata.csv"),
        )?;
        write_truth(
            &a.out.join("truth.csv"),
            study.counts.taxa(),
            &study.truth,
            &study.true_effects,
        )?;
        (study.counts, study.truth)
    } else {
        let counts = io::load_counts(
            a.counts.as_ref().unwrap(),
            a.metadata.as_ref().unwrap(),
        )?;
        let truth = read_truth(a.truth.as_ref().unwrap(), counts.taxa())?;
        (counts, truth)
    };
    let vessels_grid: Vec<usize> = parse_list(&a.vessels_grid, "vessels grid")?;
    let estimators = parse_estimators(
        &a.estimators,
        a.gamma,
        a.alpha,
        a.informed_alpha,
        a.dbar,
        a.tau,
    )?;
    let rows = studies::vessel_bootstrap(
        &counts,
        &truth,
        &vessels_grid,
        a.replicates,
        &estimators,
        a.draws,
        &stream.child(11),
    )?;
    let mut w = csv::Writer::from_path(a.out.join("bootstrap.csv"))?;
    w.write_record(["estimator", "n_vessels", "replicate", "fdr", "sensitivity"])?;
    for r in &rows {
        w.write_record([
            r.estimator.as_str(),
            &r.n_vessels.to_string(),
            &r.replicate.to_string(),
            &io::fmt10(r.fdr),
            &io::fmt10(r.sensitivity),
        ])?;
    }
    w.flush()?;
    write_manifest(
        &a.out,
        "bootstrap",
        seed,
        json!({
            "synthetic": a.synthetic,
            "vessels_grid": vessels_grid,
            "replicates": a.replicates,
            "estimators": a.estimators,
            "dbar": a.dbar,
            "tau": a.tau,
            "draws": a.draws,
        }),
    )
}

fn run_effective_scale(a: EffectiveScaleArgs) -> Result<()> {
    let seed = env_seed(Some(a.seed), 0)?;
    let mut reader = csv::Reader::from_path(&a.estimates)?;
    let mut theta = Vec::new();
    let mut se = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let parse = |idx: usize, what: &str| -> Result<f64> {
            rec.get(idx)
                .ok_or_else(|| {
                    Error::invalid_data(format!("estimates line {line}: missing {what}"))
                })?
                .trim()
                .parse::<f64>()
                .map_err(|_| {
                    Error::invalid_data(format!("estimates line {line}: invalid {what}"))
                })
        };
        theta.push(parse(1, "theta_hat")?);
        se.push(parse(2, "se")?);
    }
    ensure_out(&a.out)?;
    let report =
        studies::effective_scale_report(&theta, &se, a.draws, &Stream::root(seed))?;
    let mut w = csv::Writer::from_path(a.out.join("effective_scale.csv"))?;
    w.write_record(["draw", "value"])?;
    for (k, v) in report.draws.iter().enumerate() {
        w.write_record([k.to_string().as_str(), &io::fmt10(*v)])?;
    }
    w.flush()?;
    let summary = json!({
        "mean": report.mean,
        "lo": report.lo,
        "hi": report.hi,
    });
    std::fs::write(
        a.out.join("effective_summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    write_manifest(
        &a.out,
        "effective-scale",
        seed,
        json!({
            "estimates": a.estimates,
            "draws": a.draws,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0:1:0.25").unwrap();
        assert_eq!(g.len(), 5);
        assert!((g[4] - 1.0).abs() < 1e-12);
        let g = parse_grid("0.1, 0.2,0.4").unwrap();
        assert_eq!(g, vec![0.1, 0.2, 0.4]);
        assert!(parse_grid("1:0:0.1").is_err());
        assert!(parse_grid("0:1:-0.1").is_err());
        assert!(parse_grid("a,b").is_err());
    }

    #[test]
    fn estimator_parsing() {
        let specs = parse_estimators("clr,relaxed", 0.2, 0.6, 0.5, 0.0, 1.0).unwrap();
        assert_eq!(specs.len(), 2);
        assert_eq!(specs[0].name, "clr");
        assert!(matches!(
            specs[1].kind,
            EstimatorKind::Relaxed { gamma, alpha } if gamma == 0.2 && alpha == 0.6
        ));
        assert!(parse_estimators("nonsense", 0.2, 0.6, 0.5, 0.0, 1.0).is_err());
    }

    #[test]
    fn cli_parses_subcommands() {
        let cli = Cli::try_parse_from([
            "scalesim",
            "simulate",
            "--delta",
            "0.1",
            "--n",
            "10",
            "--out",
            "/tmp/x",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Simulate(_)));
        let cli = Cli::try_parse_from([
            "scalesim",
            "--threads",
            "4",
            "fit",
            "--counts",
            "c.csv",
            "--metadata",
            "m.csv",
            "--scale",
            "relaxed",
            "--alpha",
            "0.6",
            "--gamma",
            "0.2",
            "--out",
            "/tmp/y",
        ])
        .unwrap();
        assert_eq!(cli.threads, Some(4));
        assert!(matches!(cli.command, Command::Fit(_)));
        // bootstrap requires either --synthetic or the three input files.
        assert!(Cli::try_parse_from(["scalesim", "bootstrap", "--out", "/tmp/z"]).is_err());
    }
}
