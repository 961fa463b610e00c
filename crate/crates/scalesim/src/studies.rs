//! Reproducible experiment harness: the 21-taxon antibiotic simulation,
//! FDR-versus-sample-size curves, scale sensitivity sweeps, the paired
//! vessel study with its bootstrap, and the effective-scale report.

use crate::aldex::{self, DEFAULT_GAMMA};
use crate::coda;
use crate::decisions::{self, DecisionTable, SignificanceMode};
use crate::error::{Error, Result};
use crate::io::{CountTable, SampleMeta};
use crate::mln::MlnPrior;
use crate::numkit::{self, Stream};
use crate::scale_models::{self, ScaleModel};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// The simulated antibiotic scenario: 21 taxa whose Poisson rates change
/// between conditions so that exactly 4 taxa truly decrease and the
/// geometric-mean surrogate misses the true scale change by a chosen
/// discrepancy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AntibioticScenario {
    /// 21 x 2 Poisson rates; column 0 = control, column 1 = treated.
    pub lambda: DMatrix<f64>,
    pub truth: Vec<bool>,
    pub depth: u64,
    /// Samples per condition.
    pub n: usize,
    pub seed: u64,
    pub target_delta: f64,
}

pub const SCENARIO_TAXA: usize = 21;
pub const SCENARIO_AFFECTED: [usize; 4] = [0, 5, 10, 15];
pub const DEFAULT_DEPTH: u64 = 5000;
pub const DEFAULT_N: usize = 50;

/// The plug-in discrepancy of a scenario: the geometric-mean surrogate's
/// log scale ratio minus the true one, computed from the rate columns.
pub fn plug_in_delta(lambda: &DMatrix<f64>) -> Result<f64> {
    let pre: Vec<f64> = lambda.column(0).iter().cloned().collect();
    let post: Vec<f64> = lambda.column(1).iter().cloned().collect();
    let comp_pre = coda::closure(&pre)?;
    let comp_post = coda::closure(&post)?;
    coda::delta_discrepancy(
        post.iter().sum::<f64>().ln(),
        pre.iter().sum::<f64>().ln(),
        &comp_post,
        &comp_pre,
    )
}

/// Construct the scenario so the plug-in discrepancy hits `target_delta`.
///
/// Baselines are spread over two orders of magnitude; the 4 affected taxa
/// decrease with a fixed relative profile whose common strength is solved
/// in closed form (the scale terms of the discrepancy cancel, leaving
/// `delta = mean of the per-taxon log decreases`).
pub fn build_scenario(target_delta: f64, seed: u64) -> Result<AntibioticScenario> {
    if !(target_delta >= 0.0) {
        return Err(Error::domain(format!(
            "build_scenario: target delta must be >= 0, got {target_delta}"
        )));
    }
    let baselines: Vec<f64> = (0..SCENARIO_TAXA)
        .map(|i| 20.0 * 10f64.powf(2.0 * i as f64 / (SCENARIO_TAXA - 1) as f64))
        .collect();
    let mut lambda = DMatrix::zeros(SCENARIO_TAXA, 2);
    for i in 0..SCENARIO_TAXA {
        lambda[(i, 0)] = baselines[i];
        lambda[(i, 1)] = baselines[i];
    }
    let mut truth = vec![false; SCENARIO_TAXA];
    if target_delta > 0.0 {
        let profile = [0.9, 0.7, 0.55, 0.25];
        let strength = target_delta * SCENARIO_TAXA as f64 / profile.iter().sum::<f64>();
        for (k, &i) in SCENARIO_AFFECTED.iter().enumerate() {
            lambda[(i, 1)] = baselines[i] * (-strength * profile[k]).exp();
            truth[i] = true;
        }
    }
    let scenario = AntibioticScenario {
        lambda,
        truth,
        depth: DEFAULT_DEPTH,
        n: DEFAULT_N,
        seed,
        target_delta,
    };
    let achieved = plug_in_delta(&scenario.lambda)?;
    if (achieved - target_delta).abs() > 1e-3 {
        return Err(Error::domain(format!(
            "build_scenario: achieved discrepancy {achieved} misses target {target_delta}"
        )));
    }
    Ok(scenario)
}

impl AntibioticScenario {
    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    /// True per-taxon log fold change (treated minus control).
    pub fn true_log_fold_changes(&self) -> Vec<f64> {
        (0..SCENARIO_TAXA)
            .map(|i| (self.lambda[(i, 1)] / self.lambda[(i, 0)]).ln())
            .collect()
    }
}

/// Simulate a count table from the scenario: per sample, Poisson
/// abundances at the condition's rates, then a multinomial resample to
/// the sequencing depth. The true log total is recorded in the sample
/// metadata as `log_scale`.
pub fn simulate_counts<R: Rng + ?Sized>(
    scenario: &AntibioticScenario,
    rng: &mut R,
) -> Result<CountTable> {
    let d = scenario.lambda.nrows();
    let n_total = 2 * scenario.n;
    let mut counts = DMatrix::zeros(d, n_total);
    let mut meta = Vec::with_capacity(n_total);
    let mut samples = Vec::with_capacity(n_total);
    for j in 0..n_total {
        let cond = j >= scenario.n;
        let col = if cond { 1 } else { 0 };
        let mut abundance = vec![0.0; d];
        let mut total = 0.0;
        for i in 0..d {
            let rate = scenario.lambda[(i, col)];
            let a = if rate > 0.0 {
                rand_distr::Poisson::new(rate)
                    .map_err(|e| Error::domain(format!("simulate_counts: {e}")))?
                    .sample(rng)
            } else {
                0.0
            };
            abundance[i] = a;
            total += a;
        }
        if total <= 0.0 {
            return Err(Error::domain(
                "simulate_counts: a sample drew zero total abundance",
            ));
        }
        let p: Vec<f64> = abundance.iter().map(|a| a / total).collect();
        let draw = numkit::sample_multinomial(&p, scenario.depth, rng)?;
        for i in 0..d {
            counts[(i, j)] = draw[i];
        }
        let id = format!("s{j}");
        meta.push(SampleMeta {
            sample: id.clone(),
            condition: cond,
            vessel: None,
            timepoint: None,
            log_scale: Some(total.ln()),
        });
        samples.push(id);
    }
    CountTable::with_meta(
        counts,
        (0..d).map(|i| format!("taxon{i:02}")).collect(),
        samples,
        meta,
    )
}

/// A named differential-abundance estimator: a scale model recipe plus a
/// significance mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub name: String,
    pub kind: EstimatorKind,
    pub mode: SignificanceMode,
}

/// Scale model recipes that are instantiated per dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorKind {
    ClrRestriction,
    MedianOfRatios,
    Relaxed { gamma: f64, alpha: f64 },
    /// Informed by the per-sample `log_scale` metadata column.
    Informed { alpha: f64 },
    /// Paired-design model using the `timepoint` metadata column.
    DesignBased { dbar: f64, tau: f64 },
}

impl EstimatorKind {
    pub fn build(&self, counts: &CountTable) -> Result<ScaleModel> {
        Ok(match self {
            EstimatorKind::ClrRestriction => ScaleModel::ClrRestriction,
            EstimatorKind::MedianOfRatios => ScaleModel::MedianOfRatiosRestriction,
            EstimatorKind::Relaxed { gamma, alpha } => ScaleModel::Relaxed {
                gamma: *gamma,
                alpha: *alpha,
                design: counts.condition_labels(),
            },
            EstimatorKind::Informed { alpha } => {
                let z = counts
                    .meta()
                    .iter()
                    .map(|m| {
                        m.log_scale.ok_or_else(|| {
                            Error::invalid_data(format!(
                                "informed estimator: sample '{}' has no log_scale metadata",
                                m.sample
                            ))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                ScaleModel::Informed { z, alpha: *alpha }
            }
            EstimatorKind::DesignBased { dbar, tau } => {
                let timepoint = counts
                    .meta()
                    .iter()
                    .map(|m| {
                        m.timepoint.ok_or_else(|| {
                            Error::invalid_data(format!(
                                "design-based estimator: sample '{}' has no timepoint metadata",
                                m.sample
                            ))
                        })
                    })
                    .collect::<Result<Vec<bool>>>()?;
                ScaleModel::DesignBased {
                    dbar: *dbar,
                    tau: *tau,
                    timepoint,
                }
            }
        })
    }
}

/// One point of an FDR-versus-n curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdrCurveRow {
    pub estimator: String,
    pub n: usize,
    pub replicate: usize,
    pub fdr: f64,
    pub sensitivity: f64,
}

/// FDR of each estimator across a grid of per-condition sample sizes.
///
/// Composition draws are shared across estimators within a replicate (the
/// sample-reuse property); replicates run in parallel on deterministic
/// substreams.
pub fn fdr_vs_n(
    scenario: &AntibioticScenario,
    estimators: &[EstimatorSpec],
    n_grid: &[usize],
    replicates: usize,
    s: usize,
    stream: &Stream,
) -> Result<Vec<FdrCurveRow>> {
    if n_grid.is_empty() || estimators.is_empty() || replicates == 0 {
        return Err(Error::domain(
            "fdr_vs_n: need a nonempty n grid, estimator list, and replicate count",
        ));
    }
    let mut rows = Vec::new();
    for (g, &n) in n_grid.iter().enumerate() {
        let mut batch: Vec<Vec<FdrCurveRow>> = (0..replicates)
            .into_par_iter()
            .map(|r| -> Result<Vec<FdrCurveRow>> {
                let sub = stream.descend(&[g as u64, r as u64]);
                let sc = scenario.clone().with_n(n);
                let counts = simulate_counts(&sc, &mut sub.child(0).rng())?;
                let gamma = vec![DEFAULT_GAMMA; counts.num_taxa()];
                let comp = aldex::sample_compositions(
                    &counts,
                    &gamma,
                    s,
                    &mut sub.child(1).rng(),
                )?;
                let labels = counts.condition_labels();
                let mut out = Vec::with_capacity(estimators.len());
                for (e, est) in estimators.iter().enumerate() {
                    let model = est.kind.build(&counts)?;
                    let logscale = scale_models::sample_log_scale(
                        &model,
                        Some(&comp),
                        Some(&counts),
                        s,
                        &mut sub.descend(&[2, e as u64]).rng(),
                    )?;
                    let eta = aldex::compose_eta(&comp, &logscale)?;
                    let table = decisions::decide(eta.values(), &labels, 0.05, est.mode)?;
                    let metrics = decisions::confusion(&table.calls(), &scenario.truth)?;
                    out.push(FdrCurveRow {
                        estimator: est.name.clone(),
                        n,
                        replicate: r,
                        fdr: metrics.fdr,
                        sensitivity: metrics.sensitivity,
                    });
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        for b in batch.drain(..) {
            rows.extend(b);
        }
    }
    Ok(rows)
}

/// Which dispersion parameter a sensitivity sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Gamma,
    Alpha,
}

/// Decisions at each point of a dispersion grid, computed on one shared
/// set of composition draws.
#[derive(Debug, Clone)]
pub struct SensitivityGrid {
    pub param: SweepParam,
    pub grid: Vec<f64>,
    pub tables: Vec<DecisionTable>,
}

/// Sweep gamma (or alpha) of the relaxed model over a strictly increasing
/// grid, reusing one set of composition draws for every grid point.
pub fn sensitivity_sweep(
    counts: &CountTable,
    base_gamma: f64,
    base_alpha: f64,
    param: SweepParam,
    grid: &[f64],
    s: usize,
    alpha_level: f64,
    stream: &Stream,
) -> Result<SensitivityGrid> {
    if grid.is_empty() {
        return Err(Error::domain("sensitivity_sweep: empty grid"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::domain(
            "sensitivity_sweep: grid must be strictly increasing",
        ));
    }
    if grid[0] < 0.0 {
        return Err(Error::domain("sensitivity_sweep: grid values must be >= 0"));
    }
    let gamma_prior = vec![DEFAULT_GAMMA; counts.num_taxa()];
    let comp = aldex::sample_compositions(counts, &gamma_prior, s, &mut stream.child(0).rng())?;
    let labels = counts.condition_labels();
    let n = counts.num_samples();
    let tables = grid
        .par_iter()
        .enumerate()
        .map(|(g, &value)| -> Result<DecisionTable> {
            let (gamma, alpha) = match param {
                SweepParam::Gamma => (value, base_alpha),
                SweepParam::Alpha => (base_gamma, value),
            };
            // The gamma -> 0 limit is the fixed-location family member.
            let model = if gamma > 0.0 {
                ScaleModel::Relaxed {
                    gamma,
                    alpha,
                    design: labels.clone(),
                }
            } else {
                ScaleModel::LogNormalFamily {
                    c: 0.0,
                    mu: vec![0.0; n],
                    alpha,
                }
            };
            let logscale = scale_models::sample_log_scale(
                &model,
                Some(&comp),
                Some(counts),
                s,
                &mut stream.descend(&[1, g as u64]).rng(),
            )?;
            let eta = aldex::compose_eta(&comp, &logscale)?;
            decisions::decide(
                eta.values(),
                &labels,
                alpha_level,
                SignificanceMode::CredibleInterval,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityGrid {
        param,
        grid: grid.to_vec(),
        tables,
    })
}

/// One point of a vessel-bootstrap FDR table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapRow {
    pub estimator: String,
    pub n_vessels: usize,
    pub replicate: usize,
    pub fdr: f64,
    pub sensitivity: f64,
}

/// Decisions from the Dirichlet-multinomial pipeline summarized through
/// per-draw group-mean log-fold-change draws. Unlike the per-sample test
/// path this stays defined for single-sample groups, which the 1-vessel
/// bootstrap edge case needs.
fn aldex_lfc_decisions(
    counts: &CountTable,
    model: &ScaleModel,
    s: usize,
    labels: &[bool],
    alpha_level: f64,
    stream: &Stream,
) -> Result<DecisionTable> {
    let gamma = vec![DEFAULT_GAMMA; counts.num_taxa()];
    let comp = aldex::sample_compositions(counts, &gamma, s, &mut stream.child(0).rng())?;
    let logscale = scale_models::sample_log_scale(
        model,
        Some(&comp),
        Some(counts),
        s,
        &mut stream.child(1).rng(),
    )?;
    let eta = aldex::compose_eta(&comp, &logscale)?;
    let d = counts.num_taxa();
    let idx0: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| !**l)
        .map(|(j, _)| j)
        .collect();
    let idx1: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l)
        .map(|(j, _)| j)
        .collect();
    if idx0.is_empty() || idx1.is_empty() {
        return Err(Error::domain(
            "aldex_lfc_decisions: labels must contain both levels",
        ));
    }
    let lfc = DMatrix::from_fn(s, d, |draw, i| {
        let row = eta.values()[draw].row(i);
        let m1: f64 = idx1.iter().map(|&j| row[j]).sum::<f64>() / idx1.len() as f64;
        let m0: f64 = idx0.iter().map(|&j| row[j]).sum::<f64>() / idx0.len() as f64;
        m1 - m0
    });
    decisions::decide_from_lfc_draws(&lfc, alpha_level, SignificanceMode::CredibleInterval)
}

/// Bootstrap the vessels of a paired-design table: per replicate, draw
/// `n_vessels` vessels with replacement, take both timepoint samples of
/// each, multinomially resample every column to its original depth, and
/// score each estimator against the ground truth.
pub fn vessel_bootstrap(
    counts: &CountTable,
    truth: &[bool],
    n_vessels_grid: &[usize],
    replicates: usize,
    estimators: &[EstimatorSpec],
    s: usize,
    stream: &Stream,
) -> Result<Vec<BootstrapRow>> {
    if truth.len() != counts.num_taxa() {
        return Err(Error::dim(format!(
            "vessel_bootstrap: {} truth flags for {} taxa",
            truth.len(),
            counts.num_taxa()
        )));
    }
    let mut vessels: Vec<String> = Vec::new();
    for m in counts.meta() {
        let v = m.vessel.clone().ok_or_else(|| {
            Error::invalid_data(format!(
                "vessel_bootstrap: sample '{}' has no vessel metadata",
                m.sample
            ))
        })?;
        m.timepoint.ok_or_else(|| {
            Error::invalid_data(format!(
                "vessel_bootstrap: sample '{}' has no timepoint metadata",
                m.sample
            ))
        })?;
        if !vessels.contains(&v) {
            vessels.push(v);
        }
    }
    if n_vessels_grid.is_empty() || replicates == 0 || estimators.is_empty() {
        return Err(Error::domain(
            "vessel_bootstrap: need nonempty grid, replicates, and estimators",
        ));
    }

    let mut rows = Vec::new();
    for (g, &nv) in n_vessels_grid.iter().enumerate() {
        if nv == 0 {
            return Err(Error::domain("vessel_bootstrap: need at least 1 vessel"));
        }
        let batch: Vec<Vec<BootstrapRow>> = (0..replicates)
            .into_par_iter()
            .map(|r| -> Result<Vec<BootstrapRow>> {
                let sub = stream.descend(&[g as u64, r as u64]);
                let mut rng = sub.child(0).rng();
                // Vessels with replacement; copies get distinct sample ids.
                let mut cols = Vec::new();
                let mut new_meta = Vec::new();
                let mut new_samples = Vec::new();
                for copy in 0..nv {
                    let pick = &vessels[rng.random_range(0..vessels.len())];
                    for (j, m) in counts.meta().iter().enumerate() {
                        if m.vessel.as_deref() == Some(pick.as_str()) {
                            cols.push(j);
                            let id = format!("{}_b{copy}", m.sample);
                            let mut m2 = m.clone();
                            m2.sample = id.clone();
                            // Condition follows the timepoint in this design.
                            m2.condition = m.timepoint.unwrap();
                            new_meta.push(m2);
                            new_samples.push(id);
                        }
                    }
                }
                // Multinomial resample each selected column to its depth.
                let d = counts.num_taxa();
                let mut new_counts = DMatrix::zeros(d, cols.len());
                for (k, &j) in cols.iter().enumerate() {
                    let depth: u64 = (0..d).map(|i| counts.counts()[(i, j)]).sum();
                    let p: Vec<f64> = (0..d)
                        .map(|i| counts.counts()[(i, j)] as f64 / depth as f64)
                        .collect();
                    let draw = numkit::sample_multinomial(&p, depth, &mut rng)?;
                    for i in 0..d {
                        new_counts[(i, k)] = draw[i];
                    }
                }
                let table =
                    CountTable::with_meta(new_counts, counts.taxa().to_vec(), new_samples, new_meta)?;
                let labels = table.condition_labels();
                let mut out = Vec::with_capacity(estimators.len());
                for (e, est) in estimators.iter().enumerate() {
                    let model = est.kind.build(&table)?;
                    let decisions_table = aldex_lfc_decisions(
                        &table,
                        &model,
                        s,
                        &labels,
                        0.05,
                        &sub.descend(&[1, e as u64]),
                    )?;
                    let metrics = decisions::confusion(&decisions_table.calls(), truth)?;
                    out.push(BootstrapRow {
                        estimator: est.name.clone(),
                        n_vessels: nv,
                        replicate: r,
                        fdr: metrics.fdr,
                        sensitivity: metrics.sensitivity,
                    });
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        for b in batch {
            rows.extend(b);
        }
    }
    Ok(rows)
}

/// Density summary of the scale-aligned component of external estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectiveScaleReport {
    pub draws: Vec<f64>,
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Sample the effective scale model implied by external per-taxon
/// estimates and summarize the scale-aligned component's distribution
/// (central 95% interval).
pub fn effective_scale_report(
    theta_hat: &[f64],
    se: &[f64],
    s: usize,
    stream: &Stream,
) -> Result<EffectiveScaleReport> {
    let model = ScaleModel::EffectiveFromEstimates {
        theta_hat: theta_hat.to_vec(),
        se: se.to_vec(),
    };
    let draws =
        scale_models::sample_log_scale(&model, None, None, s, &mut stream.child(0).rng())?;
    let mut values: Vec<f64> = (0..s).map(|d| draws.values()[(d, 0)]).collect();
    values.sort_by(|a, b| a.total_cmp(b));
    let mean = values.iter().sum::<f64>() / s as f64;
    let q = |frac: f64| -> f64 {
        let pos = frac * (s - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let w = pos - lo as f64;
        values[lo] * (1.0 - w) + values[hi] * w
    };
    let (lo, hi) = (q(0.025), q(0.975));
    Ok(EffectiveScaleReport {
        draws: values,
        mean,
        lo,
        hi,
    })
}

/// A synthetic paired vessel study: 6 vessels measured at two timepoints,
/// 10 taxa of which 4 truly decrease, with a large true scale change and
/// replicate flow-style measurements of the total.
#[derive(Debug, Clone)]
pub struct VesselStudy {
    pub counts: CountTable,
    pub truth: Vec<bool>,
    /// Per-sample replicate-mean log totals (flow-style measurements).
    pub flow_mu: Vec<f64>,
    /// Per-sample replicate SDs of the log totals.
    pub flow_sigma: Vec<f64>,
    pub true_log_scale: Vec<f64>,
    /// True per-taxon log fold change between timepoints.
    pub true_effects: Vec<f64>,
}

pub const VESSEL_COUNT: usize = 6;
pub const VESSEL_TAXA: usize = 10;
/// Target expected log scale ratio between timepoints.
pub const VESSEL_LOG_SCALE_RATIO: f64 = -1.22;

/// Covariate matrix (6 vessel intercepts + timepoint) and the recommended
/// prior for the vessel study's regression.
pub fn vessel_prior() -> Result<MlnPrior> {
    let n = 2 * VESSEL_COUNT;
    let q = VESSEL_COUNT + 1;
    let x = DMatrix::from_fn(q, n, |row, j| {
        let vessel = j / 2;
        let timepoint = j % 2;
        if row < VESSEL_COUNT {
            if row == vessel {
                1.0
            } else {
                0.0
            }
        } else {
            timepoint as f64
        }
    });
    let mut gamma = DMatrix::identity(q, q);
    for i in 0..VESSEL_COUNT {
        gamma[(i, i)] = 10.0;
    }
    MlnPrior::new(
        DMatrix::zeros(VESSEL_TAXA, q),
        gamma,
        VESSEL_TAXA as f64 + 3.0,
        DMatrix::identity(VESSEL_TAXA, VESSEL_TAXA),
        x,
    )
}

/// Generate one realization of the vessel study.
pub fn build_vessel_study(stream: &Stream) -> Result<VesselStudy> {
    let base = [120.0, 100.0, 80.0, 40.0, 15.0, 15.0, 10.0, 10.0, 5.0, 5.0];
    let profile = [-2.2, -1.9, -1.6, -1.3];
    // Scale the decrease profile so the expected log total ratio hits the
    // target exactly (solved by bisection; the map is monotone).
    let total_pre: f64 = base.iter().sum();
    let ratio = |c: f64| -> f64 {
        let changed: f64 = (0..4).map(|k| base[k] * (c * profile[k]).exp()).sum();
        let unchanged: f64 = base[4..].iter().sum();
        ((changed + unchanged) / total_pre).ln()
    };
    let (mut lo, mut hi) = (0.0, 3.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) > VESSEL_LOG_SCALE_RATIO {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let c = 0.5 * (lo + hi);
    let mut effects = vec![0.0; VESSEL_TAXA];
    let mut truth = vec![false; VESSEL_TAXA];
    for k in 0..4 {
        effects[k] = c * profile[k];
        truth[k] = true;
    }

    let abundance_scale = 50.0; // lift rates so Poisson noise is modest
    let depth = DEFAULT_DEPTH;
    let mut rng = stream.child(0).rng();
    let d = VESSEL_TAXA;
    let n = 2 * VESSEL_COUNT;
    let mut counts = DMatrix::zeros(d, n);
    let mut meta = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    let mut flow_mu = Vec::with_capacity(n);
    let mut flow_sigma = Vec::with_capacity(n);
    let mut true_log_scale = Vec::with_capacity(n);

    // Vessel effects are shared across the two timepoints of a vessel.
    let mut vessel_effect = vec![[0.0; VESSEL_TAXA]; VESSEL_COUNT];
    for v in vessel_effect.iter_mut() {
        for e in v.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *e = 0.15 * z;
        }
    }

    for j in 0..n {
        let vessel = j / 2;
        let timepoint = j % 2 == 1;
        let mut abundance = vec![0.0; d];
        let mut total = 0.0;
        for i in 0..d {
            let log_rate = (base[i] * abundance_scale).ln()
                + vessel_effect[vessel][i]
                + if timepoint { effects[i] } else { 0.0 };
            let a = rand_distr::Poisson::new(log_rate.exp())
                .map_err(|e| Error::domain(format!("build_vessel_study: {e}")))?
                .sample(&mut rng);
            abundance[i] = a;
            total += a;
        }
        if total <= 0.0 {
            return Err(Error::domain("build_vessel_study: empty sample"));
        }
        let p: Vec<f64> = abundance.iter().map(|a| a / total).collect();
        let draw = numkit::sample_multinomial(&p, depth, &mut rng)?;
        for i in 0..d {
            counts[(i, j)] = draw[i];
        }
        let log_total = total.ln();
        true_log_scale.push(log_total);
        // 2-3 replicate flow-style measurements of the log total.
        let reps = 2 + (rng.random_range(0..2u8) as usize);
        let measures: Vec<f64> = (0..reps)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                log_total + 0.1 * z
            })
            .collect();
        let mu = measures.iter().sum::<f64>() / reps as f64;
        let var = measures.iter().map(|m| (m - mu).powi(2)).sum::<f64>()
            / (reps - 1) as f64;
        flow_mu.push(mu);
        flow_sigma.push(var.sqrt().max(0.05));

        let id = format!("v{vessel}_t{}", if timepoint { 1 } else { 0 });
        meta.push(SampleMeta {
            sample: id.clone(),
            condition: timepoint,
            vessel: Some(format!("v{vessel}")),
            timepoint: Some(timepoint),
            log_scale: Some(mu),
        });
        samples.push(id);
    }

    let counts = CountTable::with_meta(
        counts,
        (0..d).map(|i| format!("taxon{i:02}")).collect(),
        samples,
        meta,
    )?;
    Ok(VesselStudy {
        counts,
        truth,
        flow_mu,
        flow_sigma,
        true_log_scale,
        true_effects: effects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn scenario_hits_target_delta() {
        let sc = build_scenario(0.1, 7).unwrap();
        assert_relative_eq!(plug_in_delta(&sc.lambda).unwrap(), 0.1, epsilon = 1e-3);
        assert_eq!(sc.truth.iter().filter(|t| **t).count(), 4);
        // All decreases.
        for (i, lfc) in sc.true_log_fold_changes().iter().enumerate() {
            if sc.truth[i] {
                assert!(*lfc < 0.0);
            } else {
                assert_relative_eq!(*lfc, 0.0);
            }
        }
    }

    #[test]
    fn scenario_target_zero_is_identity() {
        let sc = build_scenario(0.0, 7).unwrap();
        assert_eq!(sc.lambda.column(0), sc.lambda.column(1));
        assert_relative_eq!(plug_in_delta(&sc.lambda).unwrap(), 0.0, epsilon = 1e-12);
        assert!(sc.truth.iter().all(|t| !t));
        assert!(build_scenario(-0.5, 7).is_err());
    }

    #[test]
    fn simulated_counts_sum_to_depth() {
        let sc = build_scenario(0.1, 7).unwrap().with_n(5);
        let counts = simulate_counts(&sc, &mut Stream::root(41).rng()).unwrap();
        assert_eq!(counts.num_samples(), 10);
        for j in 0..10 {
            let total: u64 = (0..21).map(|i| counts.counts()[(i, j)]).sum();
            assert_eq!(total, DEFAULT_DEPTH);
        }
        // Condition labels split half/half; true totals recorded.
        assert_eq!(counts.condition_labels()[..5], [false; 5]);
        assert_eq!(counts.condition_labels()[5..], [true; 5]);
        assert!(counts.meta().iter().all(|m| m.log_scale.is_some()));
    }

    #[test]
    fn simulated_proportions_match_rates() {
        let sc = build_scenario(0.1, 7).unwrap().with_n(60);
        let counts = simulate_counts(&sc, &mut Stream::root(42).rng()).unwrap();
        // Control columns: empirical proportions near closure(lambda_0).
        let total: f64 = sc.lambda.column(0).sum();
        for i in [0usize, 10, 20] {
            let expect = sc.lambda[(i, 0)] / total;
            let mean: f64 = (0..60)
                .map(|j| counts.counts()[(i, j)] as f64 / DEFAULT_DEPTH as f64)
                .sum::<f64>()
                / 60.0;
            // Binomial + Poisson variance, roughly 2 p(1-p)/depth per sample.
            let se = (2.0 * expect * (1.0 - expect) / DEFAULT_DEPTH as f64 / 60.0).sqrt();
            assert!((mean - expect).abs() < 4.0 * se, "taxon {i}: {mean} vs {expect}");
        }
    }

    #[test]
    fn zero_rate_taxon_draws_zero_counts() {
        let mut sc = build_scenario(0.1, 7).unwrap().with_n(3);
        sc.lambda[(2, 0)] = 0.0;
        sc.lambda[(2, 1)] = 0.0;
        let counts = simulate_counts(&sc, &mut Stream::root(43).rng()).unwrap();
        for j in 0..6 {
            assert_eq!(counts.counts()[(2, j)], 0);
        }
    }

    #[test]
    fn sweep_reuses_composition_draws() {
        let sc = build_scenario(0.1, 7).unwrap().with_n(10);
        let counts = simulate_counts(&sc, &mut Stream::root(44).rng()).unwrap();
        let stream = Stream::root(45);
        let grid = [0.05, 0.1, 0.2];
        let sweep = sensitivity_sweep(
            &counts,
            0.2,
            0.6,
            SweepParam::Gamma,
            &grid,
            32,
            0.05,
            &stream,
        )
        .unwrap();
        assert_eq!(sweep.tables.len(), 3);
        // A second run with the same stream is bit-identical.
        let again = sensitivity_sweep(
            &counts,
            0.2,
            0.6,
            SweepParam::Gamma,
            &grid,
            32,
            0.05,
            &stream,
        )
        .unwrap();
        for (a, b) in sweep.tables.iter().zip(&again.tables) {
            for (x, y) in a.taxa.iter().zip(&b.taxa) {
                assert_eq!(x.significant, y.significant);
                assert_eq!(x.lfc_mean, y.lfc_mean);
            }
        }
        // Empty and non-increasing grids rejected.
        assert!(sensitivity_sweep(
            &counts,
            0.2,
            0.6,
            SweepParam::Gamma,
            &[],
            8,
            0.05,
            &stream
        )
        .is_err());
        assert!(sensitivity_sweep(
            &counts,
            0.2,
            0.6,
            SweepParam::Gamma,
            &[0.2, 0.1],
            8,
            0.05,
            &stream
        )
        .is_err());
    }

    #[test]
    fn vessel_study_structure() {
        let study = build_vessel_study(&Stream::root(46)).unwrap();
        assert_eq!(study.counts.num_taxa(), VESSEL_TAXA);
        assert_eq!(study.counts.num_samples(), 2 * VESSEL_COUNT);
        assert_eq!(study.truth.iter().filter(|t| **t).count(), 4);
        // Expected log scale ratio of the generating rates is the target.
        for k in 0..4 {
            assert!(study.true_effects[k] < -1.0);
        }
        // Measured flow means straddle the true totals.
        for (mu, t) in study.flow_mu.iter().zip(&study.true_log_scale) {
            assert!((mu - t).abs() < 0.5);
        }
        let prior = vessel_prior().unwrap();
        assert_eq!(prior.dim(), VESSEL_TAXA);
        assert_eq!(prior.num_covariates(), VESSEL_COUNT + 1);
        assert_eq!(prior.num_samples(), 2 * VESSEL_COUNT);
    }

    #[test]
    fn single_vessel_bootstrap_defined() {
        let study = build_vessel_study(&Stream::root(47)).unwrap();
        let estimators = [EstimatorSpec {
            name: "design".into(),
            kind: EstimatorKind::DesignBased {
                dbar: (100.0f64 / 400.0).ln(),
                tau: 1.0,
            },
            mode: SignificanceMode::CredibleInterval,
        }];
        let rows = vessel_bootstrap(
            &study.counts,
            &study.truth,
            &[1],
            2,
            &estimators,
            32,
            &Stream::root(48),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!(r.fdr.is_finite());
        }
    }

    #[test]
    fn effective_report_point_mass() {
        let report =
            effective_scale_report(&[0.5, -0.1, 0.2], &[0.0; 3], 64, &Stream::root(49)).unwrap();
        let expect = (0.5 - 0.1 + 0.2) / 3.0;
        assert_relative_eq!(report.mean, expect, epsilon = 1e-12);
        assert_relative_eq!(report.lo, expect, epsilon = 1e-12);
        assert_relative_eq!(report.hi, expect, epsilon = 1e-12);
    }

    #[test]
    fn fdr_curve_smoke() {
        let sc = build_scenario(0.1, 7);
        let sc = sc.unwrap();
        let estimators = [
            EstimatorSpec {
                name: "clr".into(),
                kind: EstimatorKind::ClrRestriction,
                mode: SignificanceMode::CredibleInterval,
            },
            EstimatorSpec {
                name: "relaxed".into(),
                kind: EstimatorKind::Relaxed {
                    gamma: 0.2,
                    alpha: 0.6,
                },
                mode: SignificanceMode::CredibleInterval,
            },
        ];
        let rows = fdr_vs_n(&sc, &estimators, &[20], 2, 32, &Stream::root(50)).unwrap();
        assert_eq!(rows.len(), 4);
        // Determinism across reruns.
        let again = fdr_vs_n(&sc, &estimators, &[20], 2, 32, &Stream::root(50)).unwrap();
        for (a, b) in rows.iter().zip(&again) {
            assert_eq!(a.fdr, b.fdr);
            assert_eq!(a.sensitivity, b.sensitivity);
        }
    }
}
