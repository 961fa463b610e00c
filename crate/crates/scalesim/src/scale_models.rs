//! Probabilistic models of the unmeasured scale.
//!
//! Each variant of [`ScaleModel`] describes a distribution over the
//! per-sample log scale. Identifying restrictions are the degenerate
//! members: given fixed composition draws they produce zero across-draw
//! variance, which is what makes their downstream bias unacknowledged.

use crate::aldex::CompositionDraws;
use crate::coda;
use crate::error::{Error, Result};
use crate::io::CountTable;
use crate::mln::MlnPrior;
use crate::numkit;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// A model of the per-sample unmeasured scale `p(W_perp)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ScaleModel {
    /// Geometric-mean restriction: `log w_perp_j = -log g(w_par_j)`.
    ClrRestriction,
    /// Median-of-ratios size-factor restriction computed from the counts.
    MedianOfRatiosRestriction,
    /// `log w_perp_j ~ N(c + mu_j, alpha^2)` with `sum_j mu_j = 0`.
    LogNormalFamily { c: f64, mu: Vec<f64>, alpha: f64 },
    /// Log-normal family with a random condition effect: per draw,
    /// `beta ~ N(0, gamma^2)`, `mu_j = beta * x_j` centered.
    Relaxed {
        gamma: f64,
        alpha: f64,
        design: Vec<bool>,
    },
    /// `log w_perp_j ~ N(z_j, alpha^2)` around external measurements.
    Informed { z: Vec<f64>, alpha: f64 },
    /// Paired-design model: the between-timepoint log scale ratio is
    /// `N(dbar, tau^2)`, split symmetrically across the two timepoints.
    DesignBased {
        dbar: f64,
        tau: f64,
        timepoint: Vec<bool>,
    },
    /// `log w_perp_j ~ N(mu_j, sigma_j^2)` with per-sample moments taken
    /// from replicate measurements (e.g. flow cytometry).
    FlowEmpirical { mu: Vec<f64>, sigma: Vec<f64> },
    /// The scale model a partially identified Bayesian model implies:
    /// the conditional matrix-T of the log-abundance sum coordinate given
    /// the log-ratio coordinates under the multinomial log-normal prior.
    PimImplied { prior: MlnPrior },
    /// Effective scale model extracted from an external estimator's
    /// per-taxon estimates: sample `that_i ~ N(theta_hat_i, se_i^2)` and
    /// return the across-taxa mean (the scale-aligned component).
    EffectiveFromEstimates { theta_hat: Vec<f64>, se: Vec<f64> },
}

/// `S x N` matrix of log-scale draws.
///
/// For [`ScaleModel::PimImplied`] the rows hold the log-abundance *sum*
/// coordinate (the image of the all-ones contrast) rather than a per-sample
/// additive offset; the multinomial log-normal pipeline is the only
/// consumer of that convention.
#[derive(Debug, Clone)]
pub struct LogScaleDraws {
    values: DMatrix<f64>,
}

impl LogScaleDraws {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("log scale draws must be finite"));
        }
        Ok(LogScaleDraws { values })
    }

    /// `S x N` matrix: row s is the log-scale vector of draw s.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn num_draws(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_samples(&self) -> usize {
        self.values.ncols()
    }
}

impl ScaleModel {
    /// Check parameter-domain constraints.
    pub fn validate(&self) -> Result<()> {
        match self {
            ScaleModel::ClrRestriction | ScaleModel::MedianOfRatiosRestriction => Ok(()),
            ScaleModel::LogNormalFamily { mu, alpha, .. } => {
                require_nonneg(*alpha, "log-normal family alpha")?;
                let total: f64 = mu.iter().sum();
                if total.abs() > 1e-10 {
                    return Err(Error::domain(format!(
                        "log-normal family mu must sum to 0, got {total}"
                    )));
                }
                Ok(())
            }
            ScaleModel::Relaxed { gamma, alpha, .. } => {
                if !(*gamma > 0.0) {
                    return Err(Error::domain(format!(
                        "relaxed model gamma must be positive, got {gamma}"
                    )));
                }
                require_nonneg(*alpha, "relaxed model alpha")
            }
            ScaleModel::Informed { alpha, .. } => require_nonneg(*alpha, "informed model alpha"),
            ScaleModel::DesignBased { tau, .. } => {
                if !(*tau > 0.0) {
                    return Err(Error::domain(format!(
                        "design-based model tau must be positive, got {tau}"
                    )));
                }
                Ok(())
            }
            ScaleModel::FlowEmpirical { mu, sigma } => {
                if mu.len() != sigma.len() {
                    return Err(Error::dim(format!(
                        "flow model: {} means but {} sds",
                        mu.len(),
                        sigma.len()
                    )));
                }
                for s in sigma {
                    require_nonneg(*s, "flow model sigma")?;
                }
                Ok(())
            }
            ScaleModel::PimImplied { prior } => prior.validate(),
            ScaleModel::EffectiveFromEstimates { theta_hat, se } => {
                if theta_hat.len() != se.len() {
                    return Err(Error::dim(format!(
                        "effective model: {} estimates but {} ses",
                        theta_hat.len(),
                        se.len()
                    )));
                }
                if theta_hat.is_empty() {
                    return Err(Error::domain("effective model: empty estimate vector"));
                }
                for s in se {
                    require_nonneg(*s, "effective model se")?;
                }
                Ok(())
            }
        }
    }

    /// True iff the sampled log scale has zero variance given fixed inputs
    /// — i.e. the model is a singular identifying restriction.
    pub fn is_identifying_restriction(&self) -> bool {
        match self {
            ScaleModel::ClrRestriction | ScaleModel::MedianOfRatiosRestriction => true,
            ScaleModel::LogNormalFamily { alpha, .. } => *alpha == 0.0,
            ScaleModel::Relaxed { .. } => false,
            ScaleModel::Informed { alpha, .. } => *alpha == 0.0,
            ScaleModel::DesignBased { .. } => false,
            ScaleModel::FlowEmpirical { sigma, .. } => sigma.iter().all(|s| *s == 0.0),
            ScaleModel::PimImplied { .. } => false,
            ScaleModel::EffectiveFromEstimates { se, .. } => se.iter().all(|s| *s == 0.0),
        }
    }
}

fn require_nonneg(x: f64, what: &str) -> Result<()> {
    if x < 0.0 || !x.is_finite() {
        return Err(Error::domain(format!("{what} must be >= 0, got {x}")));
    }
    Ok(())
}

fn normal_draw<R: Rng + ?Sized>(mean: f64, sd: f64, rng: &mut R) -> f64 {
    if sd > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        mean + sd * z
    } else {
        mean
    }
}

fn check_samples(n_model: usize, n: usize, what: &str) -> Result<()> {
    if n_model != n {
        return Err(Error::dim(format!(
            "{what}: model describes {n_model} samples but data has {n}"
        )));
    }
    Ok(())
}

/// Draw `s` log-scale vectors from a scale model.
///
/// `comp_draws` is required by [`ScaleModel::ClrRestriction`] and
/// [`ScaleModel::PimImplied`] (and must hold exactly `s` draws); `counts`
/// is required by [`ScaleModel::MedianOfRatiosRestriction`]. Either also
/// pins the number of samples for variants that do not carry one.
pub fn sample_log_scale<R: Rng + ?Sized>(
    model: &ScaleModel,
    comp_draws: Option<&CompositionDraws>,
    counts: Option<&CountTable>,
    s: usize,
    rng: &mut R,
) -> Result<LogScaleDraws> {
    model.validate()?;
    if s == 0 {
        return Err(Error::domain("sample_log_scale: need at least one draw"));
    }
    let n_data = comp_draws
        .map(|c| c.num_samples())
        .or_else(|| counts.map(|c| c.num_samples()));

    let values = match model {
        ScaleModel::ClrRestriction => {
            let comp = comp_draws.ok_or_else(|| {
                Error::domain("clr restriction requires composition draws")
            })?;
            if comp.num_draws() != s {
                return Err(Error::dim(format!(
                    "clr restriction: asked for {s} draws but composition has {}",
                    comp.num_draws()
                )));
            }
            let n = comp.num_samples();
            DMatrix::from_fn(s, n, |d, j| {
                let col = comp.draw(d).column(j);
                // -log g(w) for a simplex column.
                -col.iter().map(|w| w.ln()).sum::<f64>() / col.len() as f64
            })
        }
        ScaleModel::MedianOfRatiosRestriction => {
            let counts = counts.ok_or_else(|| {
                Error::domain("median-of-ratios restriction requires counts")
            })?;
            let log_scale = median_of_ratios_log_scale(counts)?;
            DMatrix::from_fn(s, log_scale.len(), |_, j| log_scale[j])
        }
        ScaleModel::LogNormalFamily { c, mu, alpha } => {
            if let Some(n) = n_data {
                check_samples(mu.len(), n, "log-normal family")?;
            }
            DMatrix::from_fn(s, mu.len(), |_, j| normal_draw(c + mu[j], *alpha, rng))
        }
        ScaleModel::Relaxed {
            gamma,
            alpha,
            design,
        } => {
            if let Some(n) = n_data {
                check_samples(design.len(), n, "relaxed model")?;
            }
            let n = design.len();
            let mean_x = design.iter().filter(|x| **x).count() as f64 / n as f64;
            let mut values = DMatrix::zeros(s, n);
            for d in 0..s {
                let z: f64 = StandardNormal.sample(rng);
                let beta = *gamma * z;
                for j in 0..n {
                    let x = if design[j] { 1.0 } else { 0.0 };
                    let mu_j = beta * (x - mean_x); // centered condition effect
                    values[(d, j)] = normal_draw(mu_j, *alpha, rng);
                }
            }
            values
        }
        ScaleModel::Informed { z, alpha } => {
            if let Some(n) = n_data {
                check_samples(z.len(), n, "informed model")?;
            }
            DMatrix::from_fn(s, z.len(), |_, j| normal_draw(z[j], *alpha, rng))
        }
        ScaleModel::DesignBased {
            dbar,
            tau,
            timepoint,
        } => {
            if let Some(n) = n_data {
                check_samples(timepoint.len(), n, "design-based model")?;
            }
            // The ratio has variance tau^2; each timepoint carries half of
            // it, so per-sample sd is tau/sqrt(2) around +-dbar/2.
            let sd = *tau / std::f64::consts::SQRT_2;
            DMatrix::from_fn(s, timepoint.len(), |_, j| {
                let mean = if timepoint[j] { dbar / 2.0 } else { -dbar / 2.0 };
                normal_draw(mean, sd, rng)
            })
        }
        ScaleModel::FlowEmpirical { mu, sigma } => {
            if let Some(n) = n_data {
                check_samples(mu.len(), n, "flow model")?;
            }
            DMatrix::from_fn(s, mu.len(), |_, j| normal_draw(mu[j], sigma[j], rng))
        }
        ScaleModel::PimImplied { prior } => {
            let comp = comp_draws.ok_or_else(|| {
                Error::domain("implied-conditional scale model requires composition draws")
            })?;
            if comp.num_draws() != s {
                return Err(Error::dim(format!(
                    "implied-conditional model: asked for {s} draws but composition has {}",
                    comp.num_draws()
                )));
            }
            sample_pim_perp(prior, comp, rng)?
        }
        ScaleModel::EffectiveFromEstimates { theta_hat, se } => {
            let n = n_data.unwrap_or(1);
            let d = theta_hat.len();
            let mut values = DMatrix::zeros(s, n);
            for draw in 0..s {
                let mean = (0..d)
                    .map(|i| normal_draw(theta_hat[i], se[i], rng))
                    .sum::<f64>()
                    / d as f64;
                for j in 0..n {
                    values[(draw, j)] = mean;
                }
            }
            values
        }
    };
    LogScaleDraws::new(values)
}

/// Median-of-ratios size factors on the log scale: `-log s_j` where `s_j`
/// is the per-sample median of count ratios to the across-sample geometric
/// mean, over taxa observed in every sample.
fn median_of_ratios_log_scale(counts: &CountTable) -> Result<Vec<f64>> {
    let (d, n) = (counts.num_taxa(), counts.num_samples());
    let y = counts.counts();
    let mut log_ref = Vec::new(); // per retained taxon: mean log count
    let mut retained = Vec::new();
    for i in 0..d {
        if (0..n).all(|j| y[(i, j)] > 0) {
            let mean_log = (0..n).map(|j| (y[(i, j)] as f64).ln()).sum::<f64>() / n as f64;
            log_ref.push(mean_log);
            retained.push(i);
        }
    }
    if retained.is_empty() {
        return Err(Error::invalid_data(
            "median-of-ratios: no taxon has positive counts in every sample",
        ));
    }
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut log_ratios: Vec<f64> = retained
            .iter()
            .zip(&log_ref)
            .map(|(&i, &r)| (y[(i, j)] as f64).ln() - r)
            .collect();
        log_ratios.sort_by(|a, b| a.total_cmp(b));
        let m = log_ratios.len();
        let median = if m % 2 == 1 {
            log_ratios[m / 2]
        } else {
            0.5 * (log_ratios[m / 2 - 1] + log_ratios[m / 2])
        };
        out.push(-median);
    }
    Ok(out)
}

/// For each composition draw, condition the prior-implied joint matrix-T
/// over `[log-ratio coords; sum coord]` on the observed log-ratio
/// coordinates and draw the sum coordinate.
fn sample_pim_perp<R: Rng + ?Sized>(
    prior: &MlnPrior,
    comp: &CompositionDraws,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let d = comp.num_taxa();
    let n = comp.num_samples();
    if prior.dim() != d {
        return Err(Error::dim(format!(
            "implied-conditional model: prior is {}-dimensional, compositions have {d} taxa",
            prior.dim()
        )));
    }
    check_samples(prior.num_samples(), n, "implied-conditional model")?;
    let maps = coda::ContrastMaps::new(d)?;
    // Joint over the contrast-transformed log abundances: mean G M X,
    // row scale G Xi G^T, unchanged column scale.
    let mean = &maps.g * prior.m() * prior.x();
    let row_scale = &maps.g * prior.xi() * maps.g.transpose();
    let row_scale = 0.5 * (&row_scale + row_scale.transpose());
    let joint = numkit::MatrixTParams::new(prior.nu(), mean, row_scale, prior.col_scale()?)?;

    let mut values = DMatrix::zeros(comp.num_draws(), n);
    for s in 0..comp.num_draws() {
        let w = comp.draw(s);
        let psi_par = DMatrix::from_fn(d - 1, n, |i, j| (w[(i, j)] / w[(d - 1, j)]).ln());
        let cond = numkit::conditional_matrix_t(&joint, d - 1, &psi_par)?;
        let perp = numkit::sample_matrix_t(&cond, rng)?;
        for j in 0..n {
            values[(s, j)] = perp[(0, j)];
        }
    }
    Ok(values)
}
