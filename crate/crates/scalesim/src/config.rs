//! JSON study configuration: validated before execution, overridable by
//! CLI flags, and with the seed overridable by the `SCALESIM_SEED`
//! environment variable.

use crate::decisions::SignificanceMode;
use crate::error::{Error, Result};
use crate::mln::MlnPrior;
use crate::scale_models::ScaleModel;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const ENV_SEED: &str = "SCALESIM_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Aldex,
    Mln,
}

/// A prior written as row-major nested arrays, the hand-editable form of
/// [`MlnPrior`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub m: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub nu: f64,
    pub xi: Vec<Vec<f64>>,
    pub x: Vec<Vec<f64>>,
}

fn to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::config(format!("prior matrix '{name}' is empty")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::config(format!(
            "prior matrix '{name}' must be rectangular and nonempty"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl PriorConfig {
    pub fn to_prior(&self) -> Result<MlnPrior> {
        MlnPrior::new(
            to_matrix("m", &self.m)?,
            to_matrix("gamma", &self.gamma)?,
            self.nu,
            to_matrix("xi", &self.xi)?,
            to_matrix("x", &self.x)?,
        )
    }
}

fn default_draws() -> usize {
    crate::aldex::DEFAULT_DRAWS
}
fn default_alpha_level() -> f64 {
    0.05
}
fn default_gamma_prior() -> f64 {
    crate::aldex::DEFAULT_GAMMA
}
fn default_mode() -> SignificanceMode {
    SignificanceMode::TestBased
}
fn default_pipeline() -> Pipeline {
    Pipeline::Aldex
}

/// Everything a pipeline run depends on besides the input files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "default_pipeline")]
    pub pipeline: Pipeline,
    #[serde(default)]
    pub scale_model: Option<ScaleModel>,
    /// Multinomial log-normal prior; required for the `mln` pipeline.
    #[serde(default)]
    pub prior: Option<PriorConfig>,
    /// Index of the tested regression coefficient (`mln` pipeline).
    #[serde(default)]
    pub coeff: Option<usize>,
    /// Posterior draws S.
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_alpha_level")]
    pub alpha_level: f64,
    #[serde(default = "default_mode")]
    pub mode: SignificanceMode,
    /// Dirichlet concentration added to every count.
    #[serde(default = "default_gamma_prior")]
    pub gamma_prior: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            pipeline: default_pipeline(),
            scale_model: None,
            prior: None,
            coeff: None,
            draws: default_draws(),
            seed: 0,
            alpha_level: default_alpha_level(),
            mode: default_mode(),
            gamma_prior: default_gamma_prior(),
        }
    }
}

impl StudyConfig {
    pub fn load(path: &Path) -> Result<StudyConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: StudyConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::config("draws must be positive"));
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 1.0) {
            return Err(Error::config(format!(
                "alpha_level must lie in (0, 1), got {}",
                self.alpha_level
            )));
        }
        if !(self.gamma_prior > 0.0) {
            return Err(Error::config(format!(
                "gamma_prior must be positive, got {}",
                self.gamma_prior
            )));
        }
        if self.pipeline == Pipeline::Mln && self.prior.is_none() {
            return Err(Error::config("the mln pipeline requires a prior"));
        }
        Ok(())
    }

    /// Replace the seed with `SCALESIM_SEED` when the variable is set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(ENV_SEED) {
            self.seed = raw.parse().map_err(|_| {
                Error::config(format!("{ENV_SEED} must be an unsigned integer, got '{raw}'"))
            })?;
        }
        Ok(())
    }
}
