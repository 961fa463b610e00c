//! Differential-abundance decisions from posterior draws: per-draw Welch
//! tests with Benjamini-Hochberg correction, averaged across draws; effect
//! sizes; credible intervals; logit-ECDF certainty; confusion metrics.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Direction of a called change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increase,
    Decrease,
    None,
}

/// How significance is decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignificanceMode {
    /// Mean BH-adjusted p-value-like statistic below the alpha level.
    TestBased,
    /// Central 95% interval of the per-draw log fold change excludes zero.
    CredibleInterval,
}

/// Per-taxon decision record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonDecision {
    pub effect_size: f64,
    /// Mean across draws of the per-draw Welch p. Not a frequentist
    /// p-value: it inherits the posterior draws' dependence on the prior.
    pub p_like: f64,
    /// Mean across draws of the per-draw BH-adjusted p.
    pub p_bh: f64,
    pub significant: bool,
    pub lfc_mean: f64,
    pub lfc_lo: f64,
    pub lfc_hi: f64,
    pub logit_ecdf0: f64,
    pub direction: Direction,
}

/// Decisions for all taxa plus the settings that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionTable {
    pub taxa: Vec<TaxonDecision>,
    pub alpha_level: f64,
    pub mode: SignificanceMode,
}

impl DecisionTable {
    pub fn calls(&self) -> Vec<bool> {
        self.taxa.iter().map(|t| t.significant).collect()
    }
}

/// Standard confusion metrics against a ground-truth labeling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub fdr: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Two-sided Welch t-test. Returns `(t, df, p)`.
pub fn welch_t(group_a: &[f64], group_b: &[f64]) -> Result<(f64, f64, f64)> {
    if group_a.len() < 2 || group_b.len() < 2 {
        return Err(Error::domain(format!(
            "welch_t: need at least 2 observations per group, got {} and {}",
            group_a.len(),
            group_b.len()
        )));
    }
    let (na, nb) = (group_a.len() as f64, group_b.len() as f64);
    let ma = group_a.iter().sum::<f64>() / na;
    let mb = group_b.iter().sum::<f64>() / nb;
    // Floor the variances: posterior draws are continuous, so exact ties
    // only arise in degenerate tests.
    let va = (group_a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / (na - 1.0)).max(1e-12);
    let vb = (group_b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / (nb - 1.0)).max(1e-12);
    let sa = va / na;
    let sb = vb / nb;
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::domain(format!("welch_t: bad df {df}: {e}")))?;
    let p = 2.0 * dist.cdf(-t.abs());
    Ok((t, df, p.min(1.0)))
}

/// Benjamini-Hochberg step-up adjustment.
pub fn bh_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    if m == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut adjusted = vec![0.0; m];
    let mut running_min = 1.0_f64;
    for rank in (0..m).rev() {
        let idx = order[rank];
        let candidate = (p[idx] * m as f64 / (rank + 1) as f64).min(1.0);
        running_min = running_min.min(candidate);
        adjusted[idx] = running_min;
    }
    adjusted
}

/// Log-odds of the draw mass at or below zero, clamped away from 0 and 1.
pub fn logit_ecdf_at_zero(draws: &[f64]) -> f64 {
    let s = draws.len() as f64;
    let frac = draws.iter().filter(|x| **x <= 0.0).count() as f64 / s;
    let p = frac.clamp(1.0 / (2.0 * s), 1.0 - 1.0 / (2.0 * s));
    (p / (1.0 - p)).ln()
}

/// Median over draws of the standardized between-group difference:
/// per draw, (mean in group 1 - mean in group 0) divided by the larger
/// within-group standard deviation.
pub fn effect_size(eta_draws: &[DMatrix<f64>], labels: &[bool]) -> Result<Vec<f64>> {
    let (idx0, idx1) = split_labels(labels)?;
    let d = eta_draws
        .first()
        .ok_or_else(|| Error::domain("effect_size: no draws"))?
        .nrows();
    let mut out = Vec::with_capacity(d);
    for i in 0..d {
        let mut per_draw: Vec<f64> = eta_draws
            .iter()
            .map(|eta| {
                let row = eta.row(i);
                let (m0, s0) = mean_sd(&idx0, &row);
                let (m1, s1) = mean_sd(&idx1, &row);
                (m1 - m0) / s0.max(s1).max(1e-8)
            })
            .collect();
        out.push(median_in_place(&mut per_draw));
    }
    Ok(out)
}

fn mean_sd<S>(idx: &[usize], row: &nalgebra::Matrix<f64, nalgebra::U1, nalgebra::Dyn, S>) -> (f64, f64)
where
    S: nalgebra::storage::Storage<f64, nalgebra::U1, nalgebra::Dyn>,
{
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&j| row[j]).sum::<f64>() / n;
    let var = idx.iter().map(|&j| (row[j] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn median_in_place(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

fn split_labels(labels: &[bool]) -> Result<(Vec<usize>, Vec<usize>)> {
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
            "decisions: condition labels must contain both levels",
        ));
    }
    Ok((idx0, idx1))
}

/// Turn `S` draws of a D x N log-abundance matrix into per-taxon
/// decisions for a two-level condition labeling.
pub fn decide(
    eta_draws: &[DMatrix<f64>],
    labels: &[bool],
    alpha_level: f64,
    mode: SignificanceMode,
) -> Result<DecisionTable> {
    let (idx0, idx1) = split_labels(labels)?;
    let s = eta_draws.len();
    if s == 0 {
        return Err(Error::domain("decide: no draws"));
    }
    let d = eta_draws[0].nrows();
    if eta_draws[0].ncols() != labels.len() {
        return Err(Error::dim(format!(
            "decide: draws have {} samples, labels {}",
            eta_draws[0].ncols(),
            labels.len()
        )));
    }

    let mut p_sum = vec![0.0; d];
    let mut p_bh_sum = vec![0.0; d];
    let mut lfc = vec![Vec::with_capacity(s); d];
    for eta in eta_draws {
        let mut p_draw = Vec::with_capacity(d);
        for i in 0..d {
            let row = eta.row(i);
            let a: Vec<f64> = idx1.iter().map(|&j| row[j]).collect();
            let b: Vec<f64> = idx0.iter().map(|&j| row[j]).collect();
            let (_, _, p) = welch_t(&a, &b)?;
            p_draw.push(p);
            let (m0, _) = mean_sd(&idx0, &row);
            let (m1, _) = mean_sd(&idx1, &row);
            lfc[i].push(m1 - m0);
        }
        let adj = bh_adjust(&p_draw);
        for i in 0..d {
            p_sum[i] += p_draw[i];
            p_bh_sum[i] += adj[i];
        }
    }

    let effects = effect_size(eta_draws, labels)?;
    let mut taxa = Vec::with_capacity(d);
    for i in 0..d {
        let p_like = p_sum[i] / s as f64;
        let p_bh = p_bh_sum[i] / s as f64;
        let draws = &mut lfc[i];
        let logit0 = logit_ecdf_at_zero(draws);
        draws.sort_by(|a, b| a.total_cmp(b));
        let lfc_mean = draws.iter().sum::<f64>() / s as f64;
        let (lo, hi) = central_interval(draws, 0.95);
        let significant = match mode {
            SignificanceMode::TestBased => p_bh < alpha_level,
            SignificanceMode::CredibleInterval => lo > 0.0 || hi < 0.0,
        };
        let direction = if !significant {
            Direction::None
        } else if lfc_mean > 0.0 {
            Direction::Increase
        } else {
            Direction::Decrease
        };
        taxa.push(TaxonDecision {
            effect_size: effects[i],
            p_like,
            p_bh,
            significant,
            lfc_mean,
            lfc_lo: lo,
            lfc_hi: hi,
            logit_ecdf0: logit0,
            direction,
        });
    }
    Ok(DecisionTable {
        taxa,
        alpha_level,
        mode,
    })
}

/// Decisions from posterior draws of a per-taxon coefficient (an `S x D`
/// matrix, one column per taxon). Used by pipelines whose log fold change
/// is a regression coefficient rather than a per-sample contrast; the
/// p-value-like statistic is the two-sided posterior tail mass at zero.
pub fn decide_from_lfc_draws(
    lfc: &DMatrix<f64>,
    alpha_level: f64,
    mode: SignificanceMode,
) -> Result<DecisionTable> {
    let (s, d) = (lfc.nrows(), lfc.ncols());
    if s < 2 {
        return Err(Error::domain("decide_from_lfc_draws: need at least 2 draws"));
    }
    let mut p_raw = Vec::with_capacity(d);
    let mut per_taxon = Vec::with_capacity(d);
    for i in 0..d {
        let mut draws: Vec<f64> = lfc.column(i).iter().cloned().collect();
        let logit0 = logit_ecdf_at_zero(&draws);
        draws.sort_by(|a, b| a.total_cmp(b));
        let mean = draws.iter().sum::<f64>() / s as f64;
        let sd = (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (s - 1) as f64).sqrt();
        let (lo, hi) = central_interval(&draws, 0.95);
        let clamp = 1.0 / (2.0 * s as f64);
        let below = (draws.iter().filter(|x| **x <= 0.0).count() as f64 / s as f64)
            .clamp(clamp, 1.0 - clamp);
        let p = (2.0 * below.min(1.0 - below)).min(1.0);
        p_raw.push(p);
        per_taxon.push((mean, sd, lo, hi, logit0));
    }
    let p_adj = bh_adjust(&p_raw);
    let mut taxa = Vec::with_capacity(d);
    for i in 0..d {
        let (mean, sd, lo, hi, logit0) = per_taxon[i];
        let significant = match mode {
            SignificanceMode::TestBased => p_adj[i] < alpha_level,
            SignificanceMode::CredibleInterval => lo > 0.0 || hi < 0.0,
        };
        let direction = if !significant {
            Direction::None
        } else if mean > 0.0 {
            Direction::Increase
        } else {
            Direction::Decrease
        };
        taxa.push(TaxonDecision {
            effect_size: mean / sd.max(1e-8),
            p_like: p_raw[i],
            p_bh: p_adj[i],
            significant,
            lfc_mean: mean,
            lfc_lo: lo,
            lfc_hi: hi,
            logit_ecdf0: logit0,
            direction,
        });
    }
    Ok(DecisionTable {
        taxa,
        alpha_level,
        mode,
    })
}

/// Central `level` interval of sorted draws (empirical quantiles).
fn central_interval(sorted: &[f64], level: f64) -> (f64, f64) {
    let s = sorted.len();
    if s == 1 {
        return (sorted[0], sorted[0]);
    }
    let tail = (1.0 - level) / 2.0;
    let q = |frac: f64| -> f64 {
        let pos = frac * (s - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    };
    (q(tail), q(1.0 - tail))
}

/// Confusion metrics of boolean calls against ground truth.
pub fn confusion(calls: &[bool], truth: &[bool]) -> Result<ConfusionMetrics> {
    if calls.len() != truth.len() {
        return Err(Error::dim(format!(
            "confusion: {} calls vs {} truths",
            calls.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&c, &t) in calls.iter().zip(truth) {
        match (c, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(ConfusionMetrics {
        tp,
        fp,
        tn,
        fn_,
        fdr: fp as f64 / (tp + fp).max(1) as f64,
        sensitivity: if tp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp + fn_) as f64
        },
        specificity: if tn + fp == 0 {
            1.0
        } else {
            tn as f64 / (tn + fp) as f64
        },
    })
}
