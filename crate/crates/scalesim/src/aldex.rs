//! Dirichlet-multinomial scale-conditional estimand: posterior composition
//! draws, combined with log-scale draws into log-abundance draws, then
//! summarized as differential-abundance decisions.

use crate::decisions::{self, DecisionTable, SignificanceMode};
use crate::error::{Error, Result};
use crate::io::CountTable;
use crate::numkit::{self, Stream};
use crate::scale_models::{self, LogScaleDraws, ScaleModel};
use nalgebra::DMatrix;
use rand::Rng;

/// Default Dirichlet prior mass per taxon (Jeffreys-style).
pub const DEFAULT_GAMMA: f64 = 0.5;
/// Default number of Monte Carlo draws.
pub const DEFAULT_DRAWS: usize = 128;

/// `S` Monte Carlo draws of a D x N matrix of simplex columns.
#[derive(Debug, Clone)]
pub struct CompositionDraws {
    draws: Vec<DMatrix<f64>>,
    gamma: Vec<f64>,
}

impl CompositionDraws {
    pub fn new(draws: Vec<DMatrix<f64>>, gamma: Vec<f64>) -> Result<Self> {
        let first = draws
            .first()
            .ok_or_else(|| Error::domain("composition draws: need at least one draw"))?;
        let (d, n) = (first.nrows(), first.ncols());
        if gamma.iter().any(|g| !(*g > 0.0)) {
            return Err(Error::domain("composition draws: gamma must be positive"));
        }
        for (s, m) in draws.iter().enumerate() {
            if m.nrows() != d || m.ncols() != n {
                return Err(Error::dim(format!(
                    "composition draws: draw {s} is {}x{}, expected {d}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            for j in 0..n {
                let col = m.column(j);
                if col.iter().any(|w| !(*w > 0.0)) {
                    return Err(Error::domain(format!(
                        "composition draws: non-positive entry in draw {s}, sample {j}"
                    )));
                }
                if (col.sum() - 1.0).abs() > 1e-10 {
                    return Err(Error::domain(format!(
                        "composition draws: draw {s}, sample {j} sums to {}",
                        col.sum()
                    )));
                }
            }
        }
        Ok(CompositionDraws { draws, gamma })
    }

    pub fn draw(&self, s: usize) -> &DMatrix<f64> {
        &self.draws[s]
    }

    pub fn draws(&self) -> &[DMatrix<f64>] {
        &self.draws
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn num_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn num_taxa(&self) -> usize {
        self.draws[0].nrows()
    }

    pub fn num_samples(&self) -> usize {
        self.draws[0].ncols()
    }
}

/// `S` draws of the D x N log-abundance matrix.
#[derive(Debug, Clone)]
pub struct EtaDraws {
    values: Vec<DMatrix<f64>>,
}

impl EtaDraws {
    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }
}

/// Draw `s` posterior compositions: independently per sample `j`,
/// `Dirichlet(Y_.j + gamma)`.
pub fn sample_compositions<R: Rng + ?Sized>(
    counts: &CountTable,
    gamma: &[f64],
    s: usize,
    rng: &mut R,
) -> Result<CompositionDraws> {
    let (d, n) = (counts.num_taxa(), counts.num_samples());
    if gamma.len() != d {
        return Err(Error::dim(format!(
            "sample_compositions: gamma has {} entries for {d} taxa",
            gamma.len()
        )));
    }
    if gamma.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::domain("sample_compositions: gamma must be positive"));
    }
    let mut alphas = vec![vec![0.0; d]; n];
    for j in 0..n {
        for i in 0..d {
            alphas[j][i] = counts.counts()[(i, j)] as f64 + gamma[i];
        }
    }
    let mut draws = Vec::with_capacity(s);
    for _ in 0..s {
        let mut m = DMatrix::zeros(d, n);
        for (j, alpha) in alphas.iter().enumerate() {
            let col = numkit::sample_dirichlet(alpha, rng)?;
            m.set_column(j, &col);
        }
        draws.push(m);
    }
    CompositionDraws::new(draws, gamma.to_vec())
}

/// Combine composition and log-scale draws:
/// `eta_ij = log w_par_ij + log w_perp_j` per draw.
pub fn compose_eta(comp: &CompositionDraws, logscale: &LogScaleDraws) -> Result<EtaDraws> {
    if comp.num_draws() != logscale.num_draws() || comp.num_samples() != logscale.num_samples() {
        return Err(Error::dim(format!(
            "compose_eta: compositions are {} draws x {} samples, log scale {} x {}",
            comp.num_draws(),
            comp.num_samples(),
            logscale.num_draws(),
            logscale.num_samples()
        )));
    }
    let values = comp
        .draws()
        .iter()
        .enumerate()
        .map(|(s, w)| {
            DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| {
                w[(i, j)].ln() + logscale.values()[(s, j)]
            })
        })
        .collect();
    Ok(EtaDraws { values })
}

/// The full pipeline: posterior compositions, scale draws, composition
/// into log abundances, and per-taxon decisions.
///
/// The composition and scale streams are separate children of `stream`,
/// so composition draws are bit-identical across scale models under a
/// fixed seed (the sample-reuse property sensitivity sweeps rely on).
pub fn run_aldex_scale_sim(
    counts: &CountTable,
    gamma: &[f64],
    model: &ScaleModel,
    s: usize,
    labels: &[bool],
    alpha_level: f64,
    mode: SignificanceMode,
    stream: &Stream,
) -> Result<DecisionTable> {
    let comp = sample_compositions(counts, gamma, s, &mut stream.child(0).rng())?;
    let logscale = scale_models::sample_log_scale(
        model,
        Some(&comp),
        Some(counts),
        s,
        &mut stream.child(1).rng(),
    )?;
    let eta = compose_eta(&comp, &logscale)?;
    decisions::decide(eta.values(), labels, alpha_level, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coda;
    use approx::assert_relative_eq;

    fn toy_counts(d: usize, n: usize, fill: impl Fn(usize, usize) -> u64) -> CountTable {
        CountTable::new(
            DMatrix::from_fn(d, n, fill),
            (0..d).map(|i| format!("t{i}")).collect(),
            (0..n).map(|j| format!("s{j}")).collect(),
            (0..n).map(|j| j >= n / 2).collect(),
        )
        .unwrap()
    }

    #[test]
    fn prior_recovery_on_zero_column() {
        let counts = toy_counts(4, 2, |_, _| 0);
        let s = 10_000;
        let mut rng = Stream::root(21).rng();
        let comp = sample_compositions(&counts, &[1.0; 4], s, &mut rng).unwrap();
        // Dirichlet(1,1,1,1) mean is 1/4; var = 3/(16*5).
        let se = (3.0 / 80.0_f64 / s as f64).sqrt();
        for i in 0..4 {
            let mean: f64 = comp.draws().iter().map(|m| m[(i, 0)]).sum::<f64>() / s as f64;
            assert!((mean - 0.25).abs() < 3.0 * se, "mean {mean}");
        }
    }

    #[test]
    fn posterior_mean_matches_conjugate_form() {
        let counts = toy_counts(3, 1, |i, _| [12, 5, 0][i]);
        let gamma = [0.5; 3];
        let s = 10_000;
        let mut rng = Stream::root(22).rng();
        let comp = sample_compositions(&counts, &gamma, s, &mut rng).unwrap();
        let alpha = [12.5, 5.5, 0.5];
        let a0: f64 = alpha.iter().sum();
        for i in 0..3 {
            let expect = alpha[i] / a0;
            let var = alpha[i] * (a0 - alpha[i]) / (a0 * a0 * (a0 + 1.0));
            let mean: f64 = comp.draws().iter().map(|m| m[(i, 0)]).sum::<f64>() / s as f64;
            let se = (var / s as f64).sqrt();
            assert!(
                (mean - expect).abs() < 3.0 * se,
                "taxon {i}: mean {mean}, expect {expect}"
            );
        }
    }

    #[test]
    fn compose_eta_zero_scale_and_clr_identity() {
        let counts = toy_counts(5, 4, |i, j| (i as u64 + 1) * (j as u64 + 2));
        let s = 16;
        let mut rng = Stream::root(23).rng();
        let comp = sample_compositions(&counts, &[0.5; 5], s, &mut rng).unwrap();

        let zero = LogScaleDraws::new(DMatrix::zeros(s, 4)).unwrap();
        let eta = compose_eta(&comp, &zero).unwrap();
        for (w, e) in comp.draws().iter().zip(eta.values()) {
            for (a, b) in w.iter().zip(e.iter()) {
                assert_relative_eq!(a.ln(), *b, epsilon = 1e-14);
            }
        }

        // Geometric-mean restriction turns eta into CLR coordinates.
        let clr_scale = scale_models::sample_log_scale(
            &ScaleModel::ClrRestriction,
            Some(&comp),
            None,
            s,
            &mut rng,
        )
        .unwrap();
        let eta = compose_eta(&comp, &clr_scale).unwrap();
        for (w, e) in comp.draws().iter().zip(eta.values()) {
            for j in 0..4 {
                let col: Vec<f64> = w.column(j).iter().cloned().collect();
                let clr = coda::clr(&col).unwrap();
                for i in 0..5 {
                    assert_relative_eq!(e[(i, j)], clr[i], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn compose_eta_translation() {
        let counts = toy_counts(3, 2, |i, j| 5 + i as u64 + j as u64);
        let s = 4;
        let mut rng = Stream::root(24).rng();
        let comp = sample_compositions(&counts, &[0.5; 3], s, &mut rng).unwrap();
        let zero = LogScaleDraws::new(DMatrix::zeros(s, 2)).unwrap();
        let shifted = LogScaleDraws::new(DMatrix::from_element(s, 2, 1.7)).unwrap();
        let a = compose_eta(&comp, &zero).unwrap();
        let b = compose_eta(&comp, &shifted).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            for (u, v) in x.iter().zip(y.iter()) {
                assert_relative_eq!(v - u, 1.7, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn clr_pipeline_matches_direct_clr_decisions() {
        let counts = toy_counts(6, 10, |i, j| {
            10 + (i as u64 * 13 + j as u64 * 7) % 40 + if i == 0 && j >= 5 { 60 } else { 0 }
        });
        let labels = counts.condition_labels();
        let stream = Stream::root(25);
        let table = run_aldex_scale_sim(
            &counts,
            &[0.5; 6],
            &ScaleModel::ClrRestriction,
            64,
            &labels,
            0.05,
            SignificanceMode::TestBased,
            &stream,
        )
        .unwrap();

        // Same composition stream, CLR coordinates computed by hand.
        let comp =
            sample_compositions(&counts, &[0.5; 6], 64, &mut stream.child(0).rng()).unwrap();
        let clr_draws: Vec<DMatrix<f64>> = comp
            .draws()
            .iter()
            .map(|w| {
                DMatrix::from_fn(6, 10, |i, j| {
                    let col: Vec<f64> = w.column(j).iter().cloned().collect();
                    coda::clr(&col).unwrap()[i]
                })
            })
            .collect();
        let direct =
            decisions::decide(&clr_draws, &labels, 0.05, SignificanceMode::TestBased).unwrap();
        for (a, b) in table.taxa.iter().zip(&direct.taxa) {
            assert_eq!(a.significant, b.significant);
            assert_relative_eq!(a.p_bh, b.p_bh, epsilon = 1e-10);
            assert_relative_eq!(a.effect_size, b.effect_size, epsilon = 1e-10);
        }
    }

    #[test]
    fn composition_draws_reused_across_scale_models() {
        let counts = toy_counts(4, 6, |i, j| 20 + i as u64 * 3 + j as u64);
        let stream = Stream::root(26);
        let a = sample_compositions(&counts, &[0.5; 4], 32, &mut stream.child(0).rng()).unwrap();
        let b = sample_compositions(&counts, &[0.5; 4], 32, &mut stream.child(0).rng()).unwrap();
        for (x, y) in a.draws().iter().zip(b.draws()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn bad_gamma_rejected() {
        let counts = toy_counts(2, 2, |_, _| 1);
        let mut rng = Stream::root(27).rng();
        assert!(sample_compositions(&counts, &[0.5, 0.0], 4, &mut rng).is_err());
        assert!(sample_compositions(&counts, &[0.5], 4, &mut rng).is_err());
    }
}
