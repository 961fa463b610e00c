//! Random-variate generation and matrix-variate distribution primitives.

pub mod stream;

pub use stream::Stream;

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Binomial, ChiSquared, Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

/// Cholesky-factor a matrix, failing if it is not SPD. Cholesky failure is
/// the SPD test; no eigenvalue thresholding.
pub fn spd_cholesky(m: &DMatrix<f64>, name: &str) -> Result<nalgebra::Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim(format!(
            "{name}: expected square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    nalgebra::Cholesky::new(m.clone()).ok_or_else(|| Error::NotSpd(name.to_string()))
}

/// log of the multivariate gamma function `Gamma_p(a)`.
pub fn ln_multigamma(p: usize, a: f64) -> f64 {
    let mut acc = 0.25 * (p * (p - 1)) as f64 * std::f64::consts::PI.ln();
    for i in 1..=p {
        acc += ln_gamma(a + 0.5 * (1.0 - i as f64));
    }
    acc
}

fn standard_normal_matrix<R: Rng + ?Sized>(p: usize, q: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(p, q, |_, _| rng.sample(StandardNormal))
}

/// Matrix-normal parameters `N(M, U, V)` with row covariance U and column
/// covariance V.
#[derive(Debug, Clone)]
pub struct MatrixNormalParams {
    pub mean: DMatrix<f64>,
    pub row_cov: DMatrix<f64>,
    pub col_cov: DMatrix<f64>,
}

impl MatrixNormalParams {
    pub fn new(mean: DMatrix<f64>, row_cov: DMatrix<f64>, col_cov: DMatrix<f64>) -> Result<Self> {
        if row_cov.nrows() != mean.nrows() || col_cov.nrows() != mean.ncols() {
            return Err(Error::dim(format!(
                "matrix normal: mean is {}x{}, row_cov {}x{}, col_cov {}x{}",
                mean.nrows(),
                mean.ncols(),
                row_cov.nrows(),
                row_cov.ncols(),
                col_cov.nrows(),
                col_cov.ncols()
            )));
        }
        spd_cholesky(&row_cov, "matrix normal row_cov")?;
        spd_cholesky(&col_cov, "matrix normal col_cov")?;
        Ok(MatrixNormalParams {
            mean,
            row_cov,
            col_cov,
        })
    }
}

/// Inverse-Wishart parameters `IW(dof, scale)`; mean is `scale/(dof-p-1)`
/// for `dof > p+1`.
#[derive(Debug, Clone)]
pub struct InverseWishartParams {
    pub dof: f64,
    pub scale: DMatrix<f64>,
}

impl InverseWishartParams {
    pub fn new(dof: f64, scale: DMatrix<f64>) -> Result<Self> {
        let p = scale.nrows() as f64;
        if !(dof > p - 1.0) {
            return Err(Error::domain(format!(
                "inverse Wishart: dof {dof} must exceed p-1 = {}",
                p - 1.0
            )));
        }
        spd_cholesky(&scale, "inverse Wishart scale")?;
        Ok(InverseWishartParams { dof, scale })
    }
}

/// Matrix-T parameters. The dof is in the inverse-Wishart convention: a
/// draw is distributed as `N(mean, S, col_scale)` marginalized over
/// `S ~ IW(dof, row_scale)`.
#[derive(Debug, Clone)]
pub struct MatrixTParams {
    pub dof: f64,
    pub mean: DMatrix<f64>,
    pub row_scale: DMatrix<f64>,
    pub col_scale: DMatrix<f64>,
}

impl MatrixTParams {
    pub fn new(
        dof: f64,
        mean: DMatrix<f64>,
        row_scale: DMatrix<f64>,
        col_scale: DMatrix<f64>,
    ) -> Result<Self> {
        let p = mean.nrows() as f64;
        if !(dof > p - 1.0) {
            return Err(Error::domain(format!(
                "matrix T: dof {dof} must exceed p-1 = {}",
                p - 1.0
            )));
        }
        if row_scale.nrows() != mean.nrows() || col_scale.nrows() != mean.ncols() {
            return Err(Error::dim(format!(
                "matrix T: mean is {}x{}, row_scale {}x{}, col_scale {}x{}",
                mean.nrows(),
                mean.ncols(),
                row_scale.nrows(),
                row_scale.ncols(),
                col_scale.nrows(),
                col_scale.ncols()
            )));
        }
        spd_cholesky(&row_scale, "matrix T row_scale")?;
        spd_cholesky(&col_scale, "matrix T col_scale")?;
        Ok(MatrixTParams {
            dof,
            mean,
            row_scale,
            col_scale,
        })
    }
}

/// Draw from `Dirichlet(alpha)`. Components are strictly positive and sum
/// to one.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<DVector<f64>> {
    if alpha.is_empty() {
        return Err(Error::domain("dirichlet: empty alpha"));
    }
    if let Some(a) = alpha.iter().find(|a| !(**a > 0.0)) {
        return Err(Error::domain(format!(
            "dirichlet: alpha components must be positive, got {a}"
        )));
    }
    let mut draws = DVector::zeros(alpha.len());
    for (i, &a) in alpha.iter().enumerate() {
        let g = Gamma::new(a, 1.0).map_err(|e| Error::domain(format!("dirichlet: {e}")))?;
        // Guard against underflow to zero for very small shapes.
        draws[i] = g.sample(rng).max(f64::MIN_POSITIVE);
    }
    let total = draws.sum();
    Ok(draws / total)
}

/// Draw from `Multinomial(n, p)` by sequential conditional binomials.
pub fn sample_multinomial<R: Rng + ?Sized>(p: &[f64], n: u64, rng: &mut R) -> Result<Vec<u64>> {
    if p.is_empty() {
        return Err(Error::domain("multinomial: empty probability vector"));
    }
    let total: f64 = p.iter().sum();
    if p.iter().any(|&x| x < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!(
            "multinomial: probabilities must be nonnegative and sum to 1 (sum = {total})"
        )));
    }
    let mut counts = vec![0u64; p.len()];
    let mut remaining = n;
    let mut mass_left = 1.0_f64;
    for i in 0..p.len() - 1 {
        if remaining == 0 {
            break;
        }
        let cond = (p[i] / mass_left).clamp(0.0, 1.0);
        let draw = if cond >= 1.0 {
            remaining
        } else {
            Binomial::new(remaining, cond)
                .map_err(|e| Error::domain(format!("multinomial: {e}")))?
                .sample(rng)
        };
        counts[i] = draw;
        remaining -= draw;
        mass_left -= p[i];
    }
    *counts.last_mut().unwrap() += remaining;
    Ok(counts)
}

/// Draw from a matrix-normal distribution.
pub fn sample_matrix_normal<R: Rng + ?Sized>(
    params: &MatrixNormalParams,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let lu = spd_cholesky(&params.row_cov, "matrix normal row_cov")?;
    let lv = spd_cholesky(&params.col_cov, "matrix normal col_cov")?;
    let z = standard_normal_matrix(params.mean.nrows(), params.mean.ncols(), rng);
    Ok(&params.mean + lu.l() * z * lv.l().transpose())
}

/// Draw an SPD matrix from an inverse-Wishart distribution via the Bartlett
/// decomposition of the corresponding Wishart.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(
    params: &InverseWishartParams,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let p = params.scale.nrows();
    let pf = p as f64;
    if !(params.dof > pf - 1.0) {
        return Err(Error::domain(format!(
            "inverse Wishart: dof {} must exceed p-1 = {}",
            params.dof,
            pf - 1.0
        )));
    }
    let scale_chol = spd_cholesky(&params.scale, "inverse Wishart scale")?;
    // Precision ~ Wishart(dof, scale^{-1}).
    let scale_inv = scale_chol.inverse();
    let k = spd_cholesky(&scale_inv, "inverse Wishart scale inverse")?;
    let mut bartlett = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(params.dof - i as f64)
            .map_err(|e| Error::domain(format!("inverse Wishart: {e}")))?;
        bartlett[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            bartlett[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let half = k.l() * bartlett;
    let precision = &half * half.transpose();
    let prec_chol = spd_cholesky(&precision, "inverse Wishart precision draw")?;
    Ok(prec_chol.inverse())
}

/// Log density of a matrix-T distribution at `x`.
pub fn matrix_t_logpdf(x: &DMatrix<f64>, params: &MatrixTParams) -> Result<f64> {
    let (p, q) = (params.mean.nrows(), params.mean.ncols());
    if x.nrows() != p || x.ncols() != q {
        return Err(Error::dim(format!(
            "matrix T logpdf: x is {}x{}, mean is {p}x{q}",
            x.nrows(),
            x.ncols()
        )));
    }
    let nu = params.dof;
    let lr = spd_cholesky(&params.row_scale, "matrix T row_scale")?;
    let lc = spd_cholesky(&params.col_scale, "matrix T col_scale")?;
    let ld_row: f64 = 2.0 * lr.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let ld_col: f64 = 2.0 * lc.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();

    // C = Lr^{-1} (x - M) Lc^{-T}; |I + Sigma^{-1} R V^{-1} R^T| = |I + C C^T|.
    let resid = x - &params.mean;
    let mut c = resid.clone();
    lr.l().solve_lower_triangular_mut(&mut c);
    let mut ct = c.transpose();
    lc.l().solve_lower_triangular_mut(&mut ct);
    let c = ct.transpose();
    let inner = DMatrix::identity(p, p) + &c * c.transpose();
    let inner_chol = spd_cholesky(&inner, "matrix T kernel")?;
    let ld_inner: f64 = 2.0 * inner_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();

    let (pf, qf) = (p as f64, q as f64);
    Ok(ln_multigamma(p, 0.5 * (nu + qf)) - ln_multigamma(p, 0.5 * nu)
        - 0.5 * pf * qf * std::f64::consts::PI.ln()
        - 0.5 * qf * ld_row
        - 0.5 * pf * ld_col
        - 0.5 * (nu + qf) * ld_inner)
}

/// Draw from a matrix-T distribution compositionally: row covariance from
/// the inverse Wishart, then a matrix-normal draw.
pub fn sample_matrix_t<R: Rng + ?Sized>(
    params: &MatrixTParams,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let iw = InverseWishartParams::new(params.dof, params.row_scale.clone())?;
    let sigma = sample_inverse_wishart(&iw, rng)?;
    let mn = MatrixNormalParams::new(params.mean.clone(), sigma, params.col_scale.clone())?;
    sample_matrix_normal(&mn, rng)
}

/// Condition a row-partitioned matrix-T on its top `split` rows.
///
/// For joint rows `[x1; x2] ~ T(nu, [M1; M2], Xi, V)` with `x1` the observed
/// `split x q` block, returns the parameters of `x2 | x1`:
/// mean `M2 + Xi21 Xi11^{-1} (x1 - M1)`, row scale `Xi22 - Xi21 Xi11^{-1} Xi12`,
/// column scale `V + (x1 - M1)^T Xi11^{-1} (x1 - M1)`. In the inverse-Wishart
/// dof convention used here the dof label is unchanged; the effective
/// Student dof still grows by the number of conditioned rows.
pub fn conditional_matrix_t(
    joint: &MatrixTParams,
    split: usize,
    observed_top: &DMatrix<f64>,
) -> Result<MatrixTParams> {
    let (p, q) = (joint.mean.nrows(), joint.mean.ncols());
    if split == 0 || split >= p {
        return Err(Error::dim(format!(
            "conditional matrix T: split {split} must be in 1..{p}"
        )));
    }
    if observed_top.nrows() != split || observed_top.ncols() != q {
        return Err(Error::dim(format!(
            "conditional matrix T: observed block is {}x{}, expected {split}x{q}",
            observed_top.nrows(),
            observed_top.ncols()
        )));
    }
    let p2 = p - split;
    let xi11 = joint.row_scale.view((0, 0), (split, split)).into_owned();
    let xi21 = joint.row_scale.view((split, 0), (p2, split)).into_owned();
    let xi22 = joint.row_scale.view((split, split), (p2, p2)).into_owned();
    let m1 = joint.mean.view((0, 0), (split, q)).into_owned();
    let m2 = joint.mean.view((split, 0), (p2, q)).into_owned();

    let chol11 = spd_cholesky(&xi11, "conditional matrix T: Xi11")?;
    let resid = observed_top - m1;
    let xi11_inv_resid = chol11.solve(&resid);
    let xi11_inv_xi12 = chol11.solve(&xi21.transpose());

    let mean = m2 + &xi21 * &xi11_inv_resid;
    let row_scale = xi22 - &xi21 * xi11_inv_xi12;
    let col_scale = &joint.col_scale + resid.transpose() * xi11_inv_resid;
    // Symmetrize against rounding before the SPD check.
    let row_scale = 0.5 * (&row_scale + row_scale.transpose());
    let col_scale = 0.5 * (&col_scale + col_scale.transpose());
    MatrixTParams::new(joint.dof, mean, row_scale, col_scale)
}
