//! Compositional transforms, contrast maps, the scale discrepancy, and the
//! SparCC identifying-restriction solve.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// A point on the simplex: strictly positive values summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Composition {
    values: DVector<f64>,
}

impl Composition {
    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Normalize a strictly positive vector onto the simplex.
pub fn closure(v: &[f64]) -> Result<Composition> {
    if v.is_empty() {
        return Err(Error::domain("closure: empty vector"));
    }
    if let Some(x) = v.iter().find(|x| !(**x > 0.0)) {
        return Err(Error::domain(format!(
            "closure: components must be strictly positive, got {x}"
        )));
    }
    let total: f64 = v.iter().sum();
    Ok(Composition {
        values: DVector::from_iterator(v.len(), v.iter().map(|x| x / total)),
    })
}

/// Geometric mean of a strictly positive vector.
pub fn geometric_mean(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::domain("geometric_mean: empty vector"));
    }
    if let Some(x) = v.iter().find(|x| !(**x > 0.0)) {
        return Err(Error::domain(format!(
            "geometric_mean: components must be strictly positive, got {x}"
        )));
    }
    let mean_log = v.iter().map(|x| x.ln()).sum::<f64>() / v.len() as f64;
    Ok(mean_log.exp())
}

/// Centered log-ratio transform: `log x_i - mean_k log x_k`. Scale
/// invariant, so any strictly positive vector is accepted.
pub fn clr(v: &[f64]) -> Result<DVector<f64>> {
    if let Some(x) = v.iter().find(|x| !(**x > 0.0)) {
        return Err(Error::domain(format!(
            "clr: components must be strictly positive, got {x}"
        )));
    }
    let logs: Vec<f64> = v.iter().map(|x| x.ln()).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    Ok(DVector::from_iterator(v.len(), logs.iter().map(|l| l - mean)))
}

/// Additive log-ratio transform with the last component as reference.
pub fn alr(v: &[f64]) -> Result<DVector<f64>> {
    if v.len() < 2 {
        return Err(Error::domain("alr: need at least two components"));
    }
    if let Some(x) = v.iter().find(|x| !(**x > 0.0)) {
        return Err(Error::domain(format!(
            "alr: components must be strictly positive, got {x}"
        )));
    }
    let ref_log = v[v.len() - 1].ln();
    Ok(DVector::from_iterator(
        v.len() - 1,
        v[..v.len() - 1].iter().map(|x| x.ln() - ref_log),
    ))
}

/// Inverse additive log-ratio transform, returning a composition.
pub fn alr_inv(coords: &[f64]) -> Composition {
    // Softmax of [coords; 0], computed with a max shift for stability.
    let max = coords.iter().cloned().fold(0.0f64, f64::max);
    let mut vals: Vec<f64> = coords.iter().map(|c| (c - max).exp()).collect();
    vals.push((-max).exp());
    let total: f64 = vals.iter().sum();
    Composition {
        values: DVector::from_iterator(vals.len(), vals.iter().map(|v| v / total)),
    }
}

/// The linear maps splitting log-abundance coordinates into a contrast
/// part and a sum part: `F = [I, -1]`, `H = 1^T`, `G = [F; H]`.
#[derive(Debug, Clone)]
pub struct ContrastMaps {
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub g: DMatrix<f64>,
    g_inv: DMatrix<f64>,
}

impl ContrastMaps {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::domain("contrast maps: need dimension >= 2"));
        }
        let mut f = DMatrix::zeros(dim - 1, dim);
        for i in 0..dim - 1 {
            f[(i, i)] = 1.0;
            f[(i, dim - 1)] = -1.0;
        }
        let h = DMatrix::from_element(1, dim, 1.0);
        let mut g = DMatrix::zeros(dim, dim);
        g.view_mut((0, 0), (dim - 1, dim)).copy_from(&f);
        g.view_mut((dim - 1, 0), (1, dim)).copy_from(&h);
        let g_inv = g
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::domain("contrast maps: G not invertible"))?;
        Ok(ContrastMaps { f, h, g, g_inv })
    }

    pub fn g_inv(&self) -> &DMatrix<f64> {
        &self.g_inv
    }

    /// Split a D x N log-abundance matrix into its (D-1) x N contrast part
    /// and 1 x N column-sum part.
    pub fn apply(&self, psi: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if psi.nrows() != self.f.ncols() {
            return Err(Error::dim(format!(
                "apply_contrast: psi has {} rows, maps built for {}",
                psi.nrows(),
                self.f.ncols()
            )));
        }
        Ok((&self.f * psi, &self.h * psi))
    }

    /// Reassemble a D x N matrix from its contrast and sum parts.
    pub fn reassemble(&self, par: &DMatrix<f64>, perp: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let dim = self.f.ncols();
        if par.nrows() != dim - 1 || perp.nrows() != 1 || par.ncols() != perp.ncols() {
            return Err(Error::dim("reassemble: block shapes do not match"));
        }
        let mut stacked = DMatrix::zeros(dim, par.ncols());
        stacked.view_mut((0, 0), (dim - 1, par.ncols())).copy_from(par);
        stacked.view_mut((dim - 1, 0), (1, par.ncols())).copy_from(perp);
        Ok(&self.g_inv * stacked)
    }
}

/// Plug-in discrepancy between the geometric-mean surrogate for the scale
/// and the stated log scale:
/// `log(g(control)/g(case)) - (logscale_case - logscale_control)`.
/// Zero means the geometric-mean identifying restriction is exact.
pub fn delta_discrepancy(
    logscale_case: f64,
    logscale_control: f64,
    comp_case: &Composition,
    comp_control: &Composition,
) -> Result<f64> {
    let g_case = geometric_mean(comp_case.values().as_slice())?;
    let g_control = geometric_mean(comp_control.values().as_slice())?;
    Ok((g_control / g_case).ln() - (logscale_case - logscale_control))
}

/// The linear system of the SparCC sparsity assumption: `Q omega = t` with
/// `Q` carrying `D-1` on the diagonal and 1 off it.
#[derive(Debug, Clone)]
pub struct SparccSystem {
    pub targets: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl SparccSystem {
    pub fn new(targets: &[f64]) -> Result<Self> {
        let dim = targets.len();
        if dim < 3 {
            return Err(Error::domain("sparcc: need at least 3 taxa"));
        }
        let q = DMatrix::from_fn(dim, dim, |i, j| if i == j { (dim - 1) as f64 } else { 1.0 });
        Ok(SparccSystem {
            targets: DVector::from_column_slice(targets),
            q,
        })
    }

    pub fn residual(&self, omega: &DVector<f64>) -> f64 {
        (&self.q * omega - &self.targets).norm()
    }
}

/// Solve the SparCC system for the basis variances. The solution is unique
/// because `Q = (D-2)I + J` is full rank for `D >= 2`.
pub fn sparcc_variance_solve(targets: &[f64]) -> Result<DVector<f64>> {
    let system = SparccSystem::new(targets)?;
    system
        .q
        .clone()
        .lu()
        .solve(&system.targets)
        .ok_or_else(|| Error::domain("sparcc: singular system"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn closure_examples() {
        let c = closure(&[2.0, 2.0, 2.0]).unwrap();
        for i in 0..3 {
            assert_relative_eq!(c.values()[i], 1.0 / 3.0, epsilon = 1e-12);
        }
        let c = closure(&[1.0, 3.0]).unwrap();
        assert_relative_eq!(c.values()[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(c.values()[1], 0.75, epsilon = 1e-12);
        assert!(closure(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn closure_idempotent() {
        let v = [0.3, 1.2, 7.7, 0.01];
        let once = closure(&v).unwrap();
        let twice = closure(once.values().as_slice()).unwrap();
        for i in 0..v.len() {
            assert_relative_eq!(once.values()[i], twice.values()[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn clr_examples() {
        let uniform = clr(&[1.0 / 3.0; 3]).unwrap();
        for v in uniform.iter() {
            assert_relative_eq!(*v, 0.0, epsilon = 1e-12);
        }
        let x = clr(&[0.5, 0.25, 0.25]).unwrap();
        assert_relative_eq!(x[0], 0.4621, epsilon = 1e-4);
        assert_relative_eq!(x[1], -0.2310, epsilon = 1e-4);
        assert_relative_eq!(x[2], -0.2310, epsilon = 1e-4);
        assert!(clr(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn geometric_mean_examples() {
        assert_relative_eq!(geometric_mean(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_relative_eq!(geometric_mean(&[1.0, 4.0]).unwrap(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(
            geometric_mean(&[2.0, 3.0, 5.0]).unwrap(),
            30.0_f64.powf(1.0 / 3.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn alr_examples() {
        let uniform = alr(&[0.25; 4]).unwrap();
        for v in uniform.iter() {
            assert_relative_eq!(*v, 0.0, epsilon = 1e-12);
        }
        let x = alr(&[0.5, 0.25, 0.25]).unwrap();
        assert_relative_eq!(x[0], 2.0f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(x[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn contrast_roundtrip() {
        let maps = ContrastMaps::new(4).unwrap();
        let psi = DMatrix::from_row_slice(4, 2, &[0.1, 1.0, -0.4, 2.0, 0.7, -1.0, 0.2, 0.5]);
        let (par, perp) = maps.apply(&psi).unwrap();
        let back = maps.reassemble(&par, &perp).unwrap();
        assert!((&back - &psi).norm() < 1e-10);
        // Column [1,1,1,...] has zero contrast part and sum D.
        let ones = DMatrix::from_element(4, 1, 1.0);
        let (par, perp) = maps.apply(&ones).unwrap();
        assert!(par.norm() < 1e-12);
        assert_relative_eq!(perp[(0, 0)], 4.0, epsilon = 1e-12);
        // F annihilates constants.
        assert!((&maps.f * DVector::from_element(4, 1.0)).norm() < 1e-12);
    }

    #[test]
    fn delta_examples() {
        let c = closure(&[1.0, 2.0, 3.0]).unwrap();
        assert_relative_eq!(delta_discrepancy(0.5, 0.5, &c, &c).unwrap(), 0.0, epsilon = 1e-12);
        // g ratio e^{0.3}, scale log-ratio 0.2 -> 0.1.
        let base = closure(&[1.0, 1.0]).unwrap();
        let scaled = closure(&[(-0.3f64).exp(), (-0.3f64).exp()]).unwrap();
        // closure removes the common factor; instead build the g ratio from
        // unclosed vectors through the scale-invariant definition.
        let _ = scaled;
        let control = closure(&[2.0, 0.5]).unwrap(); // g = 1
        let case_g = (0.3f64).exp();
        let case = closure(&[2.0 / case_g, 0.5 / case_g]).unwrap();
        // closure(c*v) == closure(v), so encode the g ratio with an
        // asymmetric case composition instead.
        let _ = (base, control, case);
        let comp_control = closure(&[4.0, 1.0]).unwrap(); // g(comp) = 2/5... compute directly
        let g_control = geometric_mean(comp_control.values().as_slice()).unwrap();
        // pick comp_case with g(comp_case) = g_control * e^{-0.3}
        let comp_case = {
            // two-part composition [p, 1-p]: g = sqrt(p(1-p)); solve for p.
            let target = g_control * (-0.3f64).exp();
            let disc = (1.0 - 4.0 * target * target).sqrt();
            closure(&[(1.0 + disc) / 2.0, (1.0 - disc) / 2.0]).unwrap()
        };
        let d = delta_discrepancy(0.2, 0.0, &comp_case, &comp_control).unwrap();
        assert_relative_eq!(d, 0.1, epsilon = 1e-10);
    }

    #[test]
    fn delta_antisymmetric() {
        let a = closure(&[1.0, 2.0, 7.0]).unwrap();
        let b = closure(&[3.0, 1.0, 1.0]).unwrap();
        let d1 = delta_discrepancy(0.4, 0.1, &a, &b).unwrap();
        let d2 = delta_discrepancy(0.1, 0.4, &b, &a).unwrap();
        assert_relative_eq!(d1, -d2, epsilon = 1e-12);
    }

    #[test]
    fn sparcc_examples() {
        let sym = sparcc_variance_solve(&[4.0, 4.0, 4.0]).unwrap();
        for v in sym.iter() {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-10);
        }
        let asym = sparcc_variance_solve(&[5.0, 4.0, 4.0]).unwrap();
        assert_relative_eq!(asym[0], 1.75, epsilon = 1e-10);
        assert_relative_eq!(asym[1], 0.75, epsilon = 1e-10);
        assert_relative_eq!(asym[2], 0.75, epsilon = 1e-10);
        assert!(sparcc_variance_solve(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn sparcc_solution_unique() {
        let targets = [5.0, 4.0, 4.0];
        let system = SparccSystem::new(&targets).unwrap();
        let omega = sparcc_variance_solve(&targets).unwrap();
        assert!(system.residual(&omega) < 1e-10);
        let mut perturbed = omega.clone();
        perturbed[0] += 1e-3;
        assert!(system.residual(&perturbed) > 1e-4);
    }

    proptest! {
        #[test]
        fn clr_alr_scale_invariance(
            v in proptest::collection::vec(0.01f64..100.0, 2..8),
            c in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            let (a, b) = (clr(&v).unwrap(), clr(&scaled).unwrap());
            for i in 0..v.len() {
                prop_assert!((a[i] - b[i]).abs() < 1e-10);
            }
            let (a, b) = (alr(&v).unwrap(), alr(&scaled).unwrap());
            for i in 0..v.len() - 1 {
                prop_assert!((a[i] - b[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn clr_sums_to_zero(v in proptest::collection::vec(0.01f64..100.0, 2..8)) {
            prop_assert!(clr(&v).unwrap().sum().abs() < 1e-10);
        }

        #[test]
        fn alr_roundtrip(v in proptest::collection::vec(0.01f64..100.0, 2..8)) {
            let comp = closure(&v).unwrap();
            let back = alr_inv(alr(comp.values().as_slice()).unwrap().as_slice());
            for i in 0..v.len() {
                prop_assert!((comp.values()[i] - back.values()[i]).abs() < 1e-10);
            }
        }

        #[test]
        fn contrast_identity(dim in 2usize..7) {
            let maps = ContrastMaps::new(dim).unwrap();
            let ident = &maps.g * maps.g_inv();
            prop_assert!((ident - DMatrix::<f64>::identity(dim, dim)).norm() < 1e-12);
        }
    }
}
