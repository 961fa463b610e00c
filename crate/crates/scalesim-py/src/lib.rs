//! Python bindings: count tables, scale models (as JSON), the
//! Dirichlet-multinomial pipeline, decision tables, and the core
//! log-ratio utilities.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use scalesim::decisions::SignificanceMode;
use scalesim::io;
use scalesim::numkit::Stream;
use scalesim::scale_models::ScaleModel;
use scalesim::{aldex, coda, studies, Error};
use std::path::PathBuf;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<SignificanceMode> {
    match mode {
        "test" => Ok(SignificanceMode::TestBased),
        "interval" => Ok(SignificanceMode::CredibleInterval),
        other => Err(PyValueError::new_err(format!(
            "mode must be 'test' or 'interval', got '{other}'"
        ))),
    }
}

/// A taxa-by-samples count table with per-sample condition labels.
#[pyclass(name = "CountTable", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCountTable {
    inner: io::CountTable,
}

#[pymethods]
impl PyCountTable {
    /// Build from row-major counts (one row per taxon).
    #[new]
    fn new(
        counts: Vec<Vec<u64>>,
        taxa: Vec<String>,
        samples: Vec<String>,
        condition: Vec<bool>,
    ) -> PyResult<Self> {
        if counts.is_empty() || counts.iter().any(|r| r.len() != counts[0].len()) {
            return Err(PyValueError::new_err(
                "counts must be a nonempty rectangular list of rows",
            ));
        }
        let m = DMatrix::from_fn(counts.len(), counts[0].len(), |i, j| counts[i][j]);
        Ok(PyCountTable {
            inner: io::CountTable::new(m, taxa, samples, condition).map_err(to_py)?,
        })
    }

    /// Load from a counts CSV/TSV and a metadata CSV.
    #[staticmethod]
    fn load(counts_path: PathBuf, meta_path: PathBuf) -> PyResult<Self> {
        Ok(PyCountTable {
            inner: io::load_counts(&counts_path, &meta_path).map_err(to_py)?,
        })
    }

    #[getter]
    fn taxa(&self) -> Vec<String> {
        self.inner.taxa().to_vec()
    }

    #[getter]
    fn samples(&self) -> Vec<String> {
        self.inner.samples().to_vec()
    }

    #[getter]
    fn condition(&self) -> Vec<bool> {
        self.inner.condition_labels()
    }

    #[getter]
    fn num_taxa(&self) -> usize {
        self.inner.num_taxa()
    }

    #[getter]
    fn num_samples(&self) -> usize {
        self.inner.num_samples()
    }

    /// Counts as a row-major list of lists.
    fn counts(&self) -> Vec<Vec<u64>> {
        (0..self.inner.num_taxa())
            .map(|i| {
                (0..self.inner.num_samples())
                    .map(|j| self.inner.counts()[(i, j)])
                    .collect()
            })
            .collect()
    }
}

/// Per-taxon differential-abundance decisions.
#[pyclass(name = "DecisionTable")]
pub struct PyDecisionTable {
    taxa: Vec<String>,
    table: scalesim::decisions::DecisionTable,
}

#[pymethods]
impl PyDecisionTable {
    #[getter]
    fn taxa(&self) -> Vec<String> {
        self.taxa.clone()
    }

    #[getter]
    fn significant(&self) -> Vec<bool> {
        self.table.calls()
    }

    #[getter]
    fn lfc_mean(&self) -> Vec<f64> {
        self.table.taxa.iter().map(|t| t.lfc_mean).collect()
    }

    #[getter]
    fn effect_size(&self) -> Vec<f64> {
        self.table.taxa.iter().map(|t| t.effect_size).collect()
    }

    /// One dict per taxon with every decision field.
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let out = PyList::empty(py);
        for (name, t) in self.taxa.iter().zip(&self.table.taxa) {
            let d = PyDict::new(py);
            d.set_item("taxon", name)?;
            d.set_item("effect_size", t.effect_size)?;
            d.set_item("p_like", t.p_like)?;
            d.set_item("p_bh", t.p_bh)?;
            d.set_item("significant", t.significant)?;
            d.set_item("lfc_mean", t.lfc_mean)?;
            d.set_item("lfc_lo", t.lfc_lo)?;
            d.set_item("lfc_hi", t.lfc_hi)?;
            d.set_item("logit_ecdf0", t.logit_ecdf0)?;
            d.set_item("direction", format!("{:?}", t.direction).to_lowercase())?;
            out.append(d)?;
        }
        Ok(out)
    }
}

/// Closure (normalization to the unit simplex).
#[pyfunction]
fn closure(x: Vec<f64>) -> PyResult<Vec<f64>> {
    let c = coda::closure(&x).map_err(to_py)?;
    Ok(c.values().iter().cloned().collect())
}

/// Centered log-ratio transform of a positive vector.
#[pyfunction]
fn clr(x: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(coda::clr(&x).map_err(to_py)?.iter().cloned().collect())
}

/// Additive log-ratio transform (last component as reference).
#[pyfunction]
fn alr(x: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(coda::alr(&x).map_err(to_py)?.iter().cloned().collect())
}

/// Discrepancy between the geometric-mean scale surrogate and a stated
/// log scale change.
#[pyfunction]
fn delta_discrepancy(
    logscale_case: f64,
    logscale_control: f64,
    comp_case: Vec<f64>,
    comp_control: Vec<f64>,
) -> PyResult<f64> {
    let case = coda::closure(&comp_case).map_err(to_py)?;
    let control = coda::closure(&comp_control).map_err(to_py)?;
    coda::delta_discrepancy(logscale_case, logscale_control, &case, &control).map_err(to_py)
}

/// Run the Dirichlet-multinomial scale-simulation pipeline.
///
/// `scale_model` is the JSON form of a scale model variant, e.g.
/// `{"variant": "clr_restriction"}`.
#[pyfunction]
#[pyo3(signature = (table, scale_model, draws=128, seed=0, alpha_level=0.05, mode="test", gamma_prior=0.5))]
#[allow(clippy::too_many_arguments)]
fn run_aldex(
    table: &PyCountTable,
    scale_model: &str,
    draws: usize,
    seed: u64,
    alpha_level: f64,
    mode: &str,
    gamma_prior: f64,
) -> PyResult<PyDecisionTable> {
    let model: ScaleModel = serde_json::from_str(scale_model)
        .map_err(|e| PyValueError::new_err(format!("scale model JSON: {e}")))?;
    let gamma = vec![gamma_prior; table.inner.num_taxa()];
    let result = aldex::run_aldex_scale_sim(
        &table.inner,
        &gamma,
        &model,
        draws,
        &table.inner.condition_labels(),
        alpha_level,
        parse_mode(mode)?,
        &Stream::root(seed),
    )
    .map_err(to_py)?;
    Ok(PyDecisionTable {
        taxa: table.inner.taxa().to_vec(),
        table: result,
    })
}

/// Simulate the antibiotic scenario; returns (table, truth flags).
#[pyfunction]
#[pyo3(signature = (delta=0.1, n=50, seed=0))]
fn simulate_scenario(delta: f64, n: usize, seed: u64) -> PyResult<(PyCountTable, Vec<bool>)> {
    let scenario = studies::build_scenario(delta, seed)
        .map_err(to_py)?
        .with_n(n);
    let counts =
        studies::simulate_counts(&scenario, &mut Stream::root(seed).child(0).rng())
            .map_err(to_py)?;
    Ok((PyCountTable { inner: counts }, scenario.truth))
}

/// Summarize the effective scale implied by external per-taxon estimates;
/// returns (mean, lo, hi) of the central 95% interval.
#[pyfunction]
#[pyo3(signature = (theta_hat, se, draws=2000, seed=0))]
fn effective_scale(
    theta_hat: Vec<f64>,
    se: Vec<f64>,
    draws: usize,
    seed: u64,
) -> PyResult<(f64, f64, f64)> {
    let report =
        studies::effective_scale_report(&theta_hat, &se, draws, &Stream::root(seed))
            .map_err(to_py)?;
    Ok((report.mean, report.lo, report.hi))
}

/// Benjamini-Hochberg step-up adjustment.
#[pyfunction]
fn bh_adjust(p: Vec<f64>) -> Vec<f64> {
    scalesim::decisions::bh_adjust(&p)
}

#[pymodule]
fn scalesim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCountTable>()?;
    m.add_class::<PyDecisionTable>()?;
    m.add_function(wrap_pyfunction!(closure, m)?)?;
    m.add_function(wrap_pyfunction!(clr, m)?)?;
    m.add_function(wrap_pyfunction!(alr, m)?)?;
    m.add_function(wrap_pyfunction!(delta_discrepancy, m)?)?;
    m.add_function(wrap_pyfunction!(run_aldex, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(effective_scale, m)?)?;
    m.add_function(wrap_pyfunction!(bh_adjust, m)?)?;
    Ok(())
}
