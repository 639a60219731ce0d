//! Python bindings. Matrices cross the boundary as lists of rows.

use dynuq::dmd::{self, DmdModel, HodmdModel};
use dynuq::ppgp::{self, ChainConfig, FitConfig, IdentityInput, MeanEstimate, PpgpModel};
use dynuq::stochastics::{gen_lorenz96, Lorenz96Config};
use dynuq::{Error, ForecastResult, InputMatrix, KernelFamily, KernelSpec, KernelStructure};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Rows) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn structure(name: &str) -> PyResult<KernelStructure> {
    match name {
        "product" => Ok(KernelStructure::Product),
        "isotropic" => Ok(KernelStructure::Isotropic),
        other => Err(PyValueError::new_err(format!("unknown kernel structure {other:?}"))),
    }
}

/// Simulates Lorenz 96; returns `(states, derivatives)`, each m × (steps + 1).
#[pyfunction]
#[pyo3(signature = (m=40, forcing=8.0, h=0.01, steps=1000, seed=0))]
fn lorenz96(m: usize, forcing: f64, h: f64, steps: usize, seed: u64) -> PyResult<(Rows, Rows)> {
    let run = gen_lorenz96(&Lorenz96Config { m, forcing, h, steps, seed }).map_err(to_py)?;
    Ok((rows(&run.states), rows(&run.derivs)))
}

/// Forecast mean and interval bounds, m × horizon.
#[pyclass(name = "Forecast")]
pub struct PyForecast(ForecastResult);

#[pymethods]
impl PyForecast {
    #[getter]
    fn mean(&self) -> Rows {
        rows(&self.0.mean)
    }

    #[getter]
    fn lower(&self) -> Rows {
        rows(&self.0.lower)
    }

    #[getter]
    fn upper(&self) -> Rows {
        rows(&self.0.upper)
    }

    #[getter]
    fn level(&self) -> f64 {
        self.0.level
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.0.warnings.clone()
    }

    /// RMSE, coverage, average interval length and held-out std.
    fn evaluate<'py>(&self, py: Python<'py>, truth: Rows) -> PyResult<Bound<'py, PyDict>> {
        let r = dynuq::metrics::evaluate(&self.0, &matrix(truth)?).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("rmse", r.rmse)?;
        d.set_item("coverage", r.coverage)?;
        d.set_item("avg_length", r.avg_length)?;
        d.set_item("heldout_std", r.heldout_std)?;
        d.set_item("level", r.level)?;
        Ok(d)
    }
}

#[pyclass(name = "Ppgp")]
pub struct PyPpgp(PpgpModel);

#[pymethods]
impl PyPpgp {
    /// Fits range and nugget by marginal posterior maximization. `inputs` is
    /// p × n, `outputs` is m × n.
    #[staticmethod]
    #[pyo3(signature = (inputs, outputs, structure="product", nugget_zero=false, restarts=3, seed=0))]
    fn fit(
        inputs: Rows,
        outputs: Rows,
        structure: &str,
        nugget_zero: bool,
        restarts: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let x = InputMatrix::new(matrix(inputs)?).map_err(to_py)?;
        let kind = self::structure(structure)?;
        let ranges = match kind {
            KernelStructure::Isotropic => vec![1.0],
            KernelStructure::Product => vec![1.0; x.dim()],
        };
        let template = KernelSpec::new(KernelFamily::Matern25, kind, ranges, 0.0).map_err(to_py)?;
        let cfg = FitConfig { fix_nugget_zero: nugget_zero, restarts, seed, ..Default::default() };
        ppgp::fit_ppgp(x, matrix(outputs)?, &template, &cfg).map(PyPpgp).map_err(to_py)
    }

    /// Builds the emulator at fixed Matérn 2.5 parameters.
    #[staticmethod]
    #[pyo3(signature = (inputs, outputs, ranges, nugget=0.0, structure="product", zero_mean=false))]
    fn with_params(
        inputs: Rows,
        outputs: Rows,
        ranges: Vec<f64>,
        nugget: f64,
        structure: &str,
        zero_mean: bool,
    ) -> PyResult<Self> {
        let x = InputMatrix::new(matrix(inputs)?).map_err(to_py)?;
        let spec = KernelSpec::new(KernelFamily::Matern25, self::structure(structure)?, ranges, nugget).map_err(to_py)?;
        let mean = if zero_mean { MeanEstimate::Zero } else { MeanEstimate::Gls };
        PpgpModel::with_params(x, matrix(outputs)?, spec, mean).map(PyPpgp).map_err(to_py)
    }

    #[getter]
    fn ranges(&self) -> Vec<f64> {
        self.0.spec().ranges.clone()
    }

    #[getter]
    fn nugget(&self) -> f64 {
        self.0.spec().nugget
    }

    /// Predictive `(location, lower, upper)` per output coordinate at one input.
    #[pyo3(signature = (x, level=0.95))]
    fn predict(&self, x: Vec<f64>, level: f64) -> PyResult<Vec<(f64, f64, f64)>> {
        let preds = self.0.predict(&x).map_err(to_py)?;
        Ok(preds
            .iter()
            .map(|p| {
                let (lo, hi) = p.interval(level);
                (p.location, lo, hi)
            })
            .collect())
    }

    /// Chain forecast of a one-step transition emulator from state `y_n`.
    #[pyo3(signature = (y_n, horizon, chains=100, level=0.95, seed=0))]
    fn forecast_transition(
        &self,
        y_n: Vec<f64>,
        horizon: usize,
        chains: usize,
        level: f64,
        seed: u64,
    ) -> PyResult<PyForecast> {
        let cfg = ChainConfig { horizon, chains, level, seed, ..Default::default() };
        ppgp::forecast_chains(&self.0, &[DVector::from_vec(y_n)], &IdentityInput, &cfg)
            .map(PyForecast)
            .map_err(to_py)
    }
}

#[pyclass(name = "Dmd")]
pub struct PyDmd(DmdModel);

#[pymethods]
impl PyDmd {
    /// Exact DMD of an m × n snapshot matrix.
    #[staticmethod]
    #[pyo3(signature = (snapshots, energy=0.99, rank=None))]
    fn fit(snapshots: Rows, energy: f64, rank: Option<usize>) -> PyResult<Self> {
        dmd::fit_dmd(&matrix(snapshots)?, energy, rank).map(PyDmd).map_err(to_py)
    }

    #[getter]
    fn rank(&self) -> usize {
        self.0.rank
    }

    #[getter]
    fn tau2(&self) -> f64 {
        self.0.tau2_hat
    }

    /// The dense m × m operator.
    fn operator(&self) -> Rows {
        rows(&self.0.operator_dense())
    }

    #[pyo3(signature = (y_n, horizon, level=0.95))]
    fn forecast(&self, y_n: Vec<f64>, horizon: usize, level: f64) -> PyResult<PyForecast> {
        dmd::forecast_dmd_intervals(&self.0, &DVector::from_vec(y_n), horizon, level)
            .map(PyForecast)
            .map_err(to_py)
    }
}

#[pyclass(name = "Hodmd")]
pub struct PyHodmd(HodmdModel);

#[pymethods]
impl PyHodmd {
    #[staticmethod]
    #[pyo3(signature = (snapshots, d=6, delta_t=3, energy=0.99, rank=None))]
    fn fit(snapshots: Rows, d: usize, delta_t: usize, energy: f64, rank: Option<usize>) -> PyResult<Self> {
        dmd::fit_hodmd(&matrix(snapshots)?, d, delta_t, energy, rank).map(PyHodmd).map_err(to_py)
    }

    #[getter]
    fn rank(&self) -> usize {
        self.0.inner.rank
    }

    /// Forecast from the `d` most recent snapshots (m × d, oldest first).
    #[pyo3(signature = (recent, horizon, level=0.95))]
    fn forecast(&self, recent: Rows, horizon: usize, level: f64) -> PyResult<PyForecast> {
        dmd::forecast_hodmd(&self.0, &matrix(recent)?, horizon, level)
            .map(PyForecast)
            .map_err(to_py)
    }
}

#[pymodule]
fn dynuq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(lorenz96, m)?)?;
    m.add_class::<PyForecast>()?;
    m.add_class::<PyPpgp>()?;
    m.add_class::<PyDmd>()?;
    m.add_class::<PyHodmd>()?;
    Ok(())
}
