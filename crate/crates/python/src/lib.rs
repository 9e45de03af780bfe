//! Python bindings for the geoextremes core.

use std::path::PathBuf;

use geoextremes::fit::{fit_geometric_model, TgFitOptions};
use geoextremes::geometry::{self, GaugeParams};
use geoextremes::ingest::{Coord, GridDataset};
use geoextremes::pipeline::{Pipeline, PipelineConfig};
use geoextremes::synthetic::{self, SyntheticKind, SyntheticSpec};
use geoextremes::{estimate, simulate};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: geoextremes::Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(format!("{} ({})", e, e.kind())),
    }
}

fn coords_of(pairs: Vec<(f64, f64)>) -> Vec<Coord> {
    pairs.into_iter().map(|(x, y)| [x, y]).collect()
}

fn flatten(rows: &[Vec<f64>]) -> PyResult<(Vec<f64>, usize)> {
    let d = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok((rows.concat(), d))
}

/// A gridded daily dataset, `n_times` rows by `n_sites` columns.
#[pyclass(name = "Dataset", module = "geoextremes")]
struct PyDataset {
    inner: GridDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (sites, rows, run_id=1))]
    fn new(sites: Vec<(f64, f64)>, rows: Vec<Vec<f64>>, run_id: i64) -> PyResult<Self> {
        let (values, _) = flatten(&rows)?;
        let times = (0..rows.len() as i64).collect();
        GridDataset::new(run_id, coords_of(sites), times, values)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, run_id=1))]
    fn load(path: PathBuf, run_id: i64) -> PyResult<Self> {
        geoextremes::ingest::load_dataset(&path, run_id)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn n_times(&self) -> usize {
        self.inner.n_times()
    }

    #[getter]
    fn n_sites(&self) -> usize {
        self.inner.n_sites()
    }

    #[getter]
    fn sites(&self) -> Vec<(f64, f64)> {
        self.inner.sites.iter().map(|c| (c[0], c[1])).collect()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.rows().map(<[f64]>::to_vec).collect()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(run_id={}, n_times={}, n_sites={})", self.inner.run_id, self.inner.n_times(), self.inner.n_sites())
    }
}

/// Gauge `g(w) = [(w^(1/gamma))' S^-1 w^(1/gamma)]^(gamma/2)` with a
/// powered-exponential `S` over `coords`.
#[pyclass(name = "Gauge", module = "geoextremes")]
struct PyGauge {
    inner: geometry::Gauge,
}

#[pymethods]
impl PyGauge {
    #[new]
    fn new(coords: Vec<(f64, f64)>, phi: f64, kappa: f64, gamma: f64) -> PyResult<Self> {
        geometry::Gauge::from_coords(&coords_of(coords), phi, kappa, gamma)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn __call__(&self, w: Vec<f64>) -> PyResult<f64> {
        if w.len() != self.inner.dim() {
            return Err(PyValueError::new_err(format!("expected {} components, got {}", self.inner.dim(), w.len())));
        }
        Ok(self.inner.eval(&w))
    }
}

/// Truncated-gamma geometric model.
#[pyclass(name = "Model", module = "geoextremes")]
struct PyModel {
    inner: geometry::GeometricModel,
}

impl PyModel {
    fn check(&self, w: &[f64]) -> PyResult<()> {
        let d = self.inner.params.dim();
        if w.len() != d {
            return Err(PyValueError::new_err(format!("expected {d} components, got {}", w.len())));
        }
        Ok(())
    }
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (coords, lam, phi, kappa, gamma, c_tau, tau=0.8, threshold_phi=None, threshold_kappa=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        coords: Vec<(f64, f64)>,
        lam: f64,
        phi: f64,
        kappa: f64,
        gamma: f64,
        c_tau: f64,
        tau: f64,
        threshold_phi: Option<f64>,
        threshold_kappa: Option<f64>,
    ) -> PyResult<Self> {
        GaugeParams {
            lambda: lam,
            phi,
            kappa,
            gamma,
            c_tau,
            tau,
            threshold_phi: threshold_phi.unwrap_or(phi),
            threshold_kappa: threshold_kappa.unwrap_or(kappa),
            dplane_coords: coords_of(coords),
        }
        .compile()
        .map(|inner| Self { inner })
        .map_err(py_err)
    }

    /// `(lambda, phi, kappa, gamma, c_tau)`.
    #[getter]
    fn params(&self) -> (f64, f64, f64, f64, f64) {
        let p = &self.inner.params;
        (p.lambda, p.phi, p.kappa, p.gamma, p.c_tau)
    }

    fn g(&self, w: Vec<f64>) -> PyResult<f64> {
        self.check(&w)?;
        Ok(self.inner.g(&w))
    }

    fn threshold(&self, w: Vec<f64>) -> PyResult<f64> {
        self.check(&w)?;
        Ok(self.inner.threshold(&w))
    }

    /// Log survival of the untruncated gamma law of `R | W = w` at `r`.
    fn ln_sf(&self, w: Vec<f64>, r: f64) -> PyResult<f64> {
        self.check(&w)?;
        Ok(self.inner.ln_sf(&w, r))
    }

    /// `n` draws of `R | W = w, R > k r_tau(w)`.
    #[pyo3(signature = (w, k, n, seed=0))]
    fn sample_radius(&self, w: Vec<f64>, k: f64, n: usize, seed: u64) -> PyResult<Vec<f64>> {
        self.check(&w)?;
        let mut rng = simulate::task_rng(seed, 0);
        (0..n)
            .map(|_| simulate::sample_radius(&w, k, &self.inner, &mut rng).map_err(py_err))
            .collect()
    }
}

#[pyfunction]
#[pyo3(signature = (kind, d, n, seed=0, phi=1.0, kappa=1.5))]
fn generate_synthetic(kind: &str, d: usize, n: usize, seed: u64, phi: f64, kappa: f64) -> PyResult<PyDataset> {
    let kind = match kind {
        "meta-gaussian" => SyntheticKind::MetaGaussian,
        "independent-exp" => SyntheticKind::IndependentExp,
        "comonotone" => SyntheticKind::Comonotone,
        "known-gauge" => SyntheticKind::KnownGaugeRejection,
        other => return Err(PyValueError::new_err(format!("unknown synthetic kind `{other}`"))),
    };
    synthetic::generate(&SyntheticSpec::new(kind, d, n, seed).with_correlation(phi, kappa))
        .map(|inner| PyDataset { inner })
        .map_err(py_err)
}

/// Regular-grid coordinates used for synthetic fixtures of dimension `d`.
#[pyfunction]
fn synthetic_coords(d: usize) -> Vec<(f64, f64)> {
    synthetic::synthetic_coords(d).into_iter().map(|c| (c[0], c[1])).collect()
}

/// Returns `(c_tau, exceed_fraction)`.
#[pyfunction]
fn calibrate_c_tau(radii: Vec<f64>, g_values: Vec<f64>, tau: f64) -> PyResult<(f64, f64)> {
    let c = geometry::calibrate_c_tau(&radii, &g_values, tau).map_err(py_err)?;
    Ok((c.c_tau, c.exceed_fraction))
}

/// Pairwise then full truncated-gamma fit on exponential-margin data.
#[pyfunction]
#[pyo3(signature = (data, coords=None, tau=0.8, seed=0))]
fn fit<'py>(
    py: Python<'py>,
    data: &PyDataset,
    coords: Option<Vec<(f64, f64)>>,
    tau: f64,
    seed: u64,
) -> PyResult<(PyModel, Bound<'py, PyDict>)> {
    let coords = coords.map(coords_of).unwrap_or_else(|| data.inner.sites.clone());
    let (pairwise, _, fitted) = py
        .detach(|| fit_geometric_model(&data.inner, &coords, tau, &TgFitOptions { seed, ..Default::default() }))
        .map_err(py_err)?;
    let model = fitted.params.compile().map_err(py_err)?;
    let info = PyDict::new(py);
    let p = &fitted.params;
    info.set_item("lambda", p.lambda)?;
    info.set_item("phi", p.phi)?;
    info.set_item("kappa", p.kappa)?;
    info.set_item("gamma", p.gamma)?;
    info.set_item("c_tau", p.c_tau)?;
    info.set_item("loglik", fitted.loglik)?;
    info.set_item("n_exceedances", fitted.n_exceedances)?;
    info.set_item("pairwise_phi", pairwise.phi)?;
    info.set_item("pairwise_kappa", pairwise.kappa)?;
    info.set_item("converged", fitted.convergence.converged)?;
    Ok((PyModel { inner: model }, info))
}

/// `P(at least m of d components exceed q)` by inclusion-exclusion.
#[pyfunction]
fn inclusion_exclusion_oracle(sample: Vec<Vec<f64>>, q: Vec<f64>, m: usize) -> PyResult<f64> {
    let (flat, d) = flatten(&sample)?;
    estimate::inclusion_exclusion_oracle(&flat, d, &q, m).map_err(py_err)
}

/// The same probability by direct indicator counting.
#[pyfunction]
fn direct_count_probability(sample: Vec<Vec<f64>>, q: Vec<f64>, m: usize) -> PyResult<f64> {
    let (flat, d) = flatten(&sample)?;
    estimate::direct_count_probability(&flat, d, &q, m).map_err(py_err)
}

/// Runs every stage for every run in the config and writes the report.
/// Returns `(stage, run_id, status)` per stage.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config: PathBuf) -> PyResult<Vec<(String, Option<i64>, String)>> {
    let cfg = PipelineConfig::load(&config).map_err(py_err)?;
    let outcomes = py.detach(|| -> Result<_, String> {
        let pl = Pipeline::new(cfg).map_err(|e| e.record().to_string())?;
        let out = pl.run_all(None).map_err(|e| e.record().to_string())?;
        pl.report().map_err(|e| e.record().to_string())?;
        Ok(out)
    });
    let outcomes = outcomes.map_err(PyRuntimeError::new_err)?;
    Ok(outcomes
        .into_iter()
        .map(|o| (o.stage.name().to_string(), o.run_id, format!("{:?}", o.status).to_lowercase()))
        .collect())
}

#[pymodule]
#[pyo3(name = "geoextremes")]
fn geoextremes_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyGauge>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_coords, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_c_tau, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(inclusion_exclusion_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(direct_count_probability, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
