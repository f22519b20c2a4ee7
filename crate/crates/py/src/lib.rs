use std::collections::BTreeMap;
use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hybridcat::analysis::{self, Region, SearchOptions, Target, TrappingOptions};
use hybridcat::compose;
use hybridcat::exec::{self, ExecutionTrace, SimConfig};
use hybridcat::expr::{self, Expr};
use hybridcat::gallery;
use hybridcat::graph::VertexId;
use hybridcat::morphism::{self, Semiconjugacy};
use hybridcat::system::{self, HybridPoint, HybridSystem, SystemError};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Serialize a report and hand it to Python as plain dicts and lists.
fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn sim_config(horizon: f64, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<SimConfig> {
    let mut cfg = SimConfig { horizon, ..Default::default() };
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            match k.extract::<String>()?.as_str() {
                "dt_max" => cfg.dt_max = v.extract()?,
                "event_tol" => cfg.event_tol = v.extract()?,
                "max_jumps" => cfg.max_jumps = v.extract()?,
                "min_dwell" => cfg.min_dwell = v.extract()?,
                other => return Err(err(format!("unknown simulation option {other}"))),
            }
        }
    }
    Ok(cfg)
}

#[pyclass(name = "Expr", frozen)]
struct PyExpr {
    inner: Expr,
    dim: usize,
}

#[pymethods]
impl PyExpr {
    #[new]
    fn new(text: &str, dim: usize) -> PyResult<Self> {
        Ok(PyExpr { inner: expr::parse_expr(text, dim).map_err(err)?, dim })
    }

    #[pyo3(signature = (x, params=None))]
    fn eval(&self, x: Vec<f64>, params: Option<BTreeMap<String, f64>>) -> PyResult<f64> {
        self.inner.eval(&x, &params.unwrap_or_default()).map_err(err)
    }

    #[pyo3(signature = (x, params=None))]
    fn gradient(&self, x: Vec<f64>, params: Option<BTreeMap<String, f64>>) -> PyResult<Vec<f64>> {
        self.inner.gradient(&x, &params.unwrap_or_default()).map_err(err)
    }

    fn diff(&self, var: usize) -> PyResult<PyExpr> {
        Ok(PyExpr { inner: self.inner.diff(var).map_err(err)?, dim: self.dim })
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Expr({:?}, dim={})", self.inner.to_string(), self.dim)
    }

    fn __eq__(&self, other: &PyExpr) -> bool {
        self.inner == other.inner
    }
}

#[pyclass(name = "HybridSystem", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySystem {
    inner: Arc<HybridSystem>,
}

#[pymethods]
impl PySystem {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PySystem { inner: Arc::new(HybridSystem::from_json(text).map_err(err)?) })
    }

    #[staticmethod]
    #[pyo3(signature = (name, **params))]
    fn gallery(name: &str, params: Option<BTreeMap<String, f64>>) -> PyResult<Self> {
        Ok(PySystem { inner: Arc::new(gallery::build(name, &params.unwrap_or_default()).map_err(err)?) })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn modes(&self) -> Vec<String> {
        self.inner.modes().keys().map(|v| v.to_string()).collect()
    }

    /// `(id, src, tgt)` triples.
    #[getter]
    fn edges(&self) -> Vec<(String, String, String)> {
        self.inner.edges().iter().map(|(e, r)| (e.to_string(), r.src.to_string(), r.tgt.to_string())).collect()
    }

    #[getter]
    fn params(&self) -> BTreeMap<String, f64> {
        self.inner.params().clone()
    }

    #[getter]
    fn eq_tol(&self) -> f64 {
        self.inner.eq_tol()
    }

    fn dim(&self, mode: &str) -> PyResult<usize> {
        self.inner.dim(&VertexId::new(mode)).ok_or_else(|| err(format!("unknown mode {mode}")))
    }

    #[pyo3(signature = (samples=1000, seed=0))]
    fn validate<'py>(&self, py: Python<'py>, samples: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &system::validate_system(&self.inner, samples, seed))
    }

    #[pyo3(signature = (samples=1000, seed=0))]
    fn check_determinism<'py>(&self, py: Python<'py>, samples: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &system::check_determinism(&self.inner, samples, seed))
    }

    #[pyo3(signature = (mode, x, horizon=10.0, **options))]
    fn simulate(&self, mode: &str, x: Vec<f64>, horizon: f64, options: Option<&Bound<'_, PyDict>>) -> PyResult<PyTrace> {
        let cfg = sim_config(horizon, options)?;
        let tr = exec::simulate(&self.inner, &HybridPoint::new(mode, x), &cfg).map_err(err)?;
        Ok(PyTrace { inner: tr })
    }

    /// Search for an (eps, t)-chain into the target modes; `None` when the
    /// budget runs out.
    #[pyo3(signature = (mode, x, targets, eps=0.05, t=1.0, budget=10000, max_time=50.0))]
    #[allow(clippy::too_many_arguments)]
    fn chain_search<'py>(
        &self,
        py: Python<'py>,
        mode: &str,
        x: Vec<f64>,
        targets: Vec<String>,
        eps: f64,
        t: f64,
        budget: usize,
        max_time: f64,
    ) -> PyResult<Option<Bound<'py, PyAny>>> {
        let target = Target::modes(targets.iter().map(VertexId::new));
        let opts = SearchOptions { budget, max_time, ..Default::default() };
        let out = analysis::chain_search(&self.inner, &HybridPoint::new(mode, x), &target, eps, t, &opts).map_err(err)?;
        match out.chain() {
            Some(c) => {
                let v: serde_json::Value = serde_json::from_str(&c.to_json()).map_err(err)?;
                Ok(Some(to_py(py, &v)?))
            }
            None => Ok(None),
        }
    }

    /// Trapping-region check for `W = {margin >= 0}` given per mode.
    #[pyo3(signature = (margins, samples=500, horizon=50.0, t_bound=25.0, seed=0))]
    fn check_trapping<'py>(
        &self,
        py: Python<'py>,
        margins: BTreeMap<String, String>,
        samples: usize,
        horizon: f64,
        t_bound: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let pairs: Vec<(&str, &str)> = margins.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let w = Region::parse(&self.inner, &pairs).map_err(err)?;
        let opts = TrappingOptions { samples, horizon, t_bound, seed, ..Default::default() };
        to_py(py, &analysis::check_trapping_region(&self.inner, &w, &opts))
    }

    fn __repr__(&self) -> String {
        format!("HybridSystem(modes={:?}, edges={})", self.modes(), self.inner.edges().len())
    }
}

#[pyclass(name = "Semiconjugacy", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMap {
    inner: Semiconjugacy,
}

#[pymethods]
impl PyMap {
    /// A map file whose `dom`/`cod` are inline systems.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(err)?;
        let none = |name: &str| -> Result<HybridSystem, SystemError> {
            Err(SystemError::Format(format!("unresolved system reference {name}")))
        };
        Ok(PyMap { inner: Semiconjugacy::from_value(&v, &none).map_err(err)? })
    }

    #[staticmethod]
    fn identity(h: &PySystem) -> Self {
        PyMap { inner: Semiconjugacy::identity(h.inner.clone()) }
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner.to_value()).map_err(err)
    }

    #[getter]
    fn dom(&self) -> PySystem {
        PySystem { inner: self.inner.dom().clone() }
    }

    #[getter]
    fn cod(&self) -> PySystem {
        PySystem { inner: self.inner.cod().clone() }
    }

    fn apply(&self, mode: &str, x: Vec<f64>) -> PyResult<(String, Vec<f64>)> {
        let p = self.inner.apply(&HybridPoint::new(mode, x)).map_err(err)?;
        Ok((p.mode.to_string(), p.x))
    }

    /// `self ∘ inner`.
    fn after(&self, inner: &PyMap) -> PyResult<PyMap> {
        Ok(PyMap { inner: morphism::compose_semiconjugacies(&self.inner, &inner.inner).map_err(err)? })
    }

    #[pyo3(signature = (samples=200, tol=1e-8, seed=0))]
    fn validate<'py>(&self, py: Python<'py>, samples: usize, tol: f64, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &morphism::validate_semiconjugacy(&self.inner, samples, tol, seed))
    }

    fn push(&self, trace: &PyTrace) -> PyResult<PyTrace> {
        Ok(PyTrace { inner: exec::push_trace(&self.inner, &trace.inner).map_err(err)? })
    }
}

#[pyclass(name = "Trace", frozen)]
struct PyTrace {
    inner: ExecutionTrace,
}

#[pymethods]
impl PyTrace {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyTrace { inner: ExecutionTrace::from_json(text).map_err(err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    #[getter]
    fn stop_time(&self) -> f64 {
        self.inner.stop_time()
    }

    #[getter]
    fn final_point(&self) -> (String, Vec<f64>) {
        let p = self.inner.final_point();
        (p.mode.to_string(), p.x)
    }

    #[getter]
    fn jump_times(&self) -> Vec<f64> {
        self.inner.jumps.iter().map(|j| j.time).collect()
    }

    /// `(mode, times, states)` per segment.
    #[getter]
    fn segments(&self) -> Vec<(String, Vec<f64>, Vec<Vec<f64>>)> {
        self.inner
            .segments
            .iter()
            .map(|s| (s.mode.to_string(), s.samples.iter().map(|p| p.t).collect(), s.samples.iter().map(|p| p.x.clone()).collect()))
            .collect()
    }

    #[getter]
    fn classification<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.classification)
    }

    fn fundamentalize(&self) -> PyTrace {
        PyTrace { inner: exec::fundamentalize(&self.inner) }
    }

    fn distance(&self, other: &PyTrace) -> f64 {
        exec::trace_distance(&self.inner, &other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.segments.len()
    }
}

#[pyfunction]
fn product(a: &PySystem, b: &PySystem) -> PyResult<(PySystem, PyMap, PyMap)> {
    let (p, p1, p2) = compose::product(&a.inner, &b.inner).map_err(err)?;
    Ok((PySystem { inner: p }, PyMap { inner: p1 }, PyMap { inner: p2 }))
}

#[pyfunction]
fn coproduct(a: &PySystem, b: &PySystem) -> PyResult<(PySystem, PyMap, PyMap)> {
    let (s, i1, i2) = compose::coproduct(&a.inner, &b.inner).map_err(err)?;
    Ok((PySystem { inner: s }, PyMap { inner: i1 }, PyMap { inner: i2 }))
}

/// Slice `mode` along `{cut = 0}`; returns the subdivided system and its map
/// onto `h`.
#[pyfunction]
#[pyo3(signature = (h, mode, cut, seed=0))]
fn slice_mode(h: &PySystem, mode: &str, cut: &str, seed: u64) -> PyResult<(PySystem, PyMap)> {
    let v = VertexId::new(mode);
    let dim = h.inner.dim(&v).ok_or_else(|| err(format!("unknown mode {mode}")))?;
    let cut = expr::parse_expr(cut, dim).map_err(err)?;
    let sub = compose::slice_mode(&h.inner, &v, &cut, seed).map_err(err)?;
    Ok((PySystem { inner: sub.system().clone() }, PyMap { inner: sub.map.clone() }))
}

/// Lift a trace of `h` through the subdivision produced by [`slice_mode`].
#[pyfunction]
#[pyo3(signature = (h, mode, cut, trace, seed=0))]
fn pullback_sliced(h: &PySystem, mode: &str, cut: &str, trace: &PyTrace, seed: u64) -> PyResult<PyTrace> {
    let v = VertexId::new(mode);
    let dim = h.inner.dim(&v).ok_or_else(|| err(format!("unknown mode {mode}")))?;
    let cut = expr::parse_expr(cut, dim).map_err(err)?;
    let sub = compose::slice_mode(&h.inner, &v, &cut, seed).map_err(err)?;
    Ok(PyTrace { inner: exec::pullback_execution(&sub, &trace.inner).map_err(err)? })
}

/// The sequential composite of the two gallery directed systems.
#[pyfunction]
fn sequential_example() -> PyResult<PySystem> {
    let (h, k) = gallery::sequential_example_pair();
    Ok(PySystem { inner: compose::sequential_compose(&h, &k).map_err(err)?.carrier })
}

/// The eight maps of the hopper diagram, keyed by name.
#[pyfunction]
#[pyo3(signature = (k_t=2.0, beta=0.5, omega=1.0))]
fn hopper_maps(k_t: f64, beta: f64, omega: f64) -> PyResult<BTreeMap<String, PyMap>> {
    let suite = gallery::vertical_hopper_suite(gallery::HopperParams { k_t, beta, omega }).map_err(err)?;
    Ok(suite.maps().into_iter().map(|(n, m)| (n.to_string(), PyMap { inner: m.clone() })).collect())
}

#[pyfunction]
fn gallery_names() -> Vec<&'static str> {
    gallery::CATALOG.iter().map(|e| e.name).collect()
}

#[pymodule]
#[pyo3(name = "hybridcat")]
fn hybridcat_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExpr>()?;
    m.add_class::<PySystem>()?;
    m.add_class::<PyMap>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(product, m)?)?;
    m.add_function(wrap_pyfunction!(coproduct, m)?)?;
    m.add_function(wrap_pyfunction!(slice_mode, m)?)?;
    m.add_function(wrap_pyfunction!(pullback_sliced, m)?)?;
    m.add_function(wrap_pyfunction!(sequential_example, m)?)?;
    m.add_function(wrap_pyfunction!(hopper_maps, m)?)?;
    m.add_function(wrap_pyfunction!(gallery_names, m)?)?;
    Ok(())
}
