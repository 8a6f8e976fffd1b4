//! Python bindings: datasets, the model's log density, the sampler,
//! diagnostics and posterior summaries.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use seroifr_core::age_density::{dataset_densities, DEFAULT_LOESS_SPAN};
use seroifr_core::data::{load_dataset, write_dataset, DatasetPaths, StudyDataset};
use seroifr_core::diagnostics::{self, Thresholds};
use seroifr_core::model::{self as core_model, ModelSpec, ParameterVector};
use seroifr_core::sampler::{self, PosteriorDraws, SamplerConfig, Target};
use seroifr_core::summaries::{self, CurveKind, DensityMode, IfrWeighting};
use seroifr_core::synthetic::{self, SyntheticDesign};

create_exception!(seroifr, SeroifrError, PyException);

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    SeroifrError::new_err(e.to_string())
}

fn json_loads<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn json_dumps(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

#[pyclass(name = "Dataset", module = "seroifr", frozen)]
struct PyDataset {
    inner: StudyDataset,
}

#[pymethods]
impl PyDataset {
    /// Loads the six input tables from a directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        load_dataset(&DatasetPaths::in_dir(dir)).map(|inner| Self { inner }).map_err(err)
    }

    /// Synthetic design with zero counts.
    #[staticmethod]
    #[pyo3(signature = (n_locations=3, n_per_bin=2000, population=1e6))]
    fn template(n_locations: usize, n_per_bin: u64, population: f64) -> PyResult<Self> {
        let design = SyntheticDesign {
            n_locations,
            n_per_bin,
            population,
            ..SyntheticDesign::default()
        };
        synthetic::template(&design).map(|inner| Self { inner }).map_err(err)
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&dir).map_err(err)?;
        write_dataset(&self.inner, &DatasetPaths::in_dir(dir)).map_err(err)
    }

    #[getter]
    fn location_ids(&self) -> Vec<String> {
        self.inner.locations.iter().map(|l| l.location_id.clone()).collect()
    }

    #[getter]
    fn countries(&self) -> Vec<String> {
        self.inner.countries()
    }

    /// `(age_lo, age_hi, n_tested, n_positive)` per serology bin.
    fn serology(&self, location: usize) -> PyResult<Vec<(u32, Option<u32>, u64, u64)>> {
        let loc = self.inner.locations.get(location).ok_or_else(|| err("location index out of range"))?;
        Ok(loc
            .serology
            .iter()
            .map(|o| {
                let (lo, hi) = o.bin.labels();
                (lo, hi, o.n_tested, o.n_positive)
            })
            .collect())
    }

    /// `(age_lo, age_hi, deaths)` per death bin.
    fn deaths(&self, location: usize) -> PyResult<Vec<(u32, Option<u32>, u64)>> {
        let loc = self.inner.locations.get(location).ok_or_else(|| err("location index out of range"))?;
        Ok(loc
            .deaths
            .iter()
            .map(|o| {
                let (lo, hi) = o.bin.labels();
                (lo, hi, o.deaths)
            })
            .collect())
    }

    fn __len__(&self) -> usize {
        self.inner.locations.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset({} locations, {} tests)", self.inner.locations.len(), self.inner.tests.len())
    }
}

#[pyclass(name = "Model", module = "seroifr", frozen)]
struct PyModel {
    inner: core_model::Model,
}

#[pymethods]
impl PyModel {
    /// `spec` is a dict with the same fields as the `model` section of a
    /// run configuration; missing fields take their defaults.
    #[new]
    #[pyo3(signature = (dataset, spec=None, loess_span=DEFAULT_LOESS_SPAN))]
    fn new(dataset: &PyDataset, spec: Option<&Bound<'_, PyAny>>, loess_span: f64) -> PyResult<Self> {
        let spec: ModelSpec = match spec {
            Some(s) => serde_json::from_str(&json_dumps(s)?).map_err(err)?,
            None => ModelSpec::default(),
        };
        let densities = dataset_densities(&dataset.inner, loess_span).map_err(err)?;
        core_model::Model::new(&dataset.inner, densities, spec)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    /// Number of free unconstrained coordinates.
    #[getter]
    fn dim(&self) -> usize {
        Target::dim(&self.inner)
    }

    #[getter]
    fn parameter_names(&self) -> Vec<String> {
        self.inner.natural_names().to_vec()
    }

    #[getter]
    fn coordinate_names(&self) -> Vec<String> {
        self.inner.free_coordinate_names()
    }

    /// Log posterior and gradient at an unconstrained point.
    fn log_posterior(&self, u: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        let r = self.inner.log_posterior(&u).map_err(err)?;
        Ok((r.value, r.gradient))
    }

    /// Natural parameters at an unconstrained point, as a dict.
    fn constrain<'py>(&self, py: Python<'py>, u: Vec<f64>) -> PyResult<Bound<'py, PyAny>> {
        let p = self.inner.constrain(&u).map_err(err)?;
        json_loads(py, &serde_json::to_string(&p).map_err(err)?)
    }

    fn unconstrain(&self, params: &Bound<'_, PyAny>) -> PyResult<Vec<f64>> {
        let p: ParameterVector = serde_json::from_str(&json_dumps(params)?).map_err(err)?;
        self.inner.unconstrain(&p).map_err(err)
    }

    /// Reference parameters used for synthetic studies.
    fn reference_truth<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let t = synthetic::reference_truth(&self.inner);
        json_loads(py, &serde_json::to_string(&t).map_err(err)?)
    }

    /// Dataset with counts drawn from the model at `truth`.
    fn simulate(&self, truth: &Bound<'_, PyAny>, seed: u64) -> PyResult<PyDataset> {
        let p: ParameterVector = serde_json::from_str(&json_dumps(truth)?).map_err(err)?;
        self.inner.simulate(&p, seed).map(|inner| PyDataset { inner }).map_err(err)
    }

    /// Runs the sampler; the GIL is released while chains run.
    #[pyo3(signature = (seed, chains=3, warmup=2500, samples=3000, target_accept=0.8, max_tree_depth=10))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        py: Python<'_>,
        seed: u64,
        chains: usize,
        warmup: usize,
        samples: usize,
        target_accept: f64,
        max_tree_depth: usize,
    ) -> PyResult<PyDraws> {
        let config = SamplerConfig {
            chains,
            warmup,
            samples,
            target_accept,
            max_tree_depth,
            seed,
            ..SamplerConfig::default()
        };
        let model = &self.inner;
        py.detach(|| sampler::sample(model, &config))
            .map(|inner| PyDraws { inner })
            .map_err(err)
    }
}

#[pyclass(name = "Draws", module = "seroifr", frozen)]
struct PyDraws {
    inner: PosteriorDraws,
}

fn curve_kind(kind: &str) -> PyResult<CurveKind> {
    match kind.to_ascii_lowercase().as_str() {
        "sero" | "seroprevalence" => Ok(CurveKind::Sero),
        "ifr" => Ok(CurveKind::Ifr),
        _ => Err(err(format!("unknown curve kind `{kind}`"))),
    }
}

#[pymethods]
impl PyDraws {
    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        PosteriorDraws::read_csv(&path, None).map(|inner| Self { inner }).map_err(err)
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(&path).map_err(err)
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.names.clone()
    }

    #[getter]
    fn n_chains(&self) -> usize {
        self.inner.n_chains()
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    /// Per-chain draws of one parameter.
    fn chains(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        let k = self.inner.param_index(name).ok_or_else(|| err(format!("unknown parameter `{name}`")))?;
        Ok(self.inner.chains_of(k))
    }

    /// Number of divergent transitions after warmup.
    fn divergences(&self) -> usize {
        self.inner.stats.iter().flatten().filter(|s| s.divergent).count()
    }

    /// `(passed, rows)` with one `(name, rhat, ess, group)` row per parameter.
    #[pyo3(signature = (rhat_max=1.01, ess_min=1000.0))]
    #[allow(clippy::type_complexity)]
    fn diagnostics(&self, rhat_max: f64, ess_min: f64) -> PyResult<(bool, Vec<(String, Option<f64>, Option<f64>, String)>)> {
        let r = diagnostics::convergence_report(&self.inner, Thresholds { rhat_max, ess_min }).map_err(err)?;
        Ok((
            r.pass,
            r.parameters.into_iter().map(|p| (p.name, p.rhat, p.ess, p.group)).collect(),
        ))
    }

    /// Posterior curve on ages 0..=100 with mean, median and 95% band.
    fn curve<'py>(&self, py: Python<'py>, model: &PyModel, location: usize, kind: &str) -> PyResult<Bound<'py, PyDict>> {
        let params = summaries::parameter_draws(&self.inner, model.inner.layout()).map_err(err)?;
        let id = location_id(model, location)?;
        let c = summaries::curve_summary(&params, model.inner.curves(), location, &id, curve_kind(kind)?)
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("age", c.ages)?;
        d.set_item("mean", c.per_age.iter().map(|q| q.mean).collect::<Vec<_>>())?;
        d.set_item("median", c.per_age.iter().map(|q| q.median).collect::<Vec<_>>())?;
        d.set_item("lo95", c.per_age.iter().map(|q| q.lo95).collect::<Vec<_>>())?;
        d.set_item("hi95", c.per_age.iter().map(|q| q.hi95).collect::<Vec<_>>())?;
        Ok(d)
    }

    /// Population IFR `(mean, median, lo95, hi95)` under the location's own
    /// age density, or the standardized one.
    #[pyo3(signature = (model, location, standardized=false))]
    fn population_ifr(&self, model: &PyModel, location: usize, standardized: bool) -> PyResult<(f64, f64, f64, f64)> {
        let params = summaries::parameter_draws(&self.inner, model.inner.layout()).map_err(err)?;
        let id = location_id(model, location)?;
        let std_density;
        let (f, mode) = if standardized {
            std_density = summaries::standardized_density(model.inner.densities()).map_err(err)?;
            (&std_density, DensityMode::Standardized)
        } else {
            (&model.inner.densities()[location], DensityMode::OwnDistribution)
        };
        let s = summaries::population_ifr(
            &params,
            model.inner.curves(),
            location,
            &id,
            f,
            model.inner.mesh(),
            mode,
            IfrWeighting::default(),
        )
        .map_err(err)?;
        Ok((s.mean, s.median, s.lo95, s.hi95))
    }
}

fn location_id(model: &PyModel, location: usize) -> PyResult<String> {
    model
        .inner
        .dataset()
        .locations
        .get(location)
        .map(|l| l.location_id.clone())
        .ok_or_else(|| err("location index out of range"))
}

#[pyfunction]
fn split_rhat(chains: Vec<Vec<f64>>) -> PyResult<f64> {
    diagnostics::split_rhat(&chains).map_err(err)
}

#[pyfunction]
fn ess(chains: Vec<Vec<f64>>) -> PyResult<f64> {
    diagnostics::ess(&chains).map_err(err)
}

#[pyfunction]
fn positivity(prevalence: f64, sens: f64, spec: f64) -> f64 {
    core_model::positivity(prevalence, sens, spec)
}

#[pyfunction]
fn rogan_gladen(positivity: f64, sens: f64, spec: f64) -> PyResult<f64> {
    summaries::rogan_gladen_rate(positivity, sens, spec).map_err(err)
}

#[pymodule]
fn seroifr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SeroifrError", m.py().get_type::<SeroifrError>())?;
    m.add("__version__", seroifr_core::VERSION)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDraws>()?;
    m.add_function(wrap_pyfunction!(split_rhat, m)?)?;
    m.add_function(wrap_pyfunction!(ess, m)?)?;
    m.add_function(wrap_pyfunction!(positivity, m)?)?;
    m.add_function(wrap_pyfunction!(rogan_gladen, m)?)?;
    Ok(())
}
