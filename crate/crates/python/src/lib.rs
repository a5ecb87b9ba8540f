//! Python bindings: datasets, two-stage fits with post-selection intervals,
//! and simulation studies. Settings travel as JSON strings using the same
//! keys as the command-line config.

use std::fs::File;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rq_uposi_core::cli::{fit_and_infer, load_dataset};
use rq_uposi_core::data_model::{write_trajectories, DictionaryPlan};
use rq_uposi_core::inference::{IntervalFlavor, NullTestOutcome, StageInference};
use rq_uposi_core::simulation::{self, PipelineSettings, ScenarioLabel, ScenarioSpec, StudyConfig};
use rq_uposi_core::stage_engine::TwoStageFit;
use rq_uposi_core::{Error, Stage, VERSION};

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn settings_from(json: Option<&str>) -> PyResult<PipelineSettings> {
    match json {
        None => Ok(PipelineSettings::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("settings: {e}"))),
    }
}

fn stage_of(stage: u8) -> PyResult<Stage> {
    match stage {
        1 => Ok(Stage::One),
        2 => Ok(Stage::Two),
        _ => Err(PyValueError::new_err(format!("stage must be 1 or 2, got {stage}"))),
    }
}

fn flavor_of(name: &str) -> PyResult<IntervalFlavor> {
    IntervalFlavor::ALL
        .into_iter()
        .find(|f| f.as_str() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown interval flavor '{name}'")))
}

/// Two-stage trajectories with their feature dictionaries.
#[pyclass(module = "rq_uposi", frozen)]
struct Dataset {
    inner: rq_uposi_core::Dataset,
}

#[pymethods]
impl Dataset {
    /// Reads a trajectory CSV (`x1_*, a1, x2_*, a2, y`).
    #[staticmethod]
    #[pyo3(signature = (path, interactions = false))]
    fn from_csv(path: PathBuf, interactions: bool) -> PyResult<Self> {
        let plan = DictionaryPlan {
            interactions,
            ..DictionaryPlan::default()
        };
        let inner = load_dataset(&path, &plan).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Draws `n` trajectories from benchmark scenario `A`-`F`.
    #[staticmethod]
    #[pyo3(signature = (scenario, n, seed, p1 = 10))]
    fn simulate(scenario: &str, n: usize, seed: u64, p1: usize) -> PyResult<Self> {
        let label = ScenarioLabel::parse(scenario).map_err(to_py)?;
        let spec = ScenarioSpec::new(label, p1, n).map_err(to_py)?;
        let inner = simulation::generate_scenario(&spec, &DictionaryPlan::default(), seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        let f = File::create(&path).map_err(|e| PyValueError::new_err(format!("{}: {e}", path.display())))?;
        write_trajectories(f, self.inner.trajectories()).map_err(to_py)
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn q1(&self) -> usize {
        self.inner.q1()
    }

    #[getter]
    fn q2(&self) -> usize {
        self.inner.q2()
    }

    /// Dictionary term labels of a stage.
    fn terms(&self, stage: u8) -> PyResult<Vec<String>> {
        let d = self.inner.dictionary(stage_of(stage)?);
        Ok(d.terms().iter().map(ToString::to_string).collect())
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, q1={}, q2={})", self.inner.n(), self.inner.q1(), self.inner.q2())
    }
}

/// A fitted two-stage model with its bootstrap-based intervals.
#[pyclass(module = "rq_uposi", frozen)]
struct Fit {
    fit: TwoStageFit,
    inference: [StageInference; 2],
    report: String,
}

impl Fit {
    fn inf(&self, stage: u8) -> PyResult<&StageInference> {
        Ok(&self.inference[stage_of(stage)?.number() as usize - 1])
    }
}

#[pymethods]
impl Fit {
    /// Selected model of a stage as 1-based dictionary positions.
    fn model(&self, stage: u8) -> PyResult<Vec<usize>> {
        Ok(self.fit.stage(stage_of(stage)?).model.one_based())
    }

    fn theta(&self, stage: u8) -> PyResult<Vec<f64>> {
        Ok(self.fit.stage(stage_of(stage)?).theta.iter().copied().collect())
    }

    fn combined_radius(&self, stage: u8) -> PyResult<f64> {
        Ok(self.inf(stage)?.combined_radius)
    }

    fn conditional_radius(&self, stage: u8) -> PyResult<f64> {
        Ok(self.inf(stage)?.conditional_radius)
    }

    /// `(lower, upper)` per selected coordinate. Flavors: `uposi-hyperrect`,
    /// `uposi-coord`, `uposi-coord-conditional`, `naive`.
    #[pyo3(signature = (stage, flavor = "uposi-coord-conditional"))]
    fn intervals(&self, stage: u8, flavor: &str) -> PyResult<Vec<(f64, f64)>> {
        let f = flavor_of(flavor)?;
        let set = self
            .inf(stage)?
            .intervals()
            .into_iter()
            .find(|s| s.flavor == f)
            .expect("every flavor is computed");
        Ok((0..set.centers.len()).map(|j| (set.lower(j), set.upper(j))).collect())
    }

    /// `True` when the test of a zero blip rejects at this stage.
    fn null_rejected(&self, stage: u8) -> PyResult<bool> {
        Ok(self.inf(stage)?.null_test == NullTestOutcome::Reject)
    }

    /// Fit diagnostics as JSON.
    fn report_json(&self) -> String {
        self.report.clone()
    }
}

/// Fits both stages, runs the perturbation bootstrap and builds intervals.
#[pyfunction]
#[pyo3(signature = (dataset, seed, settings = None))]
fn fit(py: Python<'_>, dataset: &Dataset, seed: u64, settings: Option<&str>) -> PyResult<Fit> {
    let settings = settings_from(settings)?;
    let ds = &dataset.inner;
    let (fit, _, inference) = py.detach(|| fit_and_infer(&settings, seed, ds)).map_err(to_py)?;
    let report = serde_json::to_string(&fit.report(ds)).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(Fit { fit, inference, report })
}

/// Runs a replication study and returns its metrics as JSON.
#[pyfunction]
#[pyo3(signature = (scenario, n, reps, seed, settings = None, p1 = 10, mc_draws = 1_000_000))]
fn simulate(
    py: Python<'_>,
    scenario: &str,
    n: usize,
    reps: usize,
    seed: u64,
    settings: Option<&str>,
    p1: usize,
    mc_draws: usize,
) -> PyResult<String> {
    let label = ScenarioLabel::parse(scenario).map_err(to_py)?;
    let cfg = StudyConfig {
        spec: ScenarioSpec::new(label, p1, n).map_err(to_py)?,
        reps,
        seed,
        mc_draws,
        settings: settings_from(settings)?,
    };
    let (metrics, _) = py.detach(|| simulation::run_replications(&cfg)).map_err(to_py)?;
    serde_json::to_string(&metrics).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn rq_uposi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", VERSION)?;
    m.add_class::<Dataset>()?;
    m.add_class::<Fit>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    Ok(())
}
