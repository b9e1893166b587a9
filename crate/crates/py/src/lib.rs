//! Python bindings for tcsim.

use std::collections::HashMap;

use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use tcsim::analysis::{self, NuclearState, SsroModel};
use tcsim::config::{default_config, default_config_text, Experiment};
use tcsim::emitter;
use tcsim::forecast::{self, EfficiencyBudget, ProjectionParams, StepBudget};
use tcsim::harness::Detector;
use tcsim::protocol::{self, BkMode, HeraldPattern, TcnotMode};

fn err(e: tcsim::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn experiment(name: &str) -> PyResult<Experiment> {
    Experiment::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown experiment '{name}'")))
}

fn pattern_name(p: HeraldPattern) -> String {
    format!("{:?}{:?}", p.early, p.late)
}

fn parse_pattern(s: &str) -> PyResult<HeraldPattern> {
    let det = |x: &str| match x {
        "D1" => Ok(Detector::D1),
        "D2" => Ok(Detector::D2),
        _ => Err(PyValueError::new_err(format!("bad herald '{s}', expected e.g. 'D1D2'"))),
    };
    if s.len() != 4 {
        return Err(PyValueError::new_err(format!("bad herald '{s}', expected e.g. 'D1D2'")));
    }
    Ok(HeraldPattern { early: det(&s[..2])?, late: det(&s[2..])? })
}

fn matrix_rows(m: &tcsim::qmath::CMatrix) -> Vec<Vec<Complex64>> {
    (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect()).collect()
}

/// Optical and spectral parameters of one emitter.
#[pyclass(name = "EmitterParams", from_py_object)]
#[derive(Clone)]
pub struct PyEmitterParams {
    inner: emitter::EmitterParams,
}

#[pymethods]
impl PyEmitterParams {
    #[staticmethod]
    fn tc1() -> Self {
        PyEmitterParams { inner: emitter::EmitterParams::tc1() }
    }

    #[staticmethod]
    fn tc2() -> Self {
        PyEmitterParams { inner: emitter::EmitterParams::tc2() }
    }

    #[staticmethod]
    fn ideal(lifetime_ns: f64) -> Self {
        PyEmitterParams { inner: emitter::EmitterParams::ideal(lifetime_ns) }
    }

    #[getter]
    fn lifetime_ns(&self) -> f64 {
        self.inner.lifetime_ns
    }
    #[setter]
    fn set_lifetime_ns(&mut self, v: f64) {
        self.inner.lifetime_ns = v;
    }
    #[getter]
    fn pure_dephasing_mhz(&self) -> f64 {
        self.inner.pure_dephasing_mhz
    }
    #[setter]
    fn set_pure_dephasing_mhz(&mut self, v: f64) {
        self.inner.pure_dephasing_mhz = v;
    }
    #[getter]
    fn diffusion_sigma_mhz(&self) -> f64 {
        self.inner.diffusion_sigma_mhz
    }
    #[setter]
    fn set_diffusion_sigma_mhz(&mut self, v: f64) {
        self.inner.diffusion_sigma_mhz = v;
    }
    #[getter]
    fn mean_detuning_mhz(&self) -> f64 {
        self.inner.mean_detuning_mhz
    }
    #[setter]
    fn set_mean_detuning_mhz(&mut self, v: f64) {
        self.inner.mean_detuning_mhz = v;
    }
    #[getter]
    fn polarization_mismatch_deg(&self) -> f64 {
        self.inner.polarization_mismatch_deg
    }
    #[setter]
    fn set_polarization_mismatch_deg(&mut self, v: f64) {
        self.inner.polarization_mismatch_deg = v;
    }
    #[getter]
    fn g2_0(&self) -> f64 {
        self.inner.g2_0
    }
    #[setter]
    fn set_g2_0(&mut self, v: f64) {
        self.inner.g2_0 = v;
    }
    #[getter]
    fn p_double(&self) -> f64 {
        self.inner.p_double
    }
    #[setter]
    fn set_p_double(&mut self, v: f64) {
        self.inner.p_double = v;
    }
    #[getter]
    fn desync_ns(&self) -> f64 {
        self.inner.desync_ns
    }
    #[setter]
    fn set_desync_ns(&mut self, v: f64) {
        self.inner.desync_ns = v;
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Parameters of the two-round heralding model.
#[pyclass(name = "BkModelParams", from_py_object)]
#[derive(Clone)]
pub struct PyBkParams {
    inner: protocol::BkModelParams,
}

#[pymethods]
impl PyBkParams {
    #[staticmethod]
    fn measured() -> Self {
        PyBkParams { inner: protocol::BkModelParams::measured() }
    }

    #[staticmethod]
    fn ideal() -> Self {
        PyBkParams { inner: protocol::BkModelParams::ideal() }
    }

    #[getter]
    fn timebin_ns(&self) -> f64 {
        self.inner.timebin_ns
    }
    #[setter]
    fn set_timebin_ns(&mut self, v: f64) {
        self.inner.timebin_ns = v;
    }
    #[getter]
    fn gate_fidelity(&self) -> f64 {
        self.inner.gate_fidelity
    }
    #[setter]
    fn set_gate_fidelity(&mut self, v: f64) {
        self.inner.gate_fidelity = v;
    }
    #[getter]
    fn init_fidelity(&self) -> f64 {
        self.inner.init_fidelity
    }
    #[setter]
    fn set_init_fidelity(&mut self, v: f64) {
        self.inner.init_fidelity = v;
    }
    #[getter]
    fn dark_rate_hz(&self) -> f64 {
        self.inner.dark_rate_hz
    }
    #[setter]
    fn set_dark_rate_hz(&mut self, v: f64) {
        self.inner.dark_rate_hz = v;
    }

    fn emitter(&self, k: usize) -> PyResult<PyEmitterParams> {
        let e = self.inner.emitters.get(k).ok_or_else(|| PyValueError::new_err("module index is 0 or 1"))?;
        Ok(PyEmitterParams { inner: e.clone() })
    }

    fn set_emitter(&mut self, k: usize, p: PyEmitterParams) -> PyResult<()> {
        let slot = self.inner.emitters.get_mut(k).ok_or_else(|| PyValueError::new_err("module index is 0 or 1"))?;
        *slot = p.inner;
        Ok(())
    }

    fn mean_visibility(&self) -> PyResult<f64> {
        self.inner.mean_visibility().map_err(err)
    }

    fn rate_hz(&self) -> PyResult<f64> {
        self.inner.rate_hz().map_err(err)
    }
}

/// Heralded two-spin state.
#[pyclass(name = "BellPair", skip_from_py_object)]
pub struct PyBellPair {
    inner: protocol::BellPairResult,
}

#[pymethods]
impl PyBellPair {
    #[getter]
    fn herald(&self) -> String {
        pattern_name(self.inner.herald)
    }
    #[getter]
    fn fidelity(&self) -> f64 {
        self.inner.fidelity
    }
    #[getter]
    fn success_probability(&self) -> f64 {
        self.inner.success_probability
    }
    /// Density matrix as nested lists, qubit 0 least significant.
    #[getter]
    fn state(&self) -> Vec<Vec<Complex64>> {
        matrix_rows(self.inner.state.matrix())
    }

    fn __repr__(&self) -> String {
        format!(
            "BellPair(herald={}, fidelity={:.6}, success_probability={:.3e})",
            self.herald(),
            self.inner.fidelity,
            self.inner.success_probability
        )
    }
}

/// `(tau_ns, G_I, G_D)` on a uniform grid.
#[pyfunction]
#[pyo3(signature = (p1, p2, tau_lim_ns = 130.0, step_ns = 0.1))]
fn hom_correlations(
    p1: &PyEmitterParams,
    p2: &PyEmitterParams,
    tau_lim_ns: f64,
    step_ns: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let grid = emitter::TimeGrid::symmetric(step_ns, tau_lim_ns).map_err(err)?;
    let (gi, gd) = emitter::hom_correlations(&p1.inner, &p2.inner, &grid, tau_lim_ns).map_err(err)?;
    Ok((grid.points().collect(), gi.values, gd.values))
}

#[pyfunction]
#[pyo3(signature = (p1, p2, window_ns, tau_lim_ns = 130.0))]
fn hom_visibility(p1: &PyEmitterParams, p2: &PyEmitterParams, window_ns: f64, tau_lim_ns: f64) -> PyResult<f64> {
    let grid = emitter::TimeGrid::default_for(tau_lim_ns).map_err(err)?;
    let (gi, gd) = emitter::hom_correlations(&p1.inner, &p2.inner, &grid, tau_lim_ns).map_err(err)?;
    emitter::visibility(&gi, &gd, window_ns).map_err(err)
}

#[pyfunction]
fn hom_bound(v: f64) -> PyResult<f64> {
    protocol::hom_bound(v).map_err(err)
}

#[pyfunction]
fn bk_conditional_state(p: &PyBkParams) -> PyResult<Vec<PyBellPair>> {
    Ok(protocol::bk_conditional_state(&p.inner)
        .map_err(err)?
        .into_iter()
        .map(|inner| PyBellPair { inner })
        .collect())
}

/// Analytic time-bin sweep; one dict per bin.
#[pyfunction]
fn simulate_bk(p: &PyBkParams, timebins_ns: Vec<f64>) -> PyResult<Vec<HashMap<&'static str, f64>>> {
    let rows = protocol::simulate_bk_experiment(&p.inner, BkMode::Analytic, &timebins_ns).map_err(err)?;
    Ok(rows
        .into_iter()
        .map(|r| {
            HashMap::from([
                ("timebin_ns", r.timebin_ns),
                ("visibility", r.visibility),
                ("fidelity", r.fidelity),
                ("success_probability", r.success_probability),
                ("rate_hz", r.rate_hz),
            ])
        })
        .collect())
}

#[pyfunction]
fn bp_fidelity_estimator(n00: u64, n01: u64, npp: u64, npm: u64) -> PyResult<HashMap<&'static str, f64>> {
    let e = protocol::bp_fidelity_estimator(n00, n01, npp, npm).map_err(err)?;
    Ok(HashMap::from([
        ("population", e.population),
        ("coherence", e.coherence),
        ("fidelity", e.fidelity),
        ("population_err", e.population_err),
        ("coherence_err", e.coherence_err),
        ("fidelity_err", e.fidelity_err),
    ]))
}

/// Truth table `[input][output]` for a Werner pair of the given Bell-state
/// fidelity; index = control + 2·target.
#[pyfunction]
#[pyo3(signature = (fidelity, mode = "postselect00", herald = "D1D1"))]
fn tcnot_truth_table(fidelity: f64, mode: &str, herald: &str) -> PyResult<Vec<Vec<f64>>> {
    let mode = match mode {
        "postselect00" => TcnotMode::Postselect00,
        "feed_forward" => TcnotMode::FeedForward,
        _ => return Err(PyValueError::new_err("mode is 'postselect00' or 'feed_forward'")),
    };
    let bp = protocol::werner_pair((4.0 * fidelity - 1.0) / 3.0, parse_pattern(herald)?).map_err(err)?;
    Ok(protocol::tcnot_truth_table(&bp, mode).map_err(err)?.iter().map(|r| r.to_vec()).collect())
}

/// Threshold sweep for a calibrated readout model ("tc1" or "tc2").
#[pyfunction]
#[pyo3(signature = (module, shots = 20000, seed = 0))]
fn ssro_sweep(module: &str, shots: u32, seed: u64) -> PyResult<(Vec<u64>, Vec<f64>, u64, f64)> {
    let m = match module {
        "tc1" => SsroModel::tc1(),
        "tc2" => SsroModel::tc2(),
        _ => return Err(PyValueError::new_err("module is 'tc1' or 'tc2'")),
    };
    let b = analysis::ssro_simulate(&m, NuclearState::Bright, shots, seed).map_err(err)?;
    let d = analysis::ssro_simulate(&m, NuclearState::Dark, shots, seed.wrapping_add(1)).map_err(err)?;
    let s = analysis::ssro_threshold(&b, &d).map_err(err)?;
    Ok((s.thresholds, s.spam, s.best_threshold, s.best_spam))
}

/// Attempt period (ns) and rate (Hz) of the projected step budget.
#[pyfunction]
fn projected_repetition_rate() -> PyResult<(f64, f64)> {
    forecast::repetition_rate(&StepBudget::projected()).map_err(err)
}

#[pyfunction]
fn projected_success_probability() -> PyResult<f64> {
    forecast::success_probability(&EfficiencyBudget::projected()).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (fractions, lifetime_ns = 10.0, intrinsic_dephasing_khz = 230.0, slow_diffusion_mhz = 20.0))]
fn forecast_curve(
    fractions: Vec<f64>,
    lifetime_ns: f64,
    intrinsic_dephasing_khz: f64,
    slow_diffusion_mhz: f64,
) -> PyResult<Vec<HashMap<&'static str, f64>>> {
    let p = ProjectionParams { lifetime_ns, intrinsic_dephasing_khz, slow_diffusion_mhz, ..Default::default() };
    let c = forecast::fidelity_rate_curve(&p, &StepBudget::projected(), &EfficiencyBudget::projected(), &fractions)
        .map_err(err)?;
    Ok(c.into_iter()
        .map(|pt| {
            HashMap::from([
                ("fraction", pt.fraction),
                ("timebin_ns", pt.timebin_ns),
                ("visibility", pt.visibility),
                ("fidelity", pt.fidelity),
                ("rate_hz", pt.rate_hz),
            ])
        })
        .collect())
}

#[pyfunction(name = "default_config")]
fn py_default_config(experiment_name: &str) -> PyResult<String> {
    Ok(default_config_text(experiment(experiment_name)?))
}

/// Runs an experiment with its shipped config and returns the written paths.
#[pyfunction]
#[pyo3(signature = (experiment_name, out, seed = None, shots = None, workers = 0))]
fn run(experiment_name: &str, out: String, seed: Option<u64>, shots: Option<u64>, workers: usize) -> PyResult<Vec<String>> {
    let mut cfg = default_config(experiment(experiment_name)?);
    cfg.output = out.into();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(n) = shots {
        cfg.shots = n;
    }
    let paths = tcsim::cli::run(&cfg, workers).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(paths.into_iter().map(|p| p.display().to_string()).collect())
}

#[pymodule]
pub fn tcsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEmitterParams>()?;
    m.add_class::<PyBkParams>()?;
    m.add_class::<PyBellPair>()?;
    m.add_function(wrap_pyfunction!(hom_correlations, m)?)?;
    m.add_function(wrap_pyfunction!(hom_visibility, m)?)?;
    m.add_function(wrap_pyfunction!(hom_bound, m)?)?;
    m.add_function(wrap_pyfunction!(bk_conditional_state, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_bk, m)?)?;
    m.add_function(wrap_pyfunction!(bp_fidelity_estimator, m)?)?;
    m.add_function(wrap_pyfunction!(tcnot_truth_table, m)?)?;
    m.add_function(wrap_pyfunction!(ssro_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(projected_repetition_rate, m)?)?;
    m.add_function(wrap_pyfunction!(projected_success_probability, m)?)?;
    m.add_function(wrap_pyfunction!(forecast_curve, m)?)?;
    m.add_function(wrap_pyfunction!(py_default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
