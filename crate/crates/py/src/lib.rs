//! Python bindings: environments, intercepted packets, the inversion attack,
//! defenses, metrics and whole experiments.

use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rgia_core::attack::{
    reg_reward, rgia_attack, AttackConfig, AttackProblem, PriorSize, ReconstructionResult,
};
use rgia_core::defenses::{quantize_values, DefenseSpec};
use rgia_core::envs::{Action, EnvSpec, Transition};
use rgia_core::experiments::{
    rows_to_csv, run_experiment as core_run_experiment, score_attack, summarize, AttackScore,
    EmitOptions, ExperimentConfig, Scenario as CoreScenario, ScenarioConfig,
};
use rgia_core::frlcore::{mix as core_mix, FederationConfig};
use rgia_core::metrics::{self, SsimParams};
use rgia_core::Error;

create_exception!(rgia, ConfigError, PyValueError);
create_exception!(rgia, NumericError, PyArithmeticError);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Json(_) | Error::InvalidArgument(_) => {
            ConfigError::new_err(e.to_string())
        }
        e if e.is_numeric() => NumericError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned>(
    text: Option<&str>,
    what: &str,
) -> PyResult<Option<T>> {
    text.map(|t| serde_json::from_str(t).map_err(|e| ConfigError::new_err(format!("{what}: {e}"))))
        .transpose()
}

fn transition_dict<'py>(py: Python<'py>, t: &Transition) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("s", t.s.as_slice().to_vec())?;
    match &t.a {
        Action::Discrete(i) => d.set_item("a", *i)?,
        Action::Continuous(v) => d.set_item("a", v.as_slice().to_vec())?,
    }
    d.set_item("r", t.r)?;
    d.set_item("s_next", t.s_next.as_slice().to_vec())?;
    Ok(d)
}

/// Environment description.
#[pyclass(name = "Env", module = "rgia", frozen)]
struct PyEnv {
    spec: EnvSpec,
}

#[pymethods]
impl PyEnv {
    #[staticmethod]
    fn gridlake() -> Self {
        PyEnv {
            spec: EnvSpec::gridlake(),
        }
    }

    #[staticmethod]
    fn pointmass() -> Self {
        PyEnv {
            spec: EnvSpec::pointmass(),
        }
    }

    #[staticmethod]
    fn pixelgrid() -> Self {
        PyEnv {
            spec: EnvSpec::pixelgrid(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let spec: EnvSpec = from_json(Some(text), "env")?.expect("some");
        spec.validate().map_err(py_err)?;
        Ok(PyEnv { spec })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.spec).map_err(|e| py_err(e.into()))
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.spec.kind().as_str()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.spec.gamma()
    }

    #[getter]
    fn reward_range(&self) -> (f64, f64) {
        (self.spec.reward_min(), self.spec.reward_max())
    }

    fn __repr__(&self) -> String {
        format!("Env({})", self.kind())
    }
}

/// Outcome of one inversion, scored against the true batch.
#[pyclass(name = "Reconstruction", module = "rgia", frozen)]
struct PyReconstruction {
    result: ReconstructionResult,
    score: AttackScore,
}

#[pymethods]
impl PyReconstruction {
    #[getter]
    fn gme(&self) -> f64 {
        self.result.gme
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.result.iterations
    }

    #[getter]
    fn relaxed(&self) -> Vec<f64> {
        self.result.relaxed.clone()
    }

    #[getter]
    fn loss_trace(&self) -> Vec<f64> {
        self.result.loss_trace.clone()
    }

    #[getter]
    fn diverged(&self) -> bool {
        self.result.divergence.is_some()
    }

    #[getter]
    fn decoded<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.result
            .decoded
            .iter()
            .map(|t| transition_dict(py, t))
            .collect()
    }

    /// Scores against the truth: gme, state_mse, next_state_mse, ra,
    /// reward_error, invalid_reward, te, exact.
    fn score<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = &self.score;
        let d = PyDict::new(py);
        for (k, v) in [
            ("gme", s.gme),
            ("state_mse", s.state_mse),
            ("next_state_mse", s.next_state_mse),
            ("ra", s.ra),
            ("reward_error", s.reward_error),
            ("invalid_reward", s.invalid_reward),
            ("te", s.te),
            ("exact", s.exact),
        ] {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    fn to_json(&self) -> PyResult<String> {
        self.result.to_json().map_err(py_err)
    }
}

/// A trained federation with packets intercepted at one round.
#[pyclass(name = "Scenario", module = "rgia")]
struct PyScenario {
    inner: CoreScenario,
    config: ScenarioConfig,
}

#[pymethods]
impl PyScenario {
    /// `scenario` and `federation` are JSON objects; missing fields take defaults.
    #[new]
    #[pyo3(signature = (env, seed=0, scenario=None, federation=None))]
    fn new(
        py: Python<'_>,
        env: &PyEnv,
        seed: u64,
        scenario: Option<&str>,
        federation: Option<&str>,
    ) -> PyResult<Self> {
        let config: ScenarioConfig = from_json(scenario, "scenario")?.unwrap_or_default();
        let fed = match federation {
            None => FederationConfig::default(),
            Some(text) => {
                let mut base = serde_json::to_value(FederationConfig::default())
                    .map_err(|e| py_err(e.into()))?;
                let patch: serde_json::Value = from_json(Some(text), "federation")?.expect("some");
                if let (Some(b), Some(p)) = (base.as_object_mut(), patch.as_object()) {
                    for (k, v) in p {
                        b.insert(k.clone(), v.clone());
                    }
                }
                serde_json::from_value(base).map_err(|e| ConfigError::new_err(e.to_string()))?
            }
        };
        fed.validate().map_err(py_err)?;
        let spec = env.spec.clone();
        let inner = py
            .detach(|| CoreScenario::capture(&spec, &config, &fed, seed, None, None))
            .map_err(py_err)?;
        Ok(PyScenario { inner, config })
    }

    #[getter]
    fn n_packets(&self) -> usize {
        self.inner.packets.len()
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner
            .packets
            .first()
            .map_or(0, |p| p.packet.batch_size)
    }

    fn gradient(&self, packet: usize) -> PyResult<Vec<f64>> {
        Ok(self.packet(packet)?.packet.grad.as_slice().to_vec())
    }

    fn truth<'py>(&self, py: Python<'py>, packet: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.packet(packet)?
            .truth
            .iter()
            .map(|t| transition_dict(py, t))
            .collect()
    }

    fn training_log_csv(&self) -> PyResult<String> {
        self.inner.outcome.log.to_csv_string().map_err(py_err)
    }

    /// Inverts one packet. `config` is an attack config as JSON; `defense`
    /// is applied to the packet before the attacker sees it.
    #[pyo3(signature = (packet=0, config=None, seed=0, defense=None, defense_seed=0))]
    fn attack(
        &self,
        py: Python<'_>,
        packet: usize,
        config: Option<&str>,
        seed: u64,
        defense: Option<&str>,
        defense_seed: u64,
    ) -> PyResult<PyReconstruction> {
        let config: AttackConfig = from_json(config, "attack")?.unwrap_or_default();
        let defense: Option<DefenseSpec> = from_json(defense, "defense")?;
        let ip = self.packet(packet)?;
        let sc = &self.inner;
        let cfg = &self.config;
        py.detach(|| {
            let leaked = match &defense {
                Some(d) => d.apply(&ip.packet, &mut ChaCha8Rng::seed_from_u64(defense_seed))?,
                None => ip.packet.clone(),
            };
            let prior = if config.weights.alpha > 0.0 {
                Some(sc.prior(cfg.prior_size)?)
            } else {
                None
            };
            let model = if config.weights.gamma_dyn > 0.0 {
                Some(sc.model(cfg.model_data, &cfg.model_config(&sc.env))?)
            } else {
                None
            };
            let problem = AttackProblem::new(
                &sc.env,
                &leaked,
                &ip.snapshot,
                config.weights,
                prior.as_ref(),
                model.as_ref(),
            )?;
            let result = rgia_attack(&problem, &config, seed)?;
            let score = score_attack(&sc.env, &ip.truth, &result)?;
            Ok(PyReconstruction { result, score })
        })
        .map_err(py_err)
    }
}

impl PyScenario {
    fn packet(&self, i: usize) -> PyResult<&rgia_core::frlcore::InterceptedPacket> {
        self.inner
            .packets
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("no packet {i}")))
    }
}

/// Runs a whole experiment from its JSON config and returns the report
/// CSV and the JSON summary.
#[pyfunction]
#[pyo3(signature = (config, deterministic=true))]
fn run_experiment(py: Python<'_>, config: &str, deterministic: bool) -> PyResult<(String, String)> {
    let config = ExperimentConfig::from_json(config).map_err(py_err)?;
    config.validate().map_err(py_err)?;
    let out = py.detach(|| core_run_experiment(&config)).map_err(py_err)?;
    let opts = EmitOptions { deterministic };
    let csv = rows_to_csv(&out.rows, opts).map_err(py_err)?;
    let summary =
        serde_json::to_string_pretty(&summarize(&out.rows, opts)).map_err(|e| py_err(e.into()))?;
    Ok((csv, summary))
}

#[pyfunction]
fn mse(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::mse(&x, &y).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, max_val=1.0))]
fn psnr(a: Vec<f64>, b: Vec<f64>, max_val: f64) -> PyResult<f64> {
    metrics::psnr(&a, &b, max_val).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, width, window=8, data_range=1.0))]
fn ssim(a: Vec<f64>, b: Vec<f64>, width: usize, window: usize, data_range: f64) -> PyResult<f64> {
    let params = SsimParams {
        window,
        data_range,
        ..SsimParams::default()
    };
    metrics::ssim(&a, &b, width, &params).map_err(py_err)
}

#[pyfunction]
fn pairwise_euclidean(points: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::pairwise_euclidean(&points).map_err(py_err)
}

/// Mean silhouette and the per-point scores.
#[pyfunction]
fn silhouette(points: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, Vec<f64>)> {
    let s = metrics::silhouette(&points, &labels).map_err(py_err)?;
    Ok((s.mean, s.per_point))
}

#[pyfunction]
fn covariance_determinant(points: Vec<Vec<f64>>) -> PyResult<f64> {
    metrics::covariance_determinant(&points).map_err(py_err)
}

#[pyfunction(name = "quantize")]
fn py_quantize(values: Vec<f64>, bits: u8) -> PyResult<Vec<f64>> {
    DefenseSpec::quantize(bits).validate().map_err(py_err)?;
    Ok(quantize_values(&values, bits))
}

#[pyfunction(name = "reg_reward")]
fn py_reg_reward(r: f64, r_min: f64, r_max: f64) -> f64 {
    reg_reward(r, r_min, r_max)
}

#[pyfunction]
fn mix(seed: u64, a: u64, b: u64) -> u64 {
    core_mix(seed, a, b)
}

/// Prior size parser used by configs, exposed for checking user input.
#[pyfunction]
fn resolve_prior_size(size: &str, n: usize) -> PyResult<usize> {
    let s: PriorSize = from_json(Some(size), "prior size")?.expect("some");
    s.resolve(n).map_err(py_err)
}

#[pymodule]
fn rgia(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("NumericError", m.py().get_type::<NumericError>())?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyReconstruction>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_euclidean, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    m.add_function(wrap_pyfunction!(covariance_determinant, m)?)?;
    m.add_function(wrap_pyfunction!(py_quantize, m)?)?;
    m.add_function(wrap_pyfunction!(py_reg_reward, m)?)?;
    m.add_function(wrap_pyfunction!(mix, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_prior_size, m)?)?;
    Ok(())
}
