//! Python bindings for `rmmdp`.
//!
//! Models and policies are wrapped as classes. Structured results (reports,
//! moment files, fit results) come back as plain dicts built from the same
//! JSON the CLI writes.
//!
//! ```python
//! import rmmdp_py as rm
//! m = rm.Model.example_e1(2)
//! fitted, policy, summary = rm.em2(m, max_episodes=20000, seed=7)
//! print(summary["suboptimality"])
//! ```

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use rmmdp::analyze::{
    default_degree, default_policies, kl_identity as kl_identity_impl, verify_tv_bound, AdaptiveHashed, NamedEvent,
    Repeat, RewardBlind, Strategy,
};
use rmmdp::env::RmmdpEnv;
use rmmdp::explore::{estimate_moments, Dims, ExplorationConfig, MomentFile};
use rmmdp::fit::{fit_moment_matching, third_moment_predict as third_moment_impl, FitOptions};
use rmmdp::generate::{example_e1, random_model, uniform_rewards, RandomSpec};
use rmmdp::hardgen::{
    assemble_instance, build_mixture, instance_value_check, parity_check, Ansatz, MixtureOptions,
};
use rmmdp::io::{load_model, model_from_json, model_to_json, save_model};
use rmmdp::pipeline::{evaluate, fitted_model, run_em2, Em2Config};
use rmmdp::plan::{optimal_plan, BeliefPolicy};
use rmmdp::policy::{HashedPolicy, UniformPolicy};
use rmmdp::rng::{derive_seed, seeded};
use rmmdp::{moment_value, validate_model, Pair, Rmmdp, Step};

fn err(e: rmmdp::Error) -> PyErr {
    use rmmdp::Error as E;
    match e {
        E::Io(io) => PyOSError::new_err(io.to_string()),
        E::InvalidArgument(_) | E::Dimension(_) | E::InvalidModel(_) | E::Format(_) | E::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Serializes through JSON and hands the text to Python's `json.loads`.
fn to_py<'py, T: Serialize + ?Sized>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn pairs_of(pairs: Vec<(usize, usize)>) -> Vec<Pair> {
    pairs.into_iter().map(|(s, a)| Pair::new(s, a)).collect()
}

/// A reward-mixing MDP.
#[pyclass(name = "Model", module = "rmmdp_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: Rmmdp,
}

#[pymethods]
impl PyModel {
    /// Parses an `rmmdp/1` JSON document.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        model_from_json(text).map(|inner| PyModel { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_model(path).map(|inner| PyModel { inner }).map_err(err)
    }

    /// Single-state two-armed example with two reward contexts.
    #[staticmethod]
    #[pyo3(signature = (horizon=2))]
    fn example_e1(horizon: usize) -> Self {
        PyModel {
            inner: example_e1(horizon),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (states, actions, support, horizon, contexts, seed=0))]
    fn random(states: usize, actions: usize, support: usize, horizon: usize, contexts: usize, seed: u64) -> PyResult<Self> {
        if states == 0 || actions == 0 || support == 0 || horizon == 0 || contexts == 0 {
            return Err(PyValueError::new_err("all dimensions must be positive"));
        }
        let spec = RandomSpec {
            states,
            actions,
            support,
            horizon,
            contexts,
        };
        Ok(PyModel {
            inner: random_model(spec, &mut seeded(seed)),
        })
    }

    fn to_json(&self) -> PyResult<String> {
        model_to_json(&self.inner).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(path, &self.inner).map_err(err)
    }

    #[getter]
    fn num_states(&self) -> usize {
        self.inner.num_states()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn num_contexts(&self) -> usize {
        self.inner.num_contexts()
    }

    #[getter]
    fn support(&self) -> Vec<f64> {
        self.inner.support().values().to_vec()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    /// Simplex violations as `(description, residual)`; empty when valid.
    fn validate(&self) -> Vec<(String, f64)> {
        validate_model(&self.inner)
            .into_iter()
            .map(|v| (v.description, v.residual))
            .collect()
    }

    /// Joint reward probability `P(r_1 = z_1, …, r_n = z_n)` at the given
    /// `(state, action)` pairs.
    fn moment(&self, pairs: Vec<(usize, usize)>, z: Vec<usize>) -> PyResult<f64> {
        moment_value(&self.inner, &pairs_of(pairs), &z).map_err(err)
    }

    /// Same dynamics with a different latent part. `rewards` is flattened
    /// as `[context][state][action][z]`.
    fn with_latent(&self, weights: Vec<f64>, rewards: Vec<f64>) -> PyResult<Self> {
        self.inner
            .with_latent(weights, rewards)
            .map(|inner| PyModel { inner })
            .map_err(err)
    }

    /// Same dynamics with a single context of averaged rewards.
    fn uniform_rewards(&self) -> Self {
        PyModel {
            inner: uniform_rewards(&self.inner),
        }
    }

    /// Exact optimal history-dependent policy.
    fn plan(&self, py: Python<'_>) -> PyResult<PyPolicy> {
        let m = self.inner.clone();
        let (_, policy) = py.detach(move || optimal_plan(&m)).map_err(err)?;
        Ok(PyPolicy { inner: policy })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(states={}, actions={}, horizon={}, contexts={}, support={})",
            self.inner.num_states(),
            self.inner.num_actions(),
            self.inner.horizon(),
            self.inner.num_contexts(),
            self.inner.support_size()
        )
    }
}

/// Belief-state policy returned by planning.
#[pyclass(name = "Policy", module = "rmmdp_py", frozen)]
pub struct PyPolicy {
    inner: BeliefPolicy,
}

#[pymethods]
impl PyPolicy {
    /// Planned value on the model the policy was computed for.
    #[getter]
    fn value(&self) -> f64 {
        self.inner.value()
    }

    /// Posterior over contexts after `history`, a list of
    /// `(state, action, reward_index)` steps.
    fn belief_after(&self, history: Vec<(usize, usize, usize)>) -> PyResult<Vec<f64>> {
        let m = self.inner.model();
        if history.len() > m.horizon()
            || history
                .iter()
                .any(|&(s, a, z)| s >= m.num_states() || a >= m.num_actions() || z >= m.support_size())
        {
            return Err(PyValueError::new_err("history out of range"));
        }
        let steps: Vec<Step> = history
            .into_iter()
            .map(|(state, action, reward)| Step { state, action, reward })
            .collect();
        Ok(self.inner.belief_after(&steps))
    }

    fn action(&self, t: usize, belief: Vec<f64>, state: usize) -> PyResult<usize> {
        let m = self.inner.model();
        if t >= m.horizon() || state >= m.num_states() || belief.len() != m.num_contexts() {
            return Err(PyValueError::new_err("step, state or belief length out of range"));
        }
        Ok(self.inner.action(t, &belief, state))
    }

    fn decision_table<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.decision_table())
    }

    /// `V*`, `V^π` and the gap on `truth`, computed exactly.
    fn evaluate<'py>(&self, py: Python<'py>, truth: &PyModel) -> PyResult<Bound<'py, PyAny>> {
        let ev = evaluate(&truth.inner, &self.inner).map_err(err)?;
        to_py(py, &ev)
    }

    fn __repr__(&self) -> String {
        format!("Policy(value={}, entries={})", self.inner.value(), self.inner.len())
    }
}

/// Optimistic moment exploration against `model` used as a simulator.
/// Returns the moments file as a dict.
#[pyfunction]
#[pyo3(signature = (model, degree=2, epsilon=0.1, eta=0.1, max_episodes=10_000, batch=1, seed=0))]
#[allow(clippy::too_many_arguments)]
fn explore<'py>(
    py: Python<'py>,
    model: &PyModel,
    degree: usize,
    epsilon: f64,
    eta: f64,
    max_episodes: u64,
    batch: u64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ExplorationConfig {
        degree,
        epsilon,
        eta,
        max_episodes,
        batch,
        ..Default::default()
    };
    let m = model.inner.clone();
    let file = py
        .detach(move || {
            let mut env = RmmdpEnv::new(&m, seeded(derive_seed(seed, 0)));
            estimate_moments(&mut env, &cfg).map(|out| MomentFile::from_outcome(&out, m.support()))
        })
        .map_err(err)?;
    to_py(py, &file)
}

/// Fits a latent mixture to a moments file (dict or JSON text). Returns the
/// fitted model and the fit result.
#[pyfunction]
#[pyo3(signature = (moments, contexts=2, restarts=200, max_iters=500, slack_scale=1.0, seed=0))]
fn fit<'py>(
    py: Python<'py>,
    moments: &Bound<'py, PyAny>,
    contexts: usize,
    restarts: usize,
    max_iters: usize,
    slack_scale: f64,
    seed: u64,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let text: String = match moments.extract::<String>() {
        Ok(s) => s,
        Err(_) => py.import("json")?.call_method1("dumps", (moments,))?.extract()?,
    };
    let file: MomentFile = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let table = file.table().map_err(err)?;
    let opts = FitOptions {
        contexts,
        restarts,
        max_iters,
        slack_scale,
        seed,
        ..Default::default()
    };
    let dims: Dims = file.dims;
    let result = py
        .detach(|| fit_moment_matching(&table, file.iota_c, dims.states, dims.actions, &opts))
        .map_err(err)?;
    let support = rmmdp::RewardSupport::new(file.support.clone()).map_err(err)?;
    let model = fitted_model(dims, support, &file.transitions, &result.latent).map_err(err)?;
    Ok((PyModel { inner: model }, to_py(py, &result)?))
}

/// Explore, fit, plan, then evaluate on `model`. Returns
/// `(fitted_model, policy, summary)`; `summary["exit_code"]` matches the CLI.
#[pyfunction]
#[pyo3(signature = (model, contexts=2, degree=None, epsilon=0.1, eta=0.1, max_episodes=10_000, restarts=200, seed=0))]
#[allow(clippy::too_many_arguments)]
fn em2<'py>(
    py: Python<'py>,
    model: &PyModel,
    contexts: usize,
    degree: Option<usize>,
    epsilon: f64,
    eta: f64,
    max_episodes: u64,
    restarts: usize,
    seed: u64,
) -> PyResult<(PyModel, PyPolicy, Bound<'py, PyAny>)> {
    let truth = model.inner.clone();
    let mut cfg = Em2Config::for_contexts(contexts, truth.horizon());
    cfg.explore.degree = degree.unwrap_or_else(|| default_degree(contexts, truth.horizon()));
    cfg.explore.epsilon = epsilon;
    cfg.explore.eta = eta;
    cfg.explore.max_episodes = max_episodes;
    cfg.fit.restarts = restarts;
    cfg.fit.seed = derive_seed(seed, 1);
    let (run, ev) = py
        .detach(move || -> rmmdp::Result<_> {
            let mut env = RmmdpEnv::new(&truth, seeded(derive_seed(seed, 0)));
            let run = run_em2(&mut env, &cfg)?;
            let ev = evaluate(&truth, &run.policy)?;
            Ok((run, ev))
        })
        .map_err(err)?;
    let summary = serde_json::json!({
        "status": run.status,
        "exit_code": run.status.exit_code(),
        "episodes": run.exploration.episodes,
        "v_tilde_0": run.exploration.v0,
        "fit_feasible": run.fit.feasible,
        "fit_objective": run.fit.objective,
        "fit_retried": run.retried,
        "planned_value": run.planned_value,
        "v_star": ev.v_star,
        "v_policy": ev.v_policy,
        "suboptimality": ev.suboptimality,
    });
    Ok((
        PyModel { inner: run.fitted },
        PyPolicy { inner: run.policy },
        to_py(py, &summary)?,
    ))
}

/// Parity-chain hard instance. Returns the model and a dict with the
/// mixture, parity residuals and the value check.
#[pyfunction]
#[pyo3(signature = (contexts=2, degree=2, epsilon=None, actions=2, correct=None, symmetric=false, seed=0))]
#[allow(clippy::too_many_arguments)]
fn hardgen<'py>(
    py: Python<'py>,
    contexts: usize,
    degree: usize,
    epsilon: Option<f64>,
    actions: usize,
    correct: Option<Vec<usize>>,
    symmetric: bool,
    seed: u64,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let mix = build_mixture(&MixtureOptions {
        contexts,
        degree,
        epsilon,
        ansatz: if symmetric { Ansatz::SymmetricTwo } else { Ansatz::General },
        seed,
        ..Default::default()
    })
    .map_err(err)?;
    let correct = correct.unwrap_or_else(|| vec![0; degree]);
    let inst = assemble_instance(&mix, actions, &correct).map_err(err)?;
    let value = instance_value_check(&inst).map_err(err)?;
    let info = serde_json::json!({
        "epsilon": inst.epsilon,
        "correct": inst.correct,
        "mixture": inst.mixture,
        "parity": parity_check(&inst),
        "value_check": value,
    });
    let info = to_py(py, &info)?;
    Ok((PyModel { inner: inst.model }, info))
}

/// Eventwise TV bound check over the default policy set, using the
/// whole-trajectory event.
#[pyfunction]
#[pyo3(signature = (m1, m2, degree=None))]
fn tv_bound<'py>(py: Python<'py>, m1: &PyModel, m2: &PyModel, degree: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
    let d = degree.unwrap_or_else(|| default_degree(m1.inner.num_contexts().max(m2.inner.num_contexts()), m1.inner.horizon()));
    let report = verify_tv_bound(
        &m1.inner,
        &m2.inner,
        d,
        &default_policies(&m1.inner),
        &[NamedEvent::everything()],
    )
    .map_err(err)?;
    to_py(py, &report)
}

/// Both sides of the KL information identity over `episodes` episodes.
/// `strategy` is one of `uniform`, `hashed`, `adaptive`.
#[pyfunction]
#[pyo3(signature = (m1, m2, episodes=1, strategy="uniform", reward_blind=true, seed=0))]
fn kl_identity<'py>(
    py: Python<'py>,
    m1: &PyModel,
    m2: &PyModel,
    episodes: usize,
    strategy: &str,
    reward_blind: bool,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let base: Box<dyn Strategy> = match strategy {
        "uniform" => Box::new(Repeat(UniformPolicy)),
        "hashed" => Box::new(Repeat(HashedPolicy {
            seed,
            deterministic: false,
        })),
        "adaptive" => Box::new(AdaptiveHashed { seed }),
        other => return Err(PyValueError::new_err(format!("unknown strategy {other:?}"))),
    };
    let strategy: Box<dyn Strategy> = if reward_blind { Box::new(RewardBlind(base)) } else { base };
    let r = kl_identity_impl(&m1.inner, &m2.inner, strategy.as_ref(), episodes).map_err(err)?;
    to_py(py, &r)
}

/// Third moment implied by the first two of a balanced two-point mixture.
#[pyfunction]
fn third_moment_predict(m1: [f64; 3], m2: [f64; 3]) -> f64 {
    third_moment_impl(m1, m2)
}

#[pymodule]
fn rmmdp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(explore, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(em2, m)?)?;
    m.add_function(wrap_pyfunction!(hardgen, m)?)?;
    m.add_function(wrap_pyfunction!(tv_bound, m)?)?;
    m.add_function(wrap_pyfunction!(kl_identity, m)?)?;
    m.add_function(wrap_pyfunction!(third_moment_predict, m)?)?;
    Ok(())
}
