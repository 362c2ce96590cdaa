//! Python bindings. Records cross the boundary as plain dicts and lists
//! shaped like the trace file, and results come back the same way. Every
//! function runs the same core code as the `turncredit` command.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};
use serde::Serialize;
use serde_json::Value;

use turncredit_core::advantage::{self, AdvantageParams, ObjectiveInputs};
use turncredit_core::assignment::{self, SinkhornParams};
use turncredit_core::config::EngineConfig;
use turncredit_core::matching::{self, MatchOptions, SimilarityMatrix};
use turncredit_core::pipeline::{self, to_json_line};
use turncredit_core::reward;
use turncredit_core::trace::RolloutGroup;

fn err(e: turncredit_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_value(obj: &Bound<'_, PyAny>) -> PyResult<Value> {
    let json = obj.py().import("json")?;
    let text: String = json.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?
        .call_method1("loads", (to_json_line(value),))
}

fn config(cfg: Option<&Bound<'_, PyDict>>) -> PyResult<EngineConfig> {
    let mut out = EngineConfig::default();
    if let Some(dict) = cfg {
        for (key, value) in dict.iter() {
            let key: String = key.extract()?;
            let text = if value.is_instance_of::<PyBool>() {
                value.extract::<bool>()?.to_string()
            } else {
                value.str()?.to_string()
            };
            out.set(&key, &text).map_err(err)?;
        }
    }
    out.validate().map_err(err)?;
    Ok(out)
}

fn group(record: &Bound<'_, PyAny>, cfg: &EngineConfig) -> PyResult<RolloutGroup> {
    RolloutGroup::from_json(to_value(record)?, cfg.max_turns).map_err(err)
}

fn groups(records: &Bound<'_, PyAny>, cfg: &EngineConfig) -> PyResult<Vec<RolloutGroup>> {
    records.try_iter()?.map(|r| group(&r?, cfg)).collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<SimilarityMatrix> {
    SimilarityMatrix::from_rows(&rows).map_err(err)
}

/// Scores one rollout group: reward records, advantage records and the
/// advantage table (the last two are None when the group is too small for
/// the configured variant).
#[pyfunction]
#[pyo3(signature = (record, config=None))]
fn score_group<'py>(
    py: Python<'py>,
    record: &Bound<'py, PyAny>,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = self::config(config)?;
    let g = group(record, &cfg)?;
    let report = py
        .detach(|| pipeline::group_report(&g, &cfg))
        .map_err(err)?;
    to_py(py, &report)
}

fn lines<T: Serialize>(records: Vec<T>) -> Vec<String> {
    records.iter().map(to_json_line).collect()
}

/// JSON lines identical to `turncredit match`.
#[pyfunction]
#[pyo3(signature = (records, config=None))]
fn match_lines(
    py: Python<'_>,
    records: &Bound<'_, PyAny>,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<Vec<String>> {
    let cfg = self::config(config)?;
    let gs = groups(records, &cfg)?;
    py.detach(|| pipeline::match_records(&gs, &cfg))
        .map(lines)
        .map_err(err)
}

/// JSON lines identical to `turncredit reward`.
#[pyfunction]
#[pyo3(signature = (records, config=None))]
fn reward_lines(
    py: Python<'_>,
    records: &Bound<'_, PyAny>,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<Vec<String>> {
    let cfg = self::config(config)?;
    let gs = groups(records, &cfg)?;
    py.detach(|| pipeline::reward_records(&gs, &cfg))
        .map(lines)
        .map_err(err)
}

/// JSON lines identical to `turncredit advantage` without a layout file.
#[pyfunction]
#[pyo3(signature = (records, config=None))]
fn advantage_lines(
    py: Python<'_>,
    records: &Bound<'_, PyAny>,
    config: Option<&Bound<'_, PyDict>>,
) -> PyResult<Vec<String>> {
    let cfg = self::config(config)?;
    let gs = groups(records, &cfg)?;
    py.detach(|| pipeline::advantage_records_for(&gs, &cfg, None))
        .map(lines)
        .map_err(err)
}

/// Similarity matrix between one rollout's calls and the golden calls.
#[pyfunction]
#[pyo3(signature = (record, rollout_index=0, case_sensitive=false))]
fn build_matrix(
    record: &Bound<'_, PyAny>,
    rollout_index: usize,
    case_sensitive: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let g = group(record, &EngineConfig::default())?;
    let traj = g
        .rollouts
        .get(rollout_index)
        .ok_or_else(|| PyValueError::new_err(format!("rollout {rollout_index} out of range")))?;
    Ok(matching::build_matrix(traj, &g.ground_truth, MatchOptions { case_sensitive }).to_rows())
}

#[pyfunction]
#[pyo3(signature = (similarity, penalty=0.0))]
fn hard_rewards<'py>(
    py: Python<'py>,
    similarity: Vec<Vec<f64>>,
    penalty: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let credit = assignment::hard_rewards(&matrix(similarity)?, penalty).map_err(err)?;
    to_py(py, &credit)
}

#[pyfunction]
#[pyo3(signature = (similarity, temperature=0.05, cost_transform="linear", max_iter=1000, tol=1e-9))]
fn soft_rewards<'py>(
    py: Python<'py>,
    similarity: Vec<Vec<f64>>,
    temperature: f64,
    cost_transform: &str,
    max_iter: usize,
    tol: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let transform = cost_transform.parse().map_err(err)?;
    let params = SinkhornParams {
        temperature,
        max_iter,
        tol,
    };
    let credit = assignment::soft_credit(&matrix(similarity)?, transform, params).map_err(err)?;
    to_py(py, &credit)
}

/// Per-turn reward schedule of one rollout under `config`.
#[pyfunction]
#[pyo3(signature = (record, rollout_index=0, config=None))]
fn assemble_schedule<'py>(
    py: Python<'py>,
    record: &Bound<'py, PyAny>,
    rollout_index: usize,
    config: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = self::config(config)?;
    let g = group(record, &cfg)?;
    let traj = g
        .rollouts
        .get(rollout_index)
        .ok_or_else(|| PyValueError::new_err(format!("rollout {rollout_index} out of range")))?;
    let score = pipeline::score_rollout(traj, &g.ground_truth, &cfg).map_err(err)?;
    to_py(py, &score.schedule)
}

/// Advantage table from per-turn rewards of a group.
#[pyfunction]
#[pyo3(signature = (per_turn, gamma=0.9, variant="dual", guard=1e-6, wp_scale=0.1))]
fn compute_advantages<'py>(
    py: Python<'py>,
    per_turn: Vec<Vec<f64>>,
    gamma: f64,
    variant: &str,
    guard: f64,
    wp_scale: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let params = AdvantageParams {
        gamma,
        guard,
        variant: variant.parse().map_err(err)?,
        wp_scale,
    };
    let table = advantage::compute_advantages(&per_turn, &params).map_err(err)?;
    to_py(py, &table)
}

#[pyfunction]
fn outcome_f1(predicted: &str, golden: &str) -> f64 {
    reward::outcome_f1(predicted, golden)
}

#[pyfunction]
#[pyo3(signature = (logprob_new, logprob_old, logprob_ref, advantages, mask, clip_range=0.2, kl_coeff=0.001))]
fn grpo_objective(
    logprob_new: Vec<Vec<f64>>,
    logprob_old: Vec<Vec<f64>>,
    logprob_ref: Vec<Vec<f64>>,
    advantages: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
    clip_range: f64,
    kl_coeff: f64,
) -> PyResult<f64> {
    let inputs = ObjectiveInputs {
        logprob_new,
        logprob_old,
        logprob_ref,
        clip_range,
        kl_coeff,
    };
    advantage::grpo_objective(&inputs, &advantages, &mask).map_err(err)
}

#[pymodule]
fn turncredit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", turncredit_core::VERSION)?;
    m.add_function(wrap_pyfunction!(score_group, m)?)?;
    m.add_function(wrap_pyfunction!(match_lines, m)?)?;
    m.add_function(wrap_pyfunction!(reward_lines, m)?)?;
    m.add_function(wrap_pyfunction!(advantage_lines, m)?)?;
    m.add_function(wrap_pyfunction!(build_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(hard_rewards, m)?)?;
    m.add_function(wrap_pyfunction!(soft_rewards, m)?)?;
    m.add_function(wrap_pyfunction!(assemble_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(compute_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(outcome_f1, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_objective, m)?)?;
    Ok(())
}
