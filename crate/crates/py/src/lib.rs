//! Python bindings. Structured results cross the boundary as JSON strings.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use traj_clone::controller::solve_discrete_riccati;
use traj_clone::harness::artifacts::Artifacts;
use traj_clone::harness::commands;
use traj_clone::harness::config::ExperimentConfig;
use traj_clone::harness::verify::run_verify;
use traj_clone::harness::HarnessError;
use traj_clone::losses::{cvar_estimate, cvar_percentile_curve, gmm_nll_raw, GmmLayout};

create_exception!(trajclone, TrajCloneError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    TrajCloneError::new_err(e.to_string())
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(err)
}

/// Runs one CLI subcommand ("gen-data", "train", "finetune-cvar", "eval",
/// "grid-search", "report", "verify") and returns its result as JSON.
#[pyfunction]
#[pyo3(signature = (command, out, config=None, seed=None, agent=None))]
fn run(command: &str, out: PathBuf, config: Option<PathBuf>, seed: Option<u64>, agent: Option<String>) -> PyResult<String> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(&p).map_err(err)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if agent.is_some() {
        cfg.eval.agent = agent;
    }
    let art = Artifacts::new(out);
    let json = |r: Result<serde_json::Value, HarnessError>| r.map_err(err).and_then(|v| to_json(&v));
    match command {
        "gen-data" => json(commands::gen_data(&art, &cfg).map(|n| serde_json::json!({ "records": n }))),
        "train" => json(commands::train_cmd(&art, &cfg).map(|n| serde_json::json!({ "checkpoint": n }))),
        "finetune-cvar" => json(commands::finetune_cmd(&art, &cfg).map(|n| serde_json::json!({ "checkpoint": n }))),
        "eval" => to_json(&commands::eval_cmd(&art, &cfg).map_err(err)?),
        "grid-search" => json(
            commands::grid_cmd(&art, &cfg).map(|(best, rows)| serde_json::json!({ "best_w_aff": best, "rows": rows })),
        ),
        "report" => to_json(&commands::report_cmd(&art, &cfg).map_err(err)?),
        "verify" => to_json(&commands::verify_cmd(&art, &cfg).map_err(err)?),
        other => Err(PyValueError::new_err(format!("unknown command {other:?}"))),
    }
}

/// Default experiment config as TOML.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_toml_string()
}

/// Oracle checks without writing files; JSON report.
#[pyfunction]
fn verify(seed: u64) -> PyResult<String> {
    to_json(&run_verify(seed).map_err(err)?)
}

/// Empirical CVaR: mean of the losses at or above the α-quantile.
#[pyfunction]
fn cvar(losses: Vec<f64>, alpha: f64) -> PyResult<f64> {
    cvar_estimate(&losses, alpha).map_err(err)
}

/// CVaR at every integer percentile, as (percent, value) pairs.
#[pyfunction]
fn cvar_curve(losses: Vec<f64>) -> PyResult<Vec<(u32, f64)>> {
    cvar_percentile_curve(&losses).map_err(err)
}

/// Mixture negative log-likelihood of `target` under raw head outputs laid
/// out as [logits | means | log-variances]; returns (loss, gradient).
#[pyfunction]
fn gmm_nll(raw: Vec<f64>, modes: usize, dim: usize, target: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    let layout = GmmLayout::new(modes, dim);
    if raw.len() != layout.raw_len() || target.len() != dim {
        return Err(PyValueError::new_err(format!(
            "expected {} raw outputs and a {dim}-dim target, got {} and {}",
            layout.raw_len(),
            raw.len(),
            target.len()
        )));
    }
    let mut grad = vec![0.0; raw.len()];
    let loss = gmm_nll_raw(&raw, layout, &target, &mut grad);
    Ok((loss, grad))
}

fn matrix(rows: Vec<Vec<f64>>, name: &str) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err(format!("{name} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Discrete algebraic Riccati solution; returns (P, K) with u = -K x.
#[pyfunction]
#[pyo3(signature = (a, b, q, r, tol=1e-12, max_iter=100_000))]
fn solve_dare(
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    tol: f64,
    max_iter: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let sol = solve_discrete_riccati(&matrix(a, "a")?, &matrix(b, "b")?, &matrix(q, "q")?, &matrix(r, "r")?, tol, max_iter)
        .map_err(err)?;
    Ok((rows(&sol.p), rows(&sol.gain)))
}

#[pymodule]
fn trajclone(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TrajCloneError", m.py().get_type::<TrajCloneError>())?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(cvar, m)?)?;
    m.add_function(wrap_pyfunction!(cvar_curve, m)?)?;
    m.add_function(wrap_pyfunction!(gmm_nll, m)?)?;
    m.add_function(wrap_pyfunction!(solve_dare, m)?)?;
    Ok(())
}
