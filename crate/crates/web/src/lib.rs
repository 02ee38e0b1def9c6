//! Browser bindings: run a small scenario, inspect a topology, and show the
//! counterexamples. Each call returns a JSON string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use dmpc::config::ScenarioConfig;
use dmpc::sim;
use dmpc::stability::counterexample_norms;
use dmpc::topology::{nilpotency_index, terminal_error_matrix, Generator, TopologyGraph};

/// Largest platoon the demo accepts; keeps a browser run to a few seconds.
pub const MAX_DEMO_VEHICLES: usize = 12;

#[derive(Debug, Serialize)]
struct SimulationView {
    dt: f64,
    leader_velocity: Vec<f64>,
    /// `[vehicle - 1][t]`
    velocity: Vec<Vec<f64>>,
    spacing_error: Vec<Vec<f64>>,
    spacing_rmse: Vec<f64>,
    max_abs_spacing_error: f64,
    lyapunov: Vec<f64>,
    monitor_violations: usize,
}

/// Runs the scenario in `config` (a scenario JSON document).
pub fn simulate_json(config: &str) -> Result<String, String> {
    let cfg = ScenarioConfig::from_json(config).map_err(|e| e.to_string())?;
    if cfg.n > MAX_DEMO_VEHICLES {
        return Err(format!("the demo runs at most {MAX_DEMO_VEHICLES} followers"));
    }
    let scenario = cfg.resolve().map_err(|e| e.to_string())?;
    let out = sim::run(&scenario).map_err(|e| e.to_string())?;
    let n = cfg.n;
    let h = &out.history;
    let per_vehicle = |f: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
        (0..n).map(|k| (0..h.states.len()).map(|t| f(t, k)).collect()).collect()
    };
    let view = SimulationView {
        dt: h.dt,
        leader_velocity: h.leader.iter().map(|x| x.velocity).collect(),
        velocity: per_vehicle(&|t, k| h.states[t][k].velocity),
        spacing_error: per_vehicle(&|t, k| out.metrics.spacing_errors[t][k]),
        spacing_rmse: out.metrics.vehicles.iter().map(|m| m.spacing_rmse).collect(),
        max_abs_spacing_error: out.metrics.max_abs_spacing_error(),
        lyapunov: out.lyapunov.rows.iter().map(|r| r.total).collect(),
        monitor_violations: out.lyapunov_violations(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
struct TopologyView {
    edges: Vec<(usize, usize)>,
    connected: bool,
    problem: Option<String>,
    nilpotency_index: Option<usize>,
}

/// Connectivity verdict and terminal-error nilpotency index for a named
/// topology (`pf`, `bd`, `two-pred`, `leader-broadcast`).
pub fn check_topology_json(generator: &str, n: usize, dt: f64, delta_h: f64) -> Result<String, String> {
    let g: Generator = serde_json::from_value(serde_json::Value::String(generator.to_string()))
        .map_err(|_| format!("unknown topology `{generator}`"))?;
    let graph = TopologyGraph::generate(g, n).map_err(|e| e.to_string())?;
    let verdict = graph.validate_connectivity();
    let index = match verdict {
        Ok(()) => terminal_error_matrix(&graph, dt, delta_h)
            .and_then(|t| nilpotency_index(&t))
            .ok(),
        Err(_) => None,
    };
    let view = TopologyView {
        edges: graph.edges().collect(),
        connected: verdict.is_ok(),
        problem: verdict.err().map(|v| v.to_string()),
        nilpotency_index: index,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

/// Both counterexamples, as numbers and as a printable report.
pub fn counterexample_json() -> String {
    let report = counterexample_norms();
    serde_json::json!({
        "case1_lhs": report.weighted_norms.lhs,
        "case1_rhs": report.weighted_norms.rhs,
        "case2_gap": report.scaled_norms.gap(),
        "text": report.to_string(),
    })
    .to_string()
}

#[wasm_bindgen]
pub fn simulate(config: &str) -> Result<String, JsError> {
    simulate_json(config).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = checkTopology)]
pub fn check_topology(generator: &str, n: usize, dt: f64, delta_h: f64) -> Result<String, JsError> {
    check_topology_json(generator, n, dt, delta_h).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn counterexample() -> String {
    counterexample_json()
}
