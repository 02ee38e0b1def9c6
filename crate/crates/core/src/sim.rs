//! Synchronous platoon simulation: every follower solves its local problem,
//! shifts its plan into the next assumed trajectory, exchanges it with its
//! neighbors, and applies the first planned input.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::comm::{CommError, Inbox, MessageBus, TrajectoryMessage};
use crate::config::Scenario;
use crate::model::{step, ModelError, VehicleState};
use crate::ocp::{advance_assumed, init_assumed, leader_assumed, LocalController, OcpError, OcpSpec, Trajectory};
use crate::spacing::desired_output;
use crate::stability::{check_weight_condition, lyapunov_step, LyapunovRow, LyapunovTrace, StepSnapshot, WeightReport};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error("message exchange failed: {0}")]
    Comm(#[from] CommError),
    #[error("vehicle {vehicle} at step {timestep}: {source}")]
    Model {
        vehicle: usize,
        timestep: u64,
        source: ModelError,
    },
}

/// Everything that happened during a run. Indexing is `[t][i - 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct History {
    pub dt: f64,
    /// Leader state for `t = 0..=steps` (acceleration unused).
    pub leader: Vec<VehicleState>,
    pub states: Vec<Vec<VehicleState>>,
    /// Applied inputs for `t = 0..steps`.
    pub inputs: Vec<Vec<f64>>,
    /// `|| y*_t(H) - y^des_t(H) ||_inf` per solved step.
    pub terminal_errors: Vec<Vec<f64>>,
    pub solver_iterations: Vec<Vec<usize>>,
    /// Number of solves where the shifted previous plan was kept.
    pub candidates_adopted: usize,
}

impl History {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VehicleMetrics {
    pub vehicle: usize,
    pub spacing_rmse: f64,
    pub spacing_max_abs: f64,
    pub velocity_rmse: f64,
    pub velocity_max_abs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quartiles {
    /// Linear-interpolation quartiles; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let at = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        Some(Self {
            min: v[0],
            q1: at(0.25),
            median: at(0.5),
            q3: at(0.75),
            max: v[v.len() - 1],
        })
    }
}

/// Predecessor errors per step (`[t][i - 1]`, `t = 0..=steps`) and their
/// per-vehicle aggregates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsTable {
    pub spacing_errors: Vec<Vec<f64>>,
    pub velocity_errors: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub vehicles: Vec<VehicleMetrics>,
}

impl MetricsTable {
    /// Quartiles of one aggregate over vehicles `2..=N` (vehicle 1 follows
    /// the virtual leader and is excluded).
    pub fn quartiles(&self, field: impl Fn(&VehicleMetrics) -> f64) -> Option<Quartiles> {
        let values: Vec<f64> = self.vehicles.iter().skip(1).map(field).collect();
        Quartiles::of(&values)
    }

    pub fn max_abs_spacing_error(&self) -> f64 {
        self.vehicles.iter().map(|m| m.spacing_max_abs).fold(0.0, f64::max)
    }
}

/// Root-mean-square and largest magnitude of a series.
pub fn rmse_and_max(series: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let mut sum = 0.0;
    let mut max = 0.0f64;
    let mut n = 0usize;
    for e in series {
        sum += e * e;
        max = max.max(e.abs());
        n += 1;
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        ((sum / n as f64).sqrt(), max)
    }
}

/// Builds the metrics table from a history: `e_i = p_{i-1} - p_i - d_i(v_i)`
/// and `v_{i-1} - v_i`, with vehicle 1 measured against the leader.
pub fn metrics(history: &History, scenario: &Scenario) -> MetricsTable {
    let n = scenario.config.n;
    let mut spacing_errors = Vec::with_capacity(history.states.len());
    let mut velocity_errors = Vec::with_capacity(history.states.len());
    for (leader, row) in history.leader.iter().zip(&history.states) {
        let mut e = Vec::with_capacity(n);
        let mut ev = Vec::with_capacity(n);
        for i in 1..=n {
            let pred = if i == 1 { leader } else { &row[i - 2] };
            let me = &row[i - 1];
            let gap = scenario.spacing.policy(i).gap(me.velocity);
            e.push(pred.position - me.position - gap);
            ev.push(pred.velocity - me.velocity);
        }
        spacing_errors.push(e);
        velocity_errors.push(ev);
    }
    let vehicles = (1..=n)
        .map(|i| {
            let (spacing_rmse, spacing_max_abs) = rmse_and_max(spacing_errors.iter().map(|r| r[i - 1]));
            let (velocity_rmse, velocity_max_abs) = rmse_and_max(velocity_errors.iter().map(|r| r[i - 1]));
            VehicleMetrics {
                vehicle: i,
                spacing_rmse,
                spacing_max_abs,
                velocity_rmse,
                velocity_max_abs,
            }
        })
        .collect();
    MetricsTable {
        spacing_errors,
        velocity_errors,
        inputs: history.inputs.clone(),
        vehicles,
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub history: History,
    pub metrics: MetricsTable,
    pub lyapunov: LyapunovTrace,
    pub weight_report: WeightReport,
}

impl SimOutput {
    /// Monitored steps whose bounds failed.
    pub fn lyapunov_violations(&self) -> usize {
        self.lyapunov.violations(self.weight_report.pass).len()
    }
}

/// Whether the step `t -> t + 1` lies in the regime the stability results
/// cover: the leader speed has been constant for at least `N` steps.
fn monitor_active(scenario: &Scenario, t: usize) -> bool {
    let n = scenario.config.n;
    if t < n {
        return false;
    }
    let dt = scenario.config.dt;
    let v = scenario.config.leader.velocity((t + 1) as f64 * dt);
    (t - n..=t).all(|s| scenario.config.leader.velocity(s as f64 * dt) == v)
}

fn leader_state(scenario: &Scenario, t: usize) -> VehicleState {
    let (p, v) = scenario.config.leader.state(t as f64 * scenario.config.dt);
    VehicleState::new(p, v, 0.0)
}

struct Executor {
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Executor {
    fn new() -> Self {
        #[cfg(feature = "parallel")]
        {
            let threads = std::env::var("DMPC_THREADS")
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .unwrap_or(0);
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().ok();
            Self { pool }
        }
        #[cfg(not(feature = "parallel"))]
        Self {}
    }

    fn map<T, R, F>(&self, items: &mut [T], f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(usize, &mut T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter_mut().enumerate().map(|(k, x)| f(k, x)).collect());
        }
        items.iter_mut().enumerate().map(|(k, x)| f(k, x)).collect()
    }
}

fn neighbor_map(inbox: &Inbox) -> BTreeMap<usize, Trajectory> {
    inbox
        .iter()
        .map(|(&j, msg)| (j, Trajectory::from_outputs(msg.samples.clone())))
        .collect()
}

/// Runs the scenario for `duration / dt` steps.
pub fn run(scenario: &Scenario) -> Result<SimOutput, SimError> {
    let cfg = &scenario.config;
    let n = cfg.n;
    let h = cfg.horizon;
    let dt = cfg.dt;
    let graph = &scenario.graph;
    let weight_report = check_weight_condition(graph, &scenario.weights);
    if !weight_report.pass {
        log::warn!("weight condition fails (sufficient only, continuing):\n{weight_report}");
    }
    let info_pre: Vec<BTreeSet<usize>> = (1..=n).map(|i| graph.info_pre_set(i)).collect();
    let executor = Executor::new();
    let bus = MessageBus::new(graph);

    let mut states = scenario.initial_states.clone();
    let mut own: Vec<Trajectory> = states
        .iter()
        .zip(&scenario.params)
        .map(|(x, p)| init_assumed(x, p, h, dt))
        .collect();
    let mut controllers: Vec<LocalController> = (0..n).map(|_| LocalController::new(cfg.solver.clone())).collect();

    let publish = |t: usize, own: &[Trajectory]| -> Result<Vec<BTreeMap<usize, Trajectory>>, SimError> {
        let leader = leader_state(scenario, t);
        let l = leader_assumed(leader.position, leader.velocity, h, dt);
        bus.post(TrajectoryMessage::new(0, t as u64, l.outputs)?)?;
        for (k, a) in own.iter().enumerate() {
            bus.post(TrajectoryMessage::new(k + 1, t as u64, a.outputs.clone())?)?;
        }
        let inboxes = bus.exchange(t as u64)?;
        Ok(inboxes[1..].iter().map(neighbor_map).collect())
    };
    let mut neighbors = publish(0, &own)?;

    let steps = scenario.steps;
    let mut history = History {
        dt,
        leader: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps),
        terminal_errors: Vec::with_capacity(steps),
        solver_iterations: Vec::with_capacity(steps),
        candidates_adopted: 0,
    };
    let mut trace = LyapunovTrace::default();
    let mut previous: Option<(StepSnapshot, bool)> = None;

    for t in 0..steps {
        let leader = leader_state(scenario, t);
        history.leader.push(leader);
        history.states.push(states.clone());
        let leader_traj = leader_assumed(leader.position, leader.velocity, h, dt);

        let results = executor.map(&mut controllers, |k, ctrl| {
            let spec = OcpSpec {
                vehicle: k + 1,
                timestep: t as u64,
                params: scenario.params[k],
                weights: &scenario.weights[k],
                horizon: h,
                dt,
                state: states[k],
                own_assumed: &own[k],
                neighbors: &neighbors[k],
                info_pre: &info_pre[k],
                spacing: &scenario.spacing,
                soft_terminal: cfg.soft_terminal,
            };
            let plan = ctrl.solve(&spec)?;
            let value = spec.plan_cost(&plan);
            Ok::<_, OcpError>((plan, value, ctrl.last_iterations, ctrl.candidate_adopted))
        });
        let mut plans = Vec::with_capacity(n);
        let mut values = vec![0.0; n + 1];
        let mut iterations = Vec::with_capacity(n);
        for (k, r) in results.into_iter().enumerate() {
            let (plan, value, iters, adopted) = r?;
            values[k + 1] = value;
            iterations.push(iters);
            history.candidates_adopted += usize::from(adopted);
            plans.push(plan);
        }
        history.solver_iterations.push(iterations);

        let lead_terminal = leader_traj.terminal();
        history.terminal_errors.push(
            plans
                .iter()
                .enumerate()
                .map(|(k, plan)| {
                    let des = desired_output(k + 1, lead_terminal, leader.velocity, &scenario.spacing);
                    let y = plan.terminal();
                    (y.position - des.position).abs().max((y.velocity - des.velocity).abs())
                })
                .collect(),
        );

        if let Some((snap, active)) = previous.take() {
            let step = (cfg.lyapunov_monitor && active).then(|| {
                lyapunov_step(
                    graph,
                    &scenario.weights,
                    &scenario.spacing,
                    &snap,
                    &values,
                    weight_report.pass,
                )
            });
            trace.rows.push(LyapunovRow {
                timestep: snap.timestep,
                values: snap.values[1..].to_vec(),
                total: snap.total(),
                step,
            });
        }

        let next_own: Vec<Trajectory> = plans
            .iter()
            .zip(&scenario.params)
            .map(|(p, params)| advance_assumed(p, params, dt))
            .collect();

        let mut applied = Vec::with_capacity(n);
        for (k, plan) in plans.iter().enumerate() {
            let u = plan.inputs[0];
            states[k] = step(&states[k], u, &scenario.params[k], dt).map_err(|source| SimError::Model {
                vehicle: k + 1,
                timestep: t as u64,
                source,
            })?;
            applied.push(u);
        }
        history.inputs.push(applied);

        let mut assumed = Vec::with_capacity(n + 1);
        assumed.push(leader_traj.clone());
        assumed.extend(own.iter().cloned());
        let mut all_plans = Vec::with_capacity(n + 1);
        all_plans.push(leader_traj);
        all_plans.extend(plans);
        previous = Some((
            StepSnapshot {
                timestep: t as u64,
                plans: all_plans,
                assumed,
                values,
            },
            monitor_active(scenario, t),
        ));

        own = next_own;
        neighbors = publish(t + 1, &own)?;
        if t % 100 == 0 {
            log::debug!("step {t}/{steps}");
        }
    }
    history.leader.push(leader_state(scenario, steps));
    history.states.push(states);
    if let Some((snap, _)) = previous {
        trace.rows.push(LyapunovRow {
            timestep: snap.timestep,
            values: snap.values[1..].to_vec(),
            total: snap.total(),
            step: None,
        });
    }

    let metrics = metrics(&history, scenario);
    Ok(SimOutput {
        history,
        metrics,
        lyapunov: trace,
        weight_report,
    })
}

fn num(out: &mut String, x: f64) {
    let _ = write!(out, ",{x:.16e}");
}

/// `t,p0,v0,p1,v1,a1,u1,...`; the input columns are empty on the final row.
pub fn trajectory_csv(history: &History) -> String {
    let n = history.states.first().map_or(0, Vec::len);
    let mut out = String::from("t,p0,v0");
    for i in 1..=n {
        let _ = write!(out, ",p{i},v{i},a{i},u{i}");
    }
    out.push('\n');
    for (t, (leader, row)) in history.leader.iter().zip(&history.states).enumerate() {
        let _ = write!(out, "{:.16e}", t as f64 * history.dt);
        num(&mut out, leader.position);
        num(&mut out, leader.velocity);
        for (k, x) in row.iter().enumerate() {
            num(&mut out, x.position);
            num(&mut out, x.velocity);
            num(&mut out, x.acceleration);
            match history.inputs.get(t) {
                Some(u) => num(&mut out, u[k]),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// `t,e1,ev1,...`: spacing and velocity error to the predecessor.
pub fn errors_csv(history: &History, m: &MetricsTable) -> String {
    let n = m.vehicles.len();
    let mut out = String::from("t");
    for i in 1..=n {
        let _ = write!(out, ",e{i},ev{i}");
    }
    out.push('\n');
    for (t, (e, ev)) in m.spacing_errors.iter().zip(&m.velocity_errors).enumerate() {
        let _ = write!(out, "{:.16e}", t as f64 * history.dt);
        for (a, b) in e.iter().zip(ev) {
            num(&mut out, *a);
            num(&mut out, *b);
        }
        out.push('\n');
    }
    out
}

/// One row per vehicle, then min/q1/median/q3/max over vehicles `2..=N`.
pub fn summary_csv(m: &MetricsTable) -> String {
    let mut out = String::from("vehicle,spacing_rmse,spacing_max_abs,velocity_rmse,velocity_max_abs\n");
    for v in &m.vehicles {
        out.push_str(&v.vehicle.to_string());
        for x in [v.spacing_rmse, v.spacing_max_abs, v.velocity_rmse, v.velocity_max_abs] {
            num(&mut out, x);
        }
        out.push('\n');
    }
    let cols: [fn(&VehicleMetrics) -> f64; 4] = [
        |v| v.spacing_rmse,
        |v| v.spacing_max_abs,
        |v| v.velocity_rmse,
        |v| v.velocity_max_abs,
    ];
    let qs: Vec<Quartiles> = cols.iter().filter_map(|f| m.quartiles(f)).collect();
    if qs.len() == cols.len() {
        let picks: [(&str, fn(&Quartiles) -> f64); 5] = [
            ("min", |q| q.min),
            ("q1", |q| q.q1),
            ("median", |q| q.median),
            ("q3", |q| q.q3),
            ("max", |q| q.max),
        ];
        for (label, pick) in picks {
            out.push_str(label);
            for q in &qs {
                num(&mut out, pick(q));
            }
            out.push('\n');
        }
    }
    out
}

/// `t,V1..VN,V,dV,bound,monitored`; `dV` is empty on the last row and
/// `bound` is empty where the step was not monitored.
pub fn lyapunov_csv(dt: f64, trace: &LyapunovTrace) -> String {
    let n = trace.rows.first().map_or(0, |r| r.values.len());
    let mut out = String::from("t");
    for i in 1..=n {
        let _ = write!(out, ",V{i}");
    }
    out.push_str(",V,dV,bound,monitored\n");
    for (k, row) in trace.rows.iter().enumerate() {
        let _ = write!(out, "{:.16e}", row.timestep as f64 * dt);
        for v in &row.values {
            num(&mut out, *v);
        }
        num(&mut out, row.total);
        match trace.rows.get(k + 1) {
            Some(next) => num(&mut out, next.total - row.total),
            None => out.push(','),
        }
        match &row.step {
            Some(s) => {
                num(&mut out, s.bound);
                out.push_str(",1");
            }
            None => out.push_str(",,0"),
        }
        out.push('\n');
    }
    out
}

/// Writes the four CSV files and `run.json` into `dir`.
pub fn write_outputs(dir: &Path, scenario: &Scenario, output: &SimOutput) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("trajectory.csv"), trajectory_csv(&output.history))?;
    fs::write(dir.join("errors.csv"), errors_csv(&output.history, &output.metrics))?;
    fs::write(dir.join("summary.csv"), summary_csv(&output.metrics))?;
    fs::write(
        dir.join("lyapunov.csv"),
        lyapunov_csv(scenario.config.dt, &output.lyapunov),
    )?;
    fs::write(dir.join("run.json"), scenario.config.to_json() + "\n")?;
    Ok(())
}
