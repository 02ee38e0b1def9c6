//! Local optimal control problem of one follower.
//!
//! Every follower `i` plans over a horizon of `H` steps against the
//! trajectories its neighbors announced at the previous step (the *assumed*
//! trajectories). The stage cost penalizes deviation from its own assumed
//! outputs, deviation from each neighbor's assumed output shifted by the
//! desired offset, and input effort:
//!
//! ```text
//! l_i(k) = q_ii ||y(k) - y_i^a(k)||
//!        + sum_{j in I_i} q_ij ||y(k) - y_j^a(k) + d_ij(v(k))||
//!        + r_i u(k)^2
//! ```
//!
//! The terminal output must equal the average of the predecessors' assumed
//! terminal outputs (shifted by the desired offsets) and the terminal
//! acceleration must vanish.
//!
//! Internally the problem is posed in offsets `(dx, du)` from a nominal
//! rollout of the vehicle's own assumed inputs, which keeps the solver data
//! small even when absolute positions are large. The conic program is
//! grouped by cone (equalities, nonnegative rows, second-order cones) and
//! ordered stage by stage inside each group.

use std::collections::{BTreeMap, BTreeSet};

use log::debug;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{output, rollout, step_unchecked, Output, SystemMatrices, VehicleParams, VehicleState};
use crate::solver::{
    Cone, ConicProblem, CscMatrix, SolveResult, SolveStatus, Solver, SolverError, SolverSettings, WarmStart,
};
use crate::spacing::SpacingPolicies;

/// Weight of the l1 penalty that replaces the terminal output equality when
/// `soft_terminal` is set.
pub const SOFT_TERMINAL_WEIGHT: f64 = 1e4;

/// Tolerance on the terminal equalities of an accepted plan.
const TERMINAL_TOL: f64 = 1e-9;

/// A feasible assumed trajectory whose cost is below this value is kept
/// without solving: every stage cost is nonnegative, so it is optimal to
/// within this amount.
pub const CANDIDATE_SKIP_COST: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum OcpError {
    #[error("vehicle {0} has no predecessor in its information set")]
    NoPredecessor(usize),
    #[error("vehicle {vehicle}: missing assumed trajectory of neighbor {neighbor}")]
    MissingNeighbor { vehicle: usize, neighbor: usize },
    #[error("vehicle {vehicle}: trajectory of {source_vehicle} has horizon {got}, expected {expected}")]
    HorizonMismatch {
        vehicle: usize,
        source_vehicle: usize,
        expected: usize,
        got: usize,
    },
    #[error("vehicle {vehicle}: invalid weights: {reason}")]
    InvalidWeights { vehicle: usize, reason: String },
    #[error("vehicle {vehicle} at timestep {timestep}: problem infeasible ({reason})")]
    Infeasible {
        vehicle: usize,
        timestep: u64,
        reason: String,
    },
    #[error("vehicle {vehicle}: {source}")]
    Solver {
        vehicle: usize,
        #[source]
        source: SolverError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    L1,
    L2,
    /// Squared Euclidean norm.
    Quadratic,
}

impl NormKind {
    pub fn eval(self, position: f64, velocity: f64) -> f64 {
        match self {
            NormKind::L1 => position.abs() + velocity.abs(),
            NormKind::L2 => position.hypot(velocity),
            NormKind::Quadratic => position * position + velocity * velocity,
        }
    }
}

/// Cost weights of one follower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub q_self: f64,
    /// `q_ij` for every `j` in the information set.
    pub q_neighbor: BTreeMap<usize, f64>,
    pub r: f64,
    pub norm: NormKind,
}

impl CostWeights {
    pub fn validate(&self, vehicle: usize) -> Result<(), OcpError> {
        let bad = |reason: String| Err(OcpError::InvalidWeights { vehicle, reason });
        if !(self.q_self.is_finite() && self.q_self > 0.0) {
            return bad(format!("q_self must be positive, got {}", self.q_self));
        }
        if !(self.r.is_finite() && self.r > 0.0) {
            return bad(format!("r must be positive, got {}", self.r));
        }
        if let Some((j, q)) = self.q_neighbor.iter().find(|(_, q)| !(q.is_finite() && **q > 0.0)) {
            return bad(format!("q_{vehicle},{j} must be positive, got {q}"));
        }
        Ok(())
    }
}

/// Predicted, optimal or assumed trajectory over a horizon `H`.
///
/// `outputs` always has `H + 1` entries. Received trajectories carry outputs
/// only; a vehicle's own trajectories also carry `H + 1` states and `H`
/// inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub outputs: Vec<Output>,
    pub states: Option<Vec<VehicleState>>,
    pub inputs: Vec<f64>,
}

impl Trajectory {
    pub fn from_outputs(outputs: Vec<Output>) -> Self {
        Self {
            outputs,
            states: None,
            inputs: Vec::new(),
        }
    }

    /// Rollout of `inputs` from `initial`.
    pub fn from_rollout(initial: &VehicleState, inputs: Vec<f64>, params: &VehicleParams, dt: f64) -> Self {
        let states = rollout(initial, &inputs, params.tau, dt);
        Self {
            outputs: states.iter().map(output).collect(),
            states: Some(states),
            inputs,
        }
    }

    pub fn horizon(&self) -> usize {
        self.outputs.len().saturating_sub(1)
    }

    pub fn terminal(&self) -> Output {
        *self.outputs.last().expect("trajectory has at least one output")
    }

    /// Largest violation of `x(k+1) = A x(k) + B u(k)` and `y(k) = C x(k)`;
    /// zero for output-only trajectories.
    pub fn dynamics_residual(&self, params: &VehicleParams, dt: f64) -> f64 {
        let Some(states) = &self.states else {
            return 0.0;
        };
        let sys = SystemMatrices::new(params, dt);
        let mut worst = 0.0f64;
        for (k, u) in self.inputs.iter().enumerate() {
            let next = sys.propagate(&states[k], *u);
            worst = worst.max((next.as_vector() - states[k + 1].as_vector()).amax());
        }
        for (x, y) in states.iter().zip(&self.outputs) {
            worst = worst.max((x.position - y.position).abs().max((x.velocity - y.velocity).abs()));
        }
        worst
    }
}

/// Zero-input rollout used before any plan exists.
pub fn init_assumed(initial: &VehicleState, params: &VehicleParams, horizon: usize, dt: f64) -> Trajectory {
    Trajectory::from_rollout(initial, vec![0.0; horizon], params, dt)
}

/// Shifts an optimal trajectory one step forward: inputs drop their first
/// entry and append zero, states drop their first entry and append the
/// zero-input successor of the terminal state.
pub fn advance_assumed(optimal: &Trajectory, params: &VehicleParams, dt: f64) -> Trajectory {
    let states = optimal
        .states
        .as_ref()
        .expect("advance_assumed needs a trajectory with states");
    let mut inputs: Vec<f64> = optimal.inputs.iter().skip(1).copied().collect();
    inputs.push(0.0);
    let mut next: Vec<VehicleState> = states.iter().skip(1).copied().collect();
    next.push(step_unchecked(states.last().expect("nonempty"), 0.0, params.tau, dt));
    Trajectory {
        outputs: next.iter().map(output).collect(),
        states: Some(next),
        inputs,
    }
}

/// Constant-velocity extrapolation of the leader.
pub fn leader_assumed(position: f64, velocity: f64, horizon: usize, dt: f64) -> Trajectory {
    Trajectory::from_outputs(
        (0..=horizon)
            .map(|k| Output::new(position + k as f64 * dt * velocity, velocity))
            .collect(),
    )
}

/// Stage cost `l_i(k)` of vehicle `i`; `neighbors` pairs each `j` in the
/// information set with its assumed output at the same stage.
pub fn stage_cost(
    vehicle: usize,
    planned: Output,
    input: f64,
    own_assumed: Output,
    neighbors: &[(usize, Output)],
    weights: &CostWeights,
    spacing: &SpacingPolicies,
) -> f64 {
    let norm = weights.norm;
    let d = planned - own_assumed;
    let mut cost = weights.q_self * norm.eval(d.position, d.velocity) + weights.r * input * input;
    for &(j, y) in neighbors {
        let q = weights.q_neighbor.get(&j).copied().unwrap_or(0.0);
        let (c_h, c_s) = spacing.offset_coefficients(vehicle, j);
        let dp = planned.position - y.position + c_h * planned.velocity + c_s;
        let dv = planned.velocity - y.velocity;
        cost += q * norm.eval(dp, dv);
    }
    cost
}

/// Sum of stage costs over `k = 0..H-1` for a plan with inputs.
pub fn trajectory_cost(
    vehicle: usize,
    plan: &Trajectory,
    own_assumed: &Trajectory,
    neighbors: &BTreeMap<usize, Trajectory>,
    weights: &CostWeights,
    spacing: &SpacingPolicies,
) -> f64 {
    let mut stage_neighbors = Vec::with_capacity(neighbors.len());
    (0..plan.horizon())
        .map(|k| {
            stage_neighbors.clear();
            stage_neighbors.extend(neighbors.iter().map(|(&j, t)| (j, t.outputs[k])));
            stage_cost(
                vehicle,
                plan.outputs[k],
                plan.inputs[k],
                own_assumed.outputs[k],
                &stage_neighbors,
                weights,
                spacing,
            )
        })
        .sum()
}

/// Everything vehicle `i` needs to pose its problem at one timestep.
#[derive(Debug, Clone, Copy)]
pub struct OcpSpec<'a> {
    pub vehicle: usize,
    pub timestep: u64,
    pub params: VehicleParams,
    pub weights: &'a CostWeights,
    pub horizon: usize,
    pub dt: f64,
    pub state: VehicleState,
    pub own_assumed: &'a Trajectory,
    /// Assumed trajectories of every `j` in the information set.
    pub neighbors: &'a BTreeMap<usize, Trajectory>,
    /// Predecessors in the information set (`j < i`).
    pub info_pre: &'a BTreeSet<usize>,
    pub spacing: &'a SpacingPolicies,
    pub soft_terminal: bool,
}

impl OcpSpec<'_> {
    pub fn validate(&self) -> Result<(), OcpError> {
        let i = self.vehicle;
        self.weights.validate(i)?;
        if self.info_pre.is_empty() {
            return Err(OcpError::NoPredecessor(i));
        }
        let check = |j: usize, t: &Trajectory| {
            if t.horizon() != self.horizon {
                return Err(OcpError::HorizonMismatch {
                    vehicle: i,
                    source_vehicle: j,
                    expected: self.horizon,
                    got: t.horizon(),
                });
            }
            Ok(())
        };
        check(i, self.own_assumed)?;
        for &j in self.weights.q_neighbor.keys().chain(self.info_pre.iter()) {
            let t = self.neighbors.get(&j).ok_or(OcpError::MissingNeighbor {
                vehicle: i,
                neighbor: j,
            })?;
            check(j, t)?;
        }
        Ok(())
    }

    /// Objective value of `plan`: the stage costs plus, with
    /// `soft_terminal`, the terminal miss penalty.
    pub fn plan_cost(&self, plan: &Trajectory) -> f64 {
        let cost = trajectory_cost(
            self.vehicle,
            plan,
            self.own_assumed,
            self.neighbors,
            self.weights,
            self.spacing,
        );
        if self.soft_terminal {
            let miss = plan.terminal() - self.terminal_target();
            cost + SOFT_TERMINAL_WEIGHT * (miss.position.abs() + miss.velocity.abs())
        } else {
            cost
        }
    }

    /// Right-hand side of the terminal output equality.
    pub fn terminal_target(&self) -> Output {
        let n = self.info_pre.len() as f64;
        let (mut p, mut v) = (0.0, 0.0);
        for &j in self.info_pre {
            let y = self.neighbors[&j].terminal();
            let (c_h, c_s) = self.spacing.offset_coefficients(self.vehicle, j);
            p += y.position - (c_h * y.velocity + c_s);
            v += y.velocity;
        }
        Output::new(p / n, v / n)
    }

    fn nominal_inputs(&self) -> Vec<f64> {
        if self.own_assumed.inputs.len() == self.horizon {
            self.own_assumed.inputs.clone()
        } else {
            vec![0.0; self.horizon]
        }
    }
}

/// Variable and row bookkeeping of a built problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpLayout {
    pub horizon: usize,
    pub norm: NormKind,
    /// Norm terms per stage (own term first, then neighbors in index order).
    pub terms: usize,
    pub soft_terminal: bool,
    pub n_vars: usize,
    pub n_rows: usize,
    /// For every variable, the index of the same quantity one stage later
    /// (itself at the last stage or for stage-free quantities).
    var_next: Vec<usize>,
    row_next: Vec<usize>,
}

impl OcpLayout {
    /// States `x(0..=H)` followed by inputs `u(0..H)`.
    pub fn core_vars(&self) -> usize {
        4 * self.horizon + 3
    }

    pub fn state_var(&self, k: usize) -> usize {
        3 * k
    }

    pub fn input_var(&self, k: usize) -> usize {
        3 * (self.horizon + 1) + k
    }

    pub fn aux_vars(&self) -> usize {
        self.n_vars - self.core_vars()
    }

    /// Time-shifted warm start: auxiliaries, slacks and duals move one stage
    /// forward, state and input offsets restart at zero (the nominal of the
    /// next step is the shifted plan).
    pub fn shift_warm_start(&self, prev: &SolveResult) -> Option<WarmStart> {
        if prev.x.len() != self.n_vars || prev.y.len() != self.n_rows {
            return None;
        }
        let core = self.core_vars();
        let x = (0..self.n_vars)
            .map(|v| if v < core { 0.0 } else { prev.x[self.var_next[v]] })
            .collect();
        let s = self.row_next.iter().map(|&r| prev.s[r]).collect();
        let y = self.row_next.iter().map(|&r| prev.y[r]).collect();
        Some(WarmStart { x, s, y })
    }
}

/// Output of [`build_ocp`].
#[derive(Debug, Clone)]
pub struct BuiltOcp {
    pub problem: ConicProblem,
    pub layout: OcpLayout,
    pub nominal_states: Vec<VehicleState>,
    pub nominal_inputs: Vec<f64>,
    pub terminal_target: Output,
}

/// One norm term: residual `G dx(k) + h(k)` with
/// `G = [[1, g_h, 0], [0, 1, 0]]`.
struct Term {
    weight: f64,
    g_h: f64,
    /// Constant part of the residual before the nominal is added.
    offsets: Vec<(f64, f64)>,
}

struct Builder {
    triplets: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
    row_next: Vec<usize>,
}

impl Builder {
    fn row(&mut self, entries: &[(usize, f64)], rhs: f64, next: Option<usize>) -> usize {
        let r = self.b.len();
        for &(c, v) in entries {
            if v != 0.0 {
                self.triplets.push((r, c, v));
            }
        }
        self.b.push(rhs);
        self.row_next.push(next.map_or(r, |n| r + n));
        r
    }
}

/// Builds the conic program of one vehicle's problem.
pub fn build_ocp(spec: &OcpSpec) -> Result<BuiltOcp, OcpError> {
    spec.validate()?;
    let h = spec.horizon;
    let i = spec.vehicle;
    let w = spec.weights;
    let sys = SystemMatrices::new(&spec.params, spec.dt);
    let nominal_inputs = spec.nominal_inputs();
    let nominal_states = rollout(&spec.state, &nominal_inputs, spec.params.tau, spec.dt);
    let target = spec.terminal_target();

    let own = spec.own_assumed;
    let mut terms = vec![Term {
        weight: w.q_self,
        g_h: 0.0,
        offsets: (0..h)
            .map(|k| (-own.outputs[k].position, -own.outputs[k].velocity))
            .collect(),
    }];
    for (&j, &q) in &w.q_neighbor {
        let t = &spec.neighbors[&j];
        let (c_h, c_s) = spec.spacing.offset_coefficients(i, j);
        terms.push(Term {
            weight: q,
            g_h: c_h,
            offsets: (0..h)
                .map(|k| (c_s - t.outputs[k].position, -t.outputs[k].velocity))
                .collect(),
        });
    }
    // residual constant at stage k: h = G xbar(k) + offset
    let residual_const = |term: &Term, k: usize| {
        let x = &nominal_states[k];
        (
            x.position + term.g_h * x.velocity + term.offsets[k].0,
            x.velocity + term.offsets[k].1,
        )
    };

    let n_terms = terms.len();
    let core = 4 * h + 3;
    let aux_per_term = match w.norm {
        NormKind::L1 => 2,
        NormKind::L2 => 1,
        NormKind::Quadratic => 0,
    };
    let stage_aux = aux_per_term * n_terms;
    let soft_aux = if spec.soft_terminal { 2 } else { 0 };
    let n_vars = core + h * stage_aux + soft_aux;
    let xv = |k: usize, c: usize| 3 * k + c;
    let uv = |k: usize| 3 * (h + 1) + k;
    let aux = |k: usize, term: usize, c: usize| core + k * stage_aux + term * aux_per_term + c;
    let soft = |c: usize| core + h * stage_aux + c;

    let mut var_next: Vec<usize> = (0..n_vars).collect();
    for k in 0..h.saturating_sub(1) {
        for v in 0..stage_aux {
            var_next[core + k * stage_aux + v] = core + (k + 1) * stage_aux + v;
        }
    }

    // objective
    let mut p_trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut q = vec![0.0; n_vars];
    let mut constant = 0.0;
    for k in 0..h {
        let ub = nominal_inputs[k];
        p_trip.push((uv(k), uv(k), 2.0 * w.r));
        q[uv(k)] += 2.0 * w.r * ub;
        constant += w.r * ub * ub;
    }
    match w.norm {
        NormKind::L1 => {
            for k in 0..h {
                for (t, term) in terms.iter().enumerate() {
                    q[aux(k, t, 0)] = term.weight;
                    q[aux(k, t, 1)] = term.weight;
                }
            }
        }
        NormKind::L2 => {
            for k in 0..h {
                for (t, term) in terms.iter().enumerate() {
                    q[aux(k, t, 0)] = term.weight;
                }
            }
        }
        NormKind::Quadratic => {
            for k in 0..h {
                for term in &terms {
                    let (h0, h1) = residual_const(term, k);
                    let g = term.g_h;
                    let wt = 2.0 * term.weight;
                    // G^T G = [[1, g], [g, g^2 + 1]] on (p, v)
                    p_trip.push((xv(k, 0), xv(k, 0), wt));
                    p_trip.push((xv(k, 0), xv(k, 1), wt * g));
                    p_trip.push((xv(k, 1), xv(k, 0), wt * g));
                    p_trip.push((xv(k, 1), xv(k, 1), wt * (g * g + 1.0)));
                    q[xv(k, 0)] += wt * h0;
                    q[xv(k, 1)] += wt * (g * h0 + h1);
                    constant += term.weight * (h0 * h0 + h1 * h1);
                }
            }
        }
    }
    if spec.soft_terminal {
        q[soft(0)] = SOFT_TERMINAL_WEIGHT;
        q[soft(1)] = SOFT_TERMINAL_WEIGHT;
    }

    let mut bld = Builder {
        triplets: Vec::new(),
        b: Vec::new(),
        row_next: Vec::new(),
    };
    let a = &sys.a;
    let bvec = &sys.b;
    let xbar_h = nominal_states[h];

    // zero cone: initial condition, dynamics, terminal
    for c in 0..3 {
        bld.row(&[(xv(0, c), 1.0)], 0.0, None);
    }
    for k in 0..h {
        for r in 0..3 {
            let mut e = vec![(xv(k + 1, r), 1.0), (uv(k), -bvec[r])];
            for c in 0..3 {
                e.push((xv(k, c), -a[(r, c)]));
            }
            let next = (k + 1 < h).then_some(3);
            bld.row(&e, 0.0, next);
        }
    }
    if !spec.soft_terminal {
        bld.row(&[(xv(h, 0), 1.0)], target.position - xbar_h.position, None);
        bld.row(&[(xv(h, 1), 1.0)], target.velocity - xbar_h.velocity, None);
    }
    bld.row(&[(xv(h, 2), 1.0)], -xbar_h.acceleration, None);
    let n_zero = bld.b.len();

    // nonnegative cone: input bounds, l1 epigraphs, soft terminal
    for k in 0..h {
        let next = (k + 1 < h).then_some(2);
        bld.row(&[(uv(k), 1.0)], spec.params.u_max - nominal_inputs[k], next);
        bld.row(&[(uv(k), -1.0)], nominal_inputs[k] - spec.params.u_min, next);
    }
    if w.norm == NormKind::L1 {
        let rows_per_stage = 4 * n_terms;
        for k in 0..h {
            let next = (k + 1 < h).then_some(rows_per_stage);
            for (t, term) in terms.iter().enumerate() {
                let (h0, h1) = residual_const(term, k);
                // |G_c dx + h_c| <= aux_c
                let g0 = [(xv(k, 0), 1.0), (xv(k, 1), term.g_h)];
                let g1 = [(xv(k, 1), 1.0)];
                for (c, (g, hc)) in [(&g0[..], h0), (&g1[..], h1)].into_iter().enumerate() {
                    let mut pos: Vec<(usize, f64)> = g.to_vec();
                    pos.push((aux(k, t, c), -1.0));
                    bld.row(&pos, -hc, next);
                    let mut neg: Vec<(usize, f64)> = g.iter().map(|&(v, x)| (v, -x)).collect();
                    neg.push((aux(k, t, c), -1.0));
                    bld.row(&neg, hc, next);
                }
            }
        }
    }
    if spec.soft_terminal {
        let hp = xbar_h.position - target.position;
        let hv = xbar_h.velocity - target.velocity;
        for (c, hc) in [(0usize, hp), (1, hv)] {
            bld.row(&[(xv(h, c), 1.0), (soft(c), -1.0)], -hc, None);
            bld.row(&[(xv(h, c), -1.0), (soft(c), -1.0)], hc, None);
        }
    }
    let n_nonneg = bld.b.len() - n_zero;

    // second-order cones: (aux, G dx + h)
    let mut cones = vec![Cone::zero(n_zero), Cone::nonnegative(n_nonneg)];
    if w.norm == NormKind::L2 {
        let rows_per_stage = 3 * n_terms;
        for k in 0..h {
            let next = (k + 1 < h).then_some(rows_per_stage);
            for (t, term) in terms.iter().enumerate() {
                let (h0, h1) = residual_const(term, k);
                bld.row(&[(aux(k, t, 0), -1.0)], 0.0, next);
                bld.row(&[(xv(k, 0), -1.0), (xv(k, 1), -term.g_h)], h0, next);
                bld.row(&[(xv(k, 1), -1.0)], h1, next);
                cones.push(Cone::second_order(3));
            }
        }
    }
    cones.retain(|c| c.dim > 0);

    let n_rows = bld.b.len();
    let problem = ConicProblem {
        p: CscMatrix::from_triplets(n_vars, n_vars, &p_trip),
        q,
        constant,
        a: CscMatrix::from_triplets(n_rows, n_vars, &bld.triplets),
        b: bld.b,
        cones,
    };
    let layout = OcpLayout {
        horizon: h,
        norm: w.norm,
        terms: n_terms,
        soft_terminal: spec.soft_terminal,
        n_vars,
        n_rows,
        var_next,
        row_next: bld.row_next,
    };
    Ok(BuiltOcp {
        problem,
        layout,
        nominal_states,
        nominal_inputs,
        terminal_target: target,
    })
}

/// Turns a solver result into a plan: clips inputs to their bounds, makes
/// the terminal equalities hold to rounding with a minimum-norm input
/// correction, and rolls the dynamics out exactly.
pub fn extract_plan(spec: &OcpSpec, built: &BuiltOcp, result: &SolveResult) -> Result<Trajectory, OcpError> {
    let infeasible = |reason: String| OcpError::Infeasible {
        vehicle: spec.vehicle,
        timestep: spec.timestep,
        reason,
    };
    if result.status == SolveStatus::Infeasible {
        return Err(infeasible("solver returned an infeasibility certificate".into()));
    }
    let layout = &built.layout;
    let params = &spec.params;
    let inputs: Vec<f64> = (0..layout.horizon)
        .map(|k| params.clamp(built.nominal_inputs[k] + result.x[layout.input_var(k)]))
        .collect();
    let inputs = refine_terminal(spec, built.terminal_target, inputs).map_err(infeasible)?;
    Ok(Trajectory::from_rollout(&spec.state, inputs, params, spec.dt))
}

/// Pins the terminal state with the smallest input correction that respects
/// the bounds. Inputs that hit a bound are frozen and the correction is
/// recomputed on the rest.
fn refine_terminal(spec: &OcpSpec, target: Output, mut inputs: Vec<f64>) -> Result<Vec<f64>, String> {
    let h = inputs.len();
    let params = &spec.params;
    let sys = SystemMatrices::new(params, spec.dt);
    // sensitivity of x(H) to u(k): A^(H-1-k) B
    let mut sens = vec![Vector3::zeros(); h];
    let mut m = sys.b;
    for k in (0..h).rev() {
        sens[k] = m;
        m = sys.a * m;
    }
    let rows: &[usize] = if spec.soft_terminal { &[2] } else { &[0, 1, 2] };
    let goal = Vector3::new(target.position, target.velocity, 0.0);
    let scale = 1.0 + target.position.abs() + target.velocity.abs();
    let mut frozen = vec![false; h];
    for _ in 0..=h {
        let terminal = rollout(&spec.state, &inputs, params.tau, spec.dt)[h].as_vector();
        let err = terminal - goal;
        if rows.iter().all(|&r| err[r].abs() <= TERMINAL_TOL * scale * 1e-3) {
            return Ok(inputs);
        }
        let mut gram = Matrix3::<f64>::zeros();
        for k in (0..h).filter(|&k| !frozen[k]) {
            gram += sens[k] * sens[k].transpose();
        }
        let sel = |v: &Vector3<f64>| Vector3::from_fn(|r, _| if rows.contains(&r) { v[r] } else { 0.0 });
        // restrict the system to the constrained rows
        let mut reduced = Matrix3::<f64>::identity();
        for &r in rows {
            for &c in rows {
                reduced[(r, c)] = gram[(r, c)];
            }
        }
        let Some(inv) = reduced.try_inverse() else {
            return Err("terminal state unreachable with the free inputs".into());
        };
        let lambda = sel(&(inv * sel(&err)));
        let mut clipped = false;
        let free: Vec<usize> = (0..h).filter(|&k| !frozen[k]).collect();
        for k in free {
            let du = -sens[k].dot(&lambda);
            let u = inputs[k] + du;
            if u > params.u_max || u < params.u_min {
                inputs[k] = params.clamp(u);
                frozen[k] = true;
                clipped = true;
            } else {
                inputs[k] = u;
            }
        }
        if clipped && frozen.iter().all(|&f| f) {
            break;
        }
    }
    let terminal = rollout(&spec.state, &inputs, params.tau, spec.dt)[h].as_vector();
    let err = terminal - goal;
    let worst = rows.iter().map(|&r| err[r].abs()).fold(0.0, f64::max);
    if worst <= TERMINAL_TOL * scale {
        Ok(inputs)
    } else {
        Err(format!(
            "terminal constraint violated by {worst:.3e} within the input bounds"
        ))
    }
}

/// Whether `plan` satisfies every constraint of the problem in `spec`.
pub fn is_feasible(spec: &OcpSpec, plan: &Trajectory) -> bool {
    let Some(states) = &plan.states else {
        return false;
    };
    if plan.inputs.len() != spec.horizon || states.len() != spec.horizon + 1 || states[0] != spec.state {
        return false;
    }
    if !plan.inputs.iter().all(|&u| spec.params.admits(u)) {
        return false;
    }
    if plan.dynamics_residual(&spec.params, spec.dt) > 1e-9 {
        return false;
    }
    let target = spec.terminal_target();
    let x = states[spec.horizon];
    let scale = 1.0 + target.position.abs() + target.velocity.abs();
    let pinned = x.acceleration.abs() <= TERMINAL_TOL * scale;
    let reached = (x.position - target.position).abs() <= TERMINAL_TOL * scale
        && (x.velocity - target.velocity).abs() <= TERMINAL_TOL * scale;
    pinned && (spec.soft_terminal || reached)
}

/// Solver and warm-start state of one vehicle across timesteps.
#[derive(Debug, Clone)]
pub struct LocalController {
    solver: Solver,
    previous: Option<(OcpLayout, SolveResult)>,
    pub last_iterations: usize,
    pub last_status: Option<SolveStatus>,
    pub candidate_adopted: bool,
}

impl LocalController {
    pub fn new(settings: SolverSettings) -> Self {
        Self {
            solver: Solver::new(settings),
            previous: None,
            last_iterations: 0,
            last_status: None,
            candidate_adopted: false,
        }
    }

    /// Solves the problem and returns the optimal plan. If the vehicle's own
    /// assumed trajectory is itself feasible and no more expensive than the
    /// solver's plan, it is kept instead, so the adopted cost never exceeds
    /// that of the shifted previous plan.
    pub fn solve(&mut self, spec: &OcpSpec) -> Result<Trajectory, OcpError> {
        spec.validate()?;
        let cost = |t: &Trajectory| spec.plan_cost(t);
        let candidate_feasible = is_feasible(spec, spec.own_assumed);
        if candidate_feasible && cost(spec.own_assumed) <= CANDIDATE_SKIP_COST {
            self.last_iterations = 0;
            self.last_status = None;
            self.candidate_adopted = true;
            return Ok(spec.own_assumed.clone());
        }
        let built = build_ocp(spec)?;
        let warm = self
            .previous
            .as_ref()
            .filter(|(layout, _)| *layout == built.layout)
            .and_then(|(layout, prev)| layout.shift_warm_start(prev));
        let result = self
            .solver
            .solve(&built.problem, warm.as_ref())
            .map_err(|source| OcpError::Solver {
                vehicle: spec.vehicle,
                source,
            })?;
        self.last_iterations = result.iterations;
        self.last_status = Some(result.status);
        if result.status == SolveStatus::MaxIters {
            debug!(
                "vehicle {} step {}: solver stopped at {} iterations (primal {:.2e}, dual {:.2e})",
                spec.vehicle, spec.timestep, result.iterations, result.primal_residual, result.dual_residual
            );
        }
        let plan = extract_plan(spec, &built, &result);
        self.previous = Some((built.layout, result));
        let plan = plan?;

        self.candidate_adopted = candidate_feasible && cost(spec.own_assumed) <= cost(&plan);
        if self.candidate_adopted {
            return Ok(spec.own_assumed.clone());
        }
        Ok(plan)
    }
}
