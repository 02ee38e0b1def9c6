//! Stability checks: the weight condition on the communication graph, the
//! runtime Lyapunov monitor, and the counterexamples to matrix-weighted
//! versions of the weight condition.
//!
//! The Lyapunov candidate is `V(t) = sum_i V_i(t)`, the sum of the adopted
//! plan costs. Once the terminal outputs have converged (`t >= N`) and the
//! leader cruises at constant speed, the shifted plan of every vehicle is
//! feasible at `t + 1`, which yields
//!
//! ```text
//! V_i(t+1) - V_i(t) <= -l_i(0) + sum_{k=1}^{H-1} eps_ik
//! eps_ik = l_i(k; own and neighbors' optimal plans)
//!        - l_i(k; own and neighbors' assumed plans)
//!       <= sum_{j in R_i} q_ij ||y*_j(k) - y^a_j(k)|| - q_ii ||y*_i(k) - y^a_i(k)||
//! ```
//!
//! Summing over vehicles and exchanging the double sum gives
//! `eps_k = sum_i (sum_{j in S_i} q_ji - q_ii) ||y*_i(k) - y^a_i(k)||`, which
//! is nonpositive when `q_ii >= sum_{j in S_i} q_ji` for every `i`.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix2, Vector2};
use serde::Serialize;

use crate::model::Output;
use crate::ocp::{stage_cost, CostWeights, NormKind, Trajectory};
use crate::spacing::SpacingPolicies;
use crate::topology::TopologyGraph;

/// Weight-condition verdict of one follower.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightRow {
    pub vehicle: usize,
    pub q_self: f64,
    /// `sum_{j in S_i} q_ji`.
    pub share_sum: f64,
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightReport {
    pub rows: Vec<WeightRow>,
    pub pass: bool,
}

impl WeightReport {
    pub fn failing(&self) -> impl Iterator<Item = &WeightRow> {
        self.rows.iter().filter(|r| !r.pass)
    }
}

impl fmt::Display for WeightReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>7}  {:>10}  {:>10}  {:>10}  verdict",
            "vehicle", "q_ii", "sum q_ji", "margin"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>7}  {:>10.4}  {:>10.4}  {:>10.4}  {}",
                r.vehicle,
                r.q_self,
                r.share_sum,
                r.margin,
                if r.pass { "pass" } else { "FAIL" }
            )?;
        }
        write!(f, "weight condition: {}", if self.pass { "pass" } else { "FAIL" })
    }
}

/// Checks `q_ii >= sum_{j in S_i} q_ji` for every follower. `weights[i - 1]`
/// belongs to vehicle `i`; a missing `q_ji` counts as zero.
pub fn check_weight_condition(graph: &TopologyGraph, weights: &[CostWeights]) -> WeightReport {
    let rows: Vec<WeightRow> = (1..=graph.n_followers())
        .map(|i| {
            let q_self = weights[i - 1].q_self;
            let share_sum: f64 = graph
                .share_set(i)
                .iter()
                .map(|&j| weights[j - 1].q_neighbor.get(&i).copied().unwrap_or(0.0))
                .fold(0.0, |a, q| a + q);
            let margin = q_self - share_sum;
            WeightRow {
                vehicle: i,
                q_self,
                share_sum,
                margin,
                pass: margin >= 0.0,
            }
        })
        .collect();
    let pass = rows.iter().all(|r| r.pass);
    WeightReport { rows, pass }
}

/// What every vehicle planned and assumed at one timestep. Index 0 holds the
/// leader, whose plan is its published constant-speed extrapolation.
#[derive(Debug, Clone)]
pub struct StepSnapshot {
    pub timestep: u64,
    pub plans: Vec<Trajectory>,
    pub assumed: Vec<Trajectory>,
    /// `V_i(t)` for `i = 1..=N` (index 0 unused, zero).
    pub values: Vec<f64>,
}

impl StepSnapshot {
    pub fn total(&self) -> f64 {
        self.values.iter().skip(1).sum()
    }
}

/// Per-vehicle terms of the local decrease bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalBound {
    pub vehicle: usize,
    pub dv: f64,
    pub first_stage: f64,
    /// `sum_{k=1}^{H-1} eps_ik`.
    pub eps_sum: f64,
    /// `-l_i(0) + sum_k eps_ik`.
    pub bound: f64,
    pub holds: bool,
    /// `eps_ik` never exceeds its reverse-triangle estimate (not checked for
    /// the squared norm, which is not a norm).
    pub triangle_holds: bool,
}

/// Verdicts of one monitored step `t -> t + 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovStep {
    pub timestep: u64,
    pub v: f64,
    pub v_next: f64,
    pub dv: f64,
    pub tol: f64,
    pub local: Vec<LocalBound>,
    /// `eps_k` of the aggregate bound for `k = 1..H-1`.
    pub eps: Vec<f64>,
    /// `-sum_i l_i(0) + sum_k eps_k`.
    pub bound: f64,
    pub aggregate_holds: bool,
    /// The aggregate and decrease bounds rely on the triangle inequality and
    /// are only enforced when every vehicle uses a true norm.
    pub norm_based: bool,
    /// `dv <= tol` and every `eps_k <= tol`; only meaningful under a passing
    /// weight report.
    pub decrease_holds: bool,
}

impl LyapunovStep {
    pub fn local_holds(&self) -> bool {
        self.local.iter().all(|b| b.holds && b.triangle_holds)
    }
}

fn neighbor_outputs(trajs: &[Trajectory], weights: &CostWeights, k: usize) -> Vec<(usize, Output)> {
    weights.q_neighbor.keys().map(|&j| (j, trajs[j].outputs[k])).collect()
}

/// Evaluates the local and aggregate decrease bounds for one step.
/// `weights[i - 1]` belongs to vehicle `i`; `next_values[i]` is `V_i(t+1)`.
pub fn lyapunov_step(
    graph: &TopologyGraph,
    weights: &[CostWeights],
    spacing: &SpacingPolicies,
    now: &StepSnapshot,
    next_values: &[f64],
    weights_pass: bool,
) -> LyapunovStep {
    let n = graph.n_followers();
    let h = now.plans[1].horizon();
    let v = now.total();
    let v_next: f64 = next_values.iter().skip(1).sum();
    let dv = v_next - v;
    let tol = 1e-6 * (1.0 + v);
    let mut local = Vec::with_capacity(n);
    let mut first_total = 0.0;
    for i in 1..=n {
        let w = &weights[i - 1];
        let plan = &now.plans[i];
        let own = &now.assumed[i];
        let l = |k: usize, own_ref: Output, others: &[Trajectory]| {
            stage_cost(
                i,
                plan.outputs[k],
                plan.inputs[k],
                own_ref,
                &neighbor_outputs(others, w, k),
                w,
                spacing,
            )
        };
        let first_stage = l(0, own.outputs[0], &now.assumed);
        let mut eps_sum = 0.0;
        let mut triangle_holds = true;
        for k in 1..h {
            let eps = l(k, plan.outputs[k], &now.plans) - l(k, own.outputs[k], &now.assumed);
            eps_sum += eps;
            if w.norm != NormKind::Quadratic {
                let dev = |j: usize| {
                    let d = now.plans[j].outputs[k] - now.assumed[j].outputs[k];
                    w.norm.eval(d.position, d.velocity)
                };
                let estimate: f64 = w
                    .q_neighbor
                    .iter()
                    .filter(|(&j, _)| j != 0)
                    .map(|(&j, q)| q * dev(j))
                    .sum::<f64>()
                    - w.q_self * dev(i);
                triangle_holds &= eps <= estimate + 1e-9 * (1.0 + estimate.abs());
            }
        }
        first_total += first_stage;
        let dv_i = next_values[i] - now.values[i];
        let bound = -first_stage + eps_sum;
        let tol_i = 1e-6 * (1.0 + now.values[i]);
        local.push(LocalBound {
            vehicle: i,
            dv: dv_i,
            first_stage,
            eps_sum,
            bound,
            holds: dv_i <= bound + tol_i,
            triangle_holds,
        });
    }

    let mut share_weight = vec![0.0; n + 1];
    for i in 1..=n {
        share_weight[i] = graph
            .share_set(i)
            .iter()
            .map(|&j| weights[j - 1].q_neighbor.get(&i).copied().unwrap_or(0.0))
            .sum::<f64>()
            - weights[i - 1].q_self;
    }
    let eps: Vec<f64> = (1..h)
        .map(|k| {
            (1..=n)
                .map(|i| {
                    let d = now.plans[i].outputs[k] - now.assumed[i].outputs[k];
                    share_weight[i] * weights[i - 1].norm.eval(d.position, d.velocity)
                })
                .sum()
        })
        .collect();
    let bound = -first_total + eps.iter().sum::<f64>();
    LyapunovStep {
        timestep: now.timestep,
        v,
        v_next,
        dv,
        tol,
        local,
        aggregate_holds: dv <= bound + tol,
        norm_based: weights.iter().all(|w| w.norm != NormKind::Quadratic),
        decrease_holds: weights_pass && dv <= tol && eps.iter().all(|e| *e <= tol),
        eps,
        bound,
    }
}

/// One row of the Lyapunov trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovRow {
    pub timestep: u64,
    /// `V_i(t)`, `i = 1..=N`.
    pub values: Vec<f64>,
    pub total: f64,
    /// Present when the step `t -> t+1` was monitored.
    pub step: Option<LyapunovStep>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LyapunovTrace {
    pub rows: Vec<LyapunovRow>,
}

impl LyapunovTrace {
    pub fn monitored(&self) -> impl Iterator<Item = &LyapunovStep> {
        self.rows.iter().filter_map(|r| r.step.as_ref())
    }

    /// Steps where a monitored bound failed.
    pub fn violations(&self, weights_pass: bool) -> Vec<&LyapunovStep> {
        self.monitored()
            .filter(|s| {
                !s.local_holds() || (s.norm_based && (!s.aggregate_holds || (weights_pass && !s.decrease_holds)))
            })
            .collect()
    }
}

/// Left side minus right side of a claimed inequality `lhs <= rhs`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClaimEvaluation {
    pub lhs: f64,
    pub rhs: f64,
    pub violated: bool,
}

impl ClaimEvaluation {
    fn new(lhs: f64, rhs: f64) -> Self {
        Self {
            lhs,
            rhs,
            violated: lhs > rhs,
        }
    }

    pub fn gap(&self) -> f64 {
        self.lhs - self.rhs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleReport {
    /// `||z||_I + ||z||_I <= ||z||_{2I}` at `z = (1, 0)`.
    pub weighted_norms: ClaimEvaluation,
    /// `||Q1 z|| + ||Q2 z|| <= ||Qii z||` with `Q1 = diag(3, 2)`,
    /// `Q2 = diag(2, 1)`, `Qii = diag(5, 3)`, `z = (1, 1)`.
    pub scaled_norms: ClaimEvaluation,
    /// The same with `Qii` inflated to `diag(6, 4)`.
    pub scaled_norms_inflated: ClaimEvaluation,
}

/// `sqrt(z^T Q z)`.
pub fn quadratic_form_norm(z: &Vector2<f64>, q: &Matrix2<f64>) -> f64 {
    (z.transpose() * q * z)[(0, 0)].sqrt()
}

/// `||Q z||_2`.
pub fn scaled_norm(z: &Vector2<f64>, q: &Matrix2<f64>) -> f64 {
    (q * z).norm()
}

/// Evaluates both claims that a matrix-weighted condition
/// `Q_ii >= sum_j Q_ji` would make the share terms nonpositive.
pub fn counterexample_norms() -> CounterexampleReport {
    let z = Vector2::new(1.0, 0.0);
    let eye = Matrix2::identity();
    let weighted_norms = ClaimEvaluation::new(
        quadratic_form_norm(&z, &eye) + quadratic_form_norm(&z, &eye),
        quadratic_form_norm(&z, &(2.0 * eye)),
    );
    let z = Vector2::new(1.0, 1.0);
    let q1 = Matrix2::from_diagonal(&Vector2::new(3.0, 2.0));
    let q2 = Matrix2::from_diagonal(&Vector2::new(2.0, 1.0));
    let shared = scaled_norm(&z, &q1) + scaled_norm(&z, &q2);
    let scaled_norms = ClaimEvaluation::new(
        shared,
        scaled_norm(&z, &Matrix2::from_diagonal(&Vector2::new(5.0, 3.0))),
    );
    let scaled_norms_inflated = ClaimEvaluation::new(
        shared,
        scaled_norm(&z, &Matrix2::from_diagonal(&Vector2::new(6.0, 4.0))),
    );
    CounterexampleReport {
        weighted_norms,
        scaled_norms,
        scaled_norms_inflated,
    }
}

impl fmt::Display for CounterexampleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = |c: &ClaimEvaluation| if c.violated { "claim violated" } else { "claim holds" };
        let w = &self.weighted_norms;
        writeln!(
            f,
            "case 1: S_i = {{i1, i2}}, Q_i1,i = Q_i2,i = I, Q_i,i = 2I, z = (1, 0)"
        )?;
        writeln!(
            f,
            "  ||z||_I + ||z||_I = {:.5} vs ||z||_2I = sqrt(2) = {:.5}: {}",
            w.lhs,
            w.rhs,
            verdict(w)
        )?;
        let s = &self.scaled_norms;
        writeln!(
            f,
            "case 2: Q_i1,i = diag(3,2), Q_i2,i = diag(2,1), Q_i,i = diag(5,3), z = (1, 1)"
        )?;
        writeln!(f, "  sqrt(13) + sqrt(5) - sqrt(34) = {:.5}: {}", s.gap(), verdict(s))?;
        let s = &self.scaled_norms_inflated;
        writeln!(f, "case 2 with Q_i,i = diag(6,4):")?;
        write!(f, "  sqrt(13) + sqrt(5) - sqrt(52) = {:.5}: {}", s.gap(), verdict(s))
    }
}

/// Largest per-vehicle margin violation, for log messages.
pub fn worst_margin(report: &WeightReport) -> Option<(usize, f64)> {
    report
        .rows
        .iter()
        .map(|r| (r.vehicle, r.margin))
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Builds the per-vehicle weights of a uniform rule: `q_ij = q` on every
/// incoming edge.
pub fn uniform_weights(graph: &TopologyGraph, q_self: f64, q: f64, r: f64, norm: NormKind) -> Vec<CostWeights> {
    (1..=graph.n_followers())
        .map(|i| CostWeights {
            q_self,
            q_neighbor: graph
                .info_set(i)
                .into_iter()
                .map(|j| (j, q))
                .collect::<BTreeMap<_, _>>(),
            r,
            norm,
        })
        .collect()
}
