//! Operator-splitting (ADMM) solver for convex conic programs
//!
//! ```text
//! minimize    1/2 x^T P x + q^T x + constant
//! subject to  A x + s = b,   s in K
//! ```
//!
//! where `K` is a product of zero cones (equalities), nonnegative orthants
//! and second-order cones. Each iteration solves one quasi-definite KKT
//! system with a cached sparse `L D L^T` factorization, projects onto `K`,
//! and updates the dual with over-relaxation. Data are equilibrated with a
//! cone-aware Ruiz scaling; termination is tested on unscaled residuals.
//!
//! A [`Solver`] keeps its scaling and factorization while `P`, `A`, the
//! cones and the settings stay the same, so repeated solves with new `q` and
//! `b` (the receding-horizon case) only pay for the iterations.

pub mod cones;
pub mod ldl;
pub mod sparse;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cones::{project_cone, Cone, ConeKind};
use ldl::{LdlError, LdlFactor};
pub use sparse::CscMatrix;
use sparse::{dot, norm_inf};

const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const RHO_ADAPT_THRESHOLD: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("KKT factorization failed: {0}")]
    Factorization(#[from] LdlError),
}

/// Conic program in the standard form above. `p` holds both triangles.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicProblem {
    pub p: CscMatrix,
    pub q: Vec<f64>,
    pub constant: f64,
    pub a: CscMatrix,
    pub b: Vec<f64>,
    pub cones: Vec<Cone>,
}

impl ConicProblem {
    pub fn n_vars(&self) -> usize {
        self.q.len()
    }

    pub fn n_rows(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let (n, m) = (self.n_vars(), self.n_rows());
        let fail = |msg: String| Err(SolverError::InvalidProblem(msg));
        if self.p.nrows != n || self.p.ncols != n {
            return fail(format!("P is {}x{}, expected {n}x{n}", self.p.nrows, self.p.ncols));
        }
        if self.a.nrows != m || self.a.ncols != n {
            return fail(format!("A is {}x{}, expected {m}x{n}", self.a.nrows, self.a.ncols));
        }
        let cone_rows: usize = self.cones.iter().map(|c| c.dim).sum();
        if cone_rows != m {
            return fail(format!("cones cover {cone_rows} rows, A has {m}"));
        }
        if self.cones.iter().any(|c| c.kind == ConeKind::SecondOrder && c.dim == 0) {
            return fail("second-order cone of dimension 0".into());
        }
        if !self.p.all_finite()
            || !self.a.all_finite()
            || !self.q.iter().chain(&self.b).all(|v| v.is_finite())
            || !self.constant.is_finite()
        {
            return fail("non-finite problem data".into());
        }
        if !self.p.is_symmetric(1e-12 * (1.0 + norm_inf(&self.p.nzval))) {
            return fail("P is not symmetric".into());
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut px = vec![0.0; x.len()];
        self.p.mul_vec(x, &mut px);
        0.5 * dot(x, &px) + dot(&self.q, x) + self.constant
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Tolerance on the normalized primal infeasibility certificate.
    pub eps_infeasible: f64,
    pub max_iters: usize,
    /// Over-relaxation parameter in (0, 2).
    pub alpha: f64,
    pub rho: f64,
    pub sigma: f64,
    pub adaptive_rho: bool,
    pub adaptive_rho_interval: usize,
    pub scaling_iters: usize,
    pub check_interval: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_infeasible: 1e-6,
            max_iters: 20_000,
            alpha: 1.6,
            rho: 0.1,
            sigma: 1e-6,
            adaptive_rho: true,
            adaptive_rho_interval: 50,
            scaling_iters: 10,
            check_interval: 5,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidProblem(m.to_string()));
        if !(self.eps_abs >= 0.0 && self.eps_rel >= 0.0 && self.eps_abs + self.eps_rel > 0.0) {
            return bad("tolerances must be nonnegative and not both zero");
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return bad("alpha must lie in (0, 2)");
        }
        if !(self.rho > 0.0 && self.sigma > 0.0) {
            return bad("rho and sigma must be positive");
        }
        if self.max_iters == 0 || self.check_interval == 0 || self.adaptive_rho_interval == 0 {
            return bad("iteration counts must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIters,
}

/// Primal/slack/dual point, in unscaled coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

impl SolveResult {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            x: self.x.clone(),
            s: self.s.clone(),
            y: self.y.clone(),
        }
    }
}

/// Scaled data plus the factored KKT matrix.
#[derive(Debug, Clone)]
struct Workspace {
    p: CscMatrix,
    a: CscMatrix,
    cones: Vec<Cone>,
    settings: SolverSettings,
    p_scaled: CscMatrix,
    a_scaled: CscMatrix,
    d: Vec<f64>,
    e: Vec<f64>,
    c: f64,
    rho: f64,
    rho_vec: Vec<f64>,
    kkt: CscMatrix,
    rho_slots: Vec<usize>,
    factor: LdlFactor,
}

impl Workspace {
    fn new(problem: &ConicProblem, settings: &SolverSettings) -> Result<Self, SolverError> {
        let n = problem.n_vars();
        let (p_scaled, a_scaled, d, e, c) = equilibrate(problem, settings.scaling_iters);
        let mut rho_vec = vec![0.0; problem.n_rows()];
        fill_rho(&problem.cones, settings.rho, &mut rho_vec);

        let mut triplets = Vec::with_capacity(p_scaled.nnz() + a_scaled.nnz() + n + rho_vec.len());
        for (r, c, v) in p_scaled.triplets() {
            if r <= c {
                triplets.push((r, c, v));
            }
        }
        for j in 0..n {
            triplets.push((j, j, settings.sigma));
        }
        for (r, c, v) in a_scaled.triplets() {
            triplets.push((c, n + r, v));
        }
        for (i, rho) in rho_vec.iter().enumerate() {
            triplets.push((n + i, n + i, -1.0 / rho));
        }
        let kkt = CscMatrix::from_triplets(n + rho_vec.len(), n + rho_vec.len(), &triplets);
        let rho_slots = (0..rho_vec.len())
            .map(|i| {
                let col = n + i;
                (kkt.colptr[col]..kkt.colptr[col + 1])
                    .find(|&p| kkt.rowval[p] == col)
                    .expect("KKT diagonal entry")
            })
            .collect();
        let factor = LdlFactor::new(&kkt)?;
        Ok(Self {
            p: problem.p.clone(),
            a: problem.a.clone(),
            cones: problem.cones.clone(),
            settings: settings.clone(),
            p_scaled,
            a_scaled,
            d,
            e,
            c,
            rho: settings.rho,
            rho_vec,
            kkt,
            rho_slots,
            factor,
        })
    }

    fn matches(&self, problem: &ConicProblem, settings: &SolverSettings) -> bool {
        self.settings == *settings && self.cones == problem.cones && self.p == problem.p && self.a == problem.a
    }

    fn set_rho(&mut self, rho: f64) -> Result<(), SolverError> {
        self.rho = rho;
        fill_rho(&self.cones, rho, &mut self.rho_vec);
        for (slot, r) in self.rho_slots.iter().zip(&self.rho_vec) {
            self.kkt.nzval[*slot] = -1.0 / r;
        }
        self.factor.refactor(&self.kkt)?;
        Ok(())
    }
}

fn fill_rho(cones: &[Cone], rho: f64, out: &mut [f64]) {
    let mut offset = 0;
    for cone in cones {
        let value = if cone.kind == ConeKind::Zero {
            RHO_EQ_FACTOR * rho
        } else {
            rho
        };
        out[offset..offset + cone.dim].iter_mut().for_each(|r| *r = value);
        offset += cone.dim;
    }
}

fn clamp_scaling(norm: f64) -> f64 {
    if norm < MIN_SCALING {
        1.0
    } else {
        1.0 / norm.min(MAX_SCALING).sqrt()
    }
}

/// Ruiz equilibration. Returns `(cDPD, EAD, D, E, c)`; row scalings are
/// averaged over each second-order cone so the scaled cone is unchanged.
fn equilibrate(problem: &ConicProblem, iters: usize) -> (CscMatrix, CscMatrix, Vec<f64>, Vec<f64>, f64) {
    let (n, m) = (problem.n_vars(), problem.n_rows());
    let mut p = problem.p.clone();
    let mut a = problem.a.clone();
    let mut d = vec![1.0; n];
    let mut e = vec![1.0; m];
    for _ in 0..iters {
        let p_cols = p.col_norms_inf();
        let a_cols = a.col_norms_inf();
        let dd: Vec<f64> = p_cols
            .iter()
            .zip(&a_cols)
            .map(|(x, y)| clamp_scaling(x.max(*y)))
            .collect();
        let mut ee: Vec<f64> = a.row_norms_inf().into_iter().map(clamp_scaling).collect();
        let mut offset = 0;
        for cone in &problem.cones {
            if cone.kind == ConeKind::SecondOrder {
                let block = &mut ee[offset..offset + cone.dim];
                let mean = block.iter().sum::<f64>() / cone.dim as f64;
                block.iter_mut().for_each(|v| *v = mean);
            }
            offset += cone.dim;
        }
        p.scale(&dd, &dd);
        a.scale(&ee, &dd);
        d.iter_mut().zip(&dd).for_each(|(x, y)| *x *= y);
        e.iter_mut().zip(&ee).for_each(|(x, y)| *x *= y);
    }
    let p_cols = p.col_norms_inf();
    let mean_col = if n > 0 {
        p_cols.iter().sum::<f64>() / n as f64
    } else {
        0.0
    };
    let q_norm = problem
        .q
        .iter()
        .zip(&d)
        .fold(0.0, |acc, (q, d)| f64::max(acc, (q * d).abs()));
    let denom = mean_col.max(q_norm);
    let c = if denom < MIN_SCALING {
        1.0
    } else {
        (1.0 / denom).clamp(MIN_SCALING, MAX_SCALING)
    };
    p.nzval.iter_mut().for_each(|v| *v *= c);
    (p, a, d, e, c)
}

/// Reusable solver; see the module docs.
#[derive(Debug, Clone, Default)]
pub struct Solver {
    settings: SolverSettings,
    workspace: Option<Workspace>,
    factorizations: usize,
}

struct Residuals {
    primal: f64,
    dual: f64,
    eps_primal: f64,
    eps_dual: f64,
}

impl Residuals {
    fn converged(&self) -> bool {
        self.primal <= self.eps_primal && self.dual <= self.eps_dual
    }

    fn merit(&self) -> f64 {
        (self.primal / self.eps_primal).max(self.dual / self.eps_dual)
    }
}

impl Solver {
    pub fn new(settings: SolverSettings) -> Self {
        Self {
            settings,
            workspace: None,
            factorizations: 0,
        }
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.settings
    }

    /// Number of full (symbolic + numeric) KKT factorizations so far.
    pub fn factorizations(&self) -> usize {
        self.factorizations
    }

    pub fn solve(&mut self, problem: &ConicProblem, warm: Option<&WarmStart>) -> Result<SolveResult, SolverError> {
        problem.validate()?;
        self.settings.validate()?;
        let reuse = self
            .workspace
            .as_ref()
            .is_some_and(|w| w.matches(problem, &self.settings));
        if !reuse {
            self.workspace = Some(Workspace::new(problem, &self.settings)?);
            self.factorizations += 1;
        }
        let ws = self.workspace.as_mut().expect("workspace");
        iterate(ws, problem, warm)
    }
}

/// One-shot solve with the given settings.
pub fn solve(problem: &ConicProblem, settings: &SolverSettings) -> Result<SolveResult, SolverError> {
    Solver::new(settings.clone()).solve(problem, None)
}

fn iterate(ws: &mut Workspace, problem: &ConicProblem, warm: Option<&WarmStart>) -> Result<SolveResult, SolverError> {
    let settings = ws.settings.clone();
    let (n, m) = (problem.n_vars(), problem.n_rows());
    let q: Vec<f64> = problem.q.iter().zip(&ws.d).map(|(q, d)| ws.c * q * d).collect();
    let b: Vec<f64> = problem.b.iter().zip(&ws.e).map(|(b, e)| b * e).collect();

    let (mut x, mut s, mut y) = match warm {
        Some(w) if w.x.len() == n && w.s.len() == m && w.y.len() == m => (
            w.x.iter().zip(&ws.d).map(|(x, d)| x / d).collect::<Vec<_>>(),
            w.s.iter().zip(&ws.e).map(|(s, e)| s * e).collect::<Vec<_>>(),
            w.y.iter().zip(&ws.e).map(|(y, e)| ws.c * y / e).collect::<Vec<_>>(),
        ),
        _ => (vec![0.0; n], vec![0.0; m], vec![0.0; m]),
    };
    cones::project_product(&ws.cones, &mut s);

    let alpha = settings.alpha;
    let sigma = settings.sigma;
    let mut rhs = vec![0.0; n + m];
    let mut s_relaxed = vec![0.0; m];
    let mut y_prev = vec![0.0; m];
    let mut best: Option<(f64, Vec<f64>, Vec<f64>, Vec<f64>, Residuals)> = None;
    let mut status = SolveStatus::MaxIters;
    let mut iterations = 0;

    for iter in 1..=settings.max_iters {
        iterations = iter;
        for j in 0..n {
            rhs[j] = sigma * x[j] - q[j];
        }
        for i in 0..m {
            rhs[n + i] = b[i] - s[i] + y[i] / ws.rho_vec[i];
        }
        ws.factor.solve(&mut rhs);
        y_prev.copy_from_slice(&y);
        for j in 0..n {
            x[j] = alpha * rhs[j] + (1.0 - alpha) * x[j];
        }
        for i in 0..m {
            let s_tilde = s[i] - (rhs[n + i] + y[i]) / ws.rho_vec[i];
            s_relaxed[i] = alpha * s_tilde + (1.0 - alpha) * s[i];
            s[i] = s_relaxed[i] + y[i] / ws.rho_vec[i];
        }
        cones::project_product(&ws.cones, &mut s);
        for i in 0..m {
            y[i] += ws.rho_vec[i] * (s_relaxed[i] - s[i]);
        }

        let adapt = settings.adaptive_rho && iter % settings.adaptive_rho_interval == 0;
        if iter % settings.check_interval != 0 && !adapt && iter != settings.max_iters {
            continue;
        }
        let res = residuals(ws, &q, &b, &x, &s, &y);
        if res.converged() {
            status = SolveStatus::Optimal;
            best = Some((0.0, x.clone(), s.clone(), y.clone(), res));
            break;
        }
        if primal_infeasible(ws, problem, &y, &y_prev, settings.eps_infeasible) {
            status = SolveStatus::Infeasible;
            best = Some((f64::INFINITY, x.clone(), s.clone(), y.clone(), res));
            break;
        }
        let merit = res.merit();
        if best.as_ref().is_none_or(|b| merit < b.0) {
            best = Some((merit, x.clone(), s.clone(), y.clone(), res));
        }
        if adapt {
            let new_rho = adapted_rho(ws, &q, &b, &x, &s, &y);
            if new_rho > ws.rho * RHO_ADAPT_THRESHOLD || new_rho < ws.rho / RHO_ADAPT_THRESHOLD {
                ws.set_rho(new_rho)?;
            }
        }
    }

    let (_, xs, ss, ys, res) = best.unwrap_or_else(|| {
        let res = residuals(ws, &q, &b, &x, &s, &y);
        (0.0, x.clone(), s.clone(), y.clone(), res)
    });
    let x_out: Vec<f64> = xs.iter().zip(&ws.d).map(|(x, d)| x * d).collect();
    let s_out: Vec<f64> = ss.iter().zip(&ws.e).map(|(s, e)| s / e).collect();
    let y_out: Vec<f64> = ys.iter().zip(&ws.e).map(|(y, e)| y * e / ws.c).collect();
    let objective = problem.objective(&x_out);
    Ok(SolveResult {
        x: x_out,
        s: s_out,
        y: y_out,
        objective,
        status,
        iterations,
        primal_residual: res.primal,
        dual_residual: res.dual,
    })
}

fn residuals(ws: &Workspace, q: &[f64], b: &[f64], x: &[f64], s: &[f64], y: &[f64]) -> Residuals {
    let (n, m) = (x.len(), s.len());
    let mut ax = vec![0.0; m];
    ws.a_scaled.mul_vec(x, &mut ax);
    let mut px = vec![0.0; n];
    ws.p_scaled.mul_vec(x, &mut px);
    let mut aty = vec![0.0; n];
    ws.a_scaled.tmul_vec(y, &mut aty);

    let mut primal = 0.0f64;
    let (mut ax_n, mut s_n, mut b_n) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..m {
        let inv = 1.0 / ws.e[i];
        primal = primal.max(((ax[i] + s[i] - b[i]) * inv).abs());
        ax_n = ax_n.max((ax[i] * inv).abs());
        s_n = s_n.max((s[i] * inv).abs());
        b_n = b_n.max((b[i] * inv).abs());
    }
    let mut dual = 0.0f64;
    let (mut px_n, mut aty_n, mut q_n) = (0.0f64, 0.0f64, 0.0f64);
    for j in 0..n {
        let inv = 1.0 / (ws.c * ws.d[j]);
        dual = dual.max(((px[j] + q[j] - aty[j]) * inv).abs());
        px_n = px_n.max((px[j] * inv).abs());
        aty_n = aty_n.max((aty[j] * inv).abs());
        q_n = q_n.max((q[j] * inv).abs());
    }
    let st = &ws.settings;
    Residuals {
        primal,
        dual,
        eps_primal: st.eps_abs + st.eps_rel * ax_n.max(s_n).max(b_n),
        eps_dual: st.eps_abs + st.eps_rel * px_n.max(aty_n).max(q_n),
    }
}

fn adapted_rho(ws: &Workspace, q: &[f64], b: &[f64], x: &[f64], s: &[f64], y: &[f64]) -> f64 {
    let (n, m) = (x.len(), s.len());
    let mut ax = vec![0.0; m];
    ws.a_scaled.mul_vec(x, &mut ax);
    let mut px = vec![0.0; n];
    ws.p_scaled.mul_vec(x, &mut px);
    let mut aty = vec![0.0; n];
    ws.a_scaled.tmul_vec(y, &mut aty);
    let rp: Vec<f64> = (0..m).map(|i| ax[i] + s[i] - b[i]).collect();
    let rd: Vec<f64> = (0..n).map(|j| px[j] + q[j] - aty[j]).collect();
    let tiny = 1e-12;
    let primal = norm_inf(&rp) / norm_inf(&ax).max(norm_inf(s)).max(norm_inf(b)).max(tiny);
    let dual = norm_inf(&rd) / norm_inf(&px).max(norm_inf(&aty)).max(norm_inf(q)).max(tiny);
    if primal <= tiny || dual <= tiny {
        return ws.rho;
    }
    (ws.rho * (primal / dual).sqrt()).clamp(RHO_MIN, RHO_MAX)
}

/// Tests whether the dual increment is a primal infeasibility certificate:
/// `A^T dy = 0`, `dy` in the polar cone and `b^T dy > 0`, after
/// normalization.
fn primal_infeasible(ws: &Workspace, problem: &ConicProblem, y: &[f64], y_prev: &[f64], eps: f64) -> bool {
    let m = y.len();
    // unscaled direction E dy (the 1/c factor drops out after normalizing)
    let mut dy: Vec<f64> = (0..m).map(|i| (y[i] - y_prev[i]) * ws.e[i]).collect();
    let norm = norm_inf(&dy);
    if norm <= 1e-12 {
        return false;
    }
    dy.iter_mut().for_each(|v| *v /= norm);
    if dot(&problem.b, &dy) <= eps {
        return false;
    }
    let mut aty = vec![0.0; problem.n_vars()];
    problem.a.tmul_vec(&dy, &mut aty);
    if norm_inf(&aty) > eps {
        return false;
    }
    let mut offset = 0;
    for cone in &problem.cones {
        let block = &dy[offset..offset + cone.dim];
        if cone.kind != ConeKind::Zero && cones::polar_distance(cone.kind, block) > eps {
            return false;
        }
        offset += cone.dim;
    }
    true
}
