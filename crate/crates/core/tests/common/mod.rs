//! Oracles shared by the test targets and the acceptance report.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dmpc::comm::{decode, encode, read_frame, write_frame, TrajectoryMessage};
use dmpc::config::{LeaderProfile, NeighborRule, ScenarioConfig, TauSpec, TopologySpec};
use dmpc::model::Output;
use dmpc::solver::{project_cone, Cone, ConeKind, ConicProblem, CscMatrix, SolveStatus, Solver, SolverSettings};
use dmpc::topology::{
    kronecker, kronecker_eigen_deviation, nilpotency_index, terminal_error_matrix, Generator, TopologyGraph,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tight() -> SolverSettings {
    SolverSettings {
        eps_abs: 1e-10,
        eps_rel: 1e-10,
        max_iters: 100_000,
        ..SolverSettings::default()
    }
}

pub fn dense_csc(m: &DMatrix<f64>) -> CscMatrix {
    if m.nrows() == 0 {
        return CscMatrix::zeros(0, m.ncols());
    }
    let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect();
    CscMatrix::from_dense(&rows)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

/// Solves `count` random equality-constrained QPs (`n <= 20`) and returns
/// the largest deviation from the KKT solution.
pub fn equality_qp_worst(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let n = rng.gen_range(1..=20);
        let m = rng.gen_range(0..n);
        let l = random_matrix(&mut rng, n, n);
        let p = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
        let q = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let a = random_matrix(&mut rng, m, n);
        let b = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));

        // [P A^T; A 0] [x; -y] = [-q; b]
        let mut kkt = DMatrix::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p);
        kkt.view_mut((n, 0), (m, n)).copy_from(&a);
        kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-&q));
        rhs.rows_mut(n, m).copy_from(&b);
        let expected = kkt.lu().solve(&rhs).expect("KKT matrix is nonsingular");

        let problem = ConicProblem {
            p: dense_csc(&p),
            q: q.iter().copied().collect(),
            constant: 0.0,
            a: dense_csc(&a),
            b: b.iter().copied().collect(),
            cones: if m > 0 { vec![Cone::zero(m)] } else { vec![] },
        };
        let result = Solver::new(tight()).solve(&problem, None).unwrap();
        if result.status != SolveStatus::Optimal {
            return f64::INFINITY;
        }
        for j in 0..n {
            worst = worst.max((result.x[j] - expected[j]).abs());
        }
    }
    worst
}

/// Vertex enumeration for `min c^T x` over `G x <= h`, `x` in `R^n`,
/// `n <= 3`. The polytope is bounded by construction.
pub fn vertex_oracle(c: &[f64], g: &[Vec<f64>], h: &[f64]) -> Option<f64> {
    let n = c.len();
    let rows = g.len();
    let mut best: Option<f64> = None;
    let mut idx = vec![0usize; n];
    fn combos(start: usize, depth: usize, rows: usize, idx: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if depth == idx.len() {
            out.push(idx.clone());
            return;
        }
        for r in start..rows {
            idx[depth] = r;
            combos(r + 1, depth + 1, rows, idx, out);
        }
    }
    let mut all = Vec::new();
    combos(0, 0, rows, &mut idx, &mut all);
    for set in all {
        let m = DMatrix::from_fn(n, n, |i, j| g[set[i]][j]);
        if m.determinant().abs() < 1e-9 {
            continue;
        }
        let rhs = DVector::from_fn(n, |i, _| h[set[i]]);
        let Some(x) = m.lu().solve(&rhs) else { continue };
        let feasible = g
            .iter()
            .zip(h)
            .all(|(row, hi)| row.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() <= hi + 1e-9);
        if feasible {
            let v: f64 = c.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
            best = Some(best.map_or(v, |b: f64| b.min(v)));
        }
    }
    best
}

/// Solves `count` random bounded LPs with at most three variables and
/// returns the largest objective gap to vertex enumeration.
pub fn lp_worst(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let n = rng.gen_range(1..=3);
        let extra = rng.gen_range(0..=4);
        let interior: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Vec::new();
        let mut h = Vec::new();
        // box keeps the problem bounded
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            g.push(e.clone());
            h.push(rng.gen_range(2.0..4.0));
            e[j] = -1.0;
            g.push(e);
            h.push(rng.gen_range(2.0..4.0));
        }
        // random cuts that keep `interior` strictly feasible
        for _ in 0..extra {
            let row: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let at: f64 = row.iter().zip(&interior).map(|(a, b)| a * b).sum();
            g.push(row);
            h.push(at + rng.gen_range(0.1..1.0));
        }
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected = vertex_oracle(&c, &g, &h).expect("bounded feasible LP has a vertex");

        let problem = ConicProblem {
            p: CscMatrix::zeros(n, n),
            q: c,
            constant: 0.0,
            a: CscMatrix::from_dense(&g),
            b: h,
            cones: vec![Cone::nonnegative(g.len())],
        };
        let result = Solver::new(tight()).solve(&problem, None).unwrap();
        if result.status != SolveStatus::Optimal {
            return f64::INFINITY;
        }
        worst = worst.max((result.objective - expected).abs());
    }
    worst
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest idempotence defect and largest expansion `|P(u) - P(v)| - |u - v|`
/// over `count` random pairs, both relative to `1 + |.|`.
pub fn projection_worst(count: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [ConeKind::Zero, ConeKind::Nonnegative, ConeKind::SecondOrder];
    let (mut idem, mut expand) = (0.0f64, f64::NEG_INFINITY);
    for k in 0..count {
        let kind = kinds[k % 3];
        let dim = rng.gen_range(1..=8);
        let scale = 10f64.powi(rng.gen_range(-3..=3));
        let u: Vec<f64> = (0..dim).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..dim).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let pu = project_cone(&u, kind, dim);
        let pv = project_cone(&v, kind, dim);
        let ppu = project_cone(&pu, kind, dim);
        let diff: Vec<f64> = pu.iter().zip(&ppu).map(|(a, b)| a - b).collect();
        idem = idem.max(norm(&diff) / (1.0 + norm(&u)));
        let d_proj: Vec<f64> = pu.iter().zip(&pv).map(|(a, b)| a - b).collect();
        let d_in: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a - b).collect();
        expand = expand.max((norm(&d_proj) - norm(&d_in)) / (1.0 + norm(&d_in)));
    }
    (idem, expand)
}

/// Checks `T^N = 0` exactly and `index <= N` on `count` random connected
/// graphs; returns a description of the first failure.
pub fn nilpotency_failures(count: usize, seed: u64) -> Option<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..count {
        let n = rng.gen_range(1..=8);
        let extra = rng.gen_range(0.0..0.6);
        let g = TopologyGraph::random_connected(n, extra, &mut rng);
        if let Err(v) = g.validate_connectivity() {
            return Some(format!("case {case}: generator produced a bad graph: {v}"));
        }
        let delta_h = rng.gen_range(0.0..1.0);
        let t = terminal_error_matrix(&g, 0.1, delta_h).unwrap();
        let mut power = DMatrix::identity(2 * n, 2 * n);
        for _ in 0..n {
            power = &power * &t;
        }
        if power.iter().any(|&v| v != 0.0) {
            return Some(format!("case {case}: T^{n} has a nonzero entry"));
        }
        match nilpotency_index(&t) {
            Ok(k) if k <= n => {}
            other => return Some(format!("case {case}: nilpotency index {other:?} for N = {n}")),
        }
    }
    None
}

/// Largest eigenvalue mismatch between `A (x) B` and the products of the
/// eigenvalues of random 3x3 matrices.
pub fn kronecker_eigen_worst(count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a = random_matrix(&mut rng, 3, 3);
            let b = random_matrix(&mut rng, 3, 3);
            assert_eq!(kronecker(&a, &b).nrows(), 9);
            kronecker_eigen_deviation(&a, &b)
        })
        .fold(0.0, f64::max)
}

pub fn random_message(rng: &mut ChaCha8Rng) -> TrajectoryMessage {
    let h = rng.gen_range(0..80);
    let samples = (0..=h)
        .map(|_| {
            let mut f = || {
                // mix ordinary values with extreme finite bit patterns
                if rng.gen_bool(0.1) {
                    let bits: u64 = rng.gen();
                    let v = f64::from_bits(bits);
                    if v.is_finite() {
                        v
                    } else {
                        f64::MAX
                    }
                } else {
                    rng.gen_range(-1e4..1e4)
                }
            };
            Output::new(f(), f())
        })
        .collect();
    TrajectoryMessage::new(rng.gen_range(0..=u16::MAX as usize), rng.gen(), samples).unwrap()
}

/// Encodes, frames and decodes `count` random messages; returns the number
/// that did not survive bit-exactly.
pub fn codec_mismatches(count: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stream = Vec::new();
    let mut sent = Vec::with_capacity(count);
    let mut bad = 0;
    for _ in 0..count {
        let msg = random_message(&mut rng);
        let bytes = encode(&msg);
        let back = decode(&bytes).unwrap();
        let same_bits =
            back.samples.iter().zip(&msg.samples).all(|(a, b)| {
                a.position.to_bits() == b.position.to_bits() && a.velocity.to_bits() == b.velocity.to_bits()
            });
        if back != msg || !same_bits || encode(&back) != bytes {
            bad += 1;
        }
        write_frame(&mut stream, &msg).unwrap();
        sent.push(msg);
    }
    let mut reader = stream.as_slice();
    for msg in &sent {
        if read_frame(&mut reader).unwrap().as_ref() != Some(msg) {
            bad += 1;
        }
    }
    if read_frame(&mut reader).unwrap().is_some() {
        bad += 1;
    }
    bad
}

/// The documented single-step message: sender 3, timestep 7, samples
/// (0, 20) and (2, 20).
pub fn documented_message_bytes() -> Vec<u8> {
    let mut expected = vec![0x44, 0x4D, 0x50, 0x43, 0x01, 3, 0, 7, 0, 0, 0, 0, 0, 0, 0, 1, 0];
    for v in [0.0f64, 20.0, 2.0, 20.0] {
        expected.extend_from_slice(&v.to_le_bytes());
    }
    expected
}

/// Small perturbed platoon at constant leader speed with uniform lag
/// `tau`; `offsets[k]` is the initial position offset of vehicle `k + 1`.
pub fn perturbed_scenario(generator: Generator, offsets: &[f64], tau: f64, horizon: usize) -> ScenarioConfig {
    let n = offsets.len();
    let mut cfg = ScenarioConfig::preset("paper-pf-cth").unwrap();
    cfg.name = format!("perturbed-{n}");
    cfg.n = n;
    cfg.horizon = horizon;
    cfg.duration = 40.0;
    cfg.tau = TauSpec::Values(vec![tau; n]);
    cfg.topology = TopologySpec::Named(generator);
    cfg.weights.neighbor = NeighborRule::Split { q: 1.0 };
    cfg.spacing.per_vehicle = Some(BTreeMap::new());
    cfg.leader = LeaderProfile::constant(0.0, 20.0);
    cfg.initial.position_offsets = offsets.iter().enumerate().map(|(k, &o)| (k + 1, o)).collect();
    cfg
}
