//! Directed communication graphs over the platoon.
//!
//! Vertex `0` is the (virtual) leader and `1..=N` are the followers, ordered
//! front to back. An edge `(j, i)` means vehicle `i` receives from `j`.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use nalgebra::{Complex, DMatrix, Matrix2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("platoon must contain at least one follower")]
    NoFollowers,
    #[error("self-loop at vehicle {0}")]
    SelfLoop(usize),
    #[error("edge ({from}, {to}) references a vehicle outside 0..={n}")]
    IndexOutOfRange { from: usize, to: usize, n: usize },
    #[error("vehicle index {index} outside 1..={n}")]
    NotAFollower { index: usize, n: usize },
    #[error("{0}")]
    Connectivity(ConnectivityViolation),
    #[error("matrix is not nilpotent (no power up to {0} vanishes)")]
    NotNilpotent(usize),
}

/// Named topology generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    /// Predecessor following: `i` hears `i - 1`.
    Pf,
    /// Bidirectional: `i` hears `i - 1` and `i + 1`.
    Bd,
    /// `i` hears `i - 1` and `i - 2`.
    TwoPred,
    /// Every follower hears the leader and nobody else.
    LeaderBroadcast,
}

impl Generator {
    pub fn edges(self, n: usize) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        match self {
            Generator::Pf => edges.extend((1..=n).map(|i| (i - 1, i))),
            Generator::Bd => {
                edges.extend((1..=n).map(|i| (i - 1, i)));
                edges.extend((1..n).map(|i| (i + 1, i)));
            }
            Generator::TwoPred => {
                edges.extend((1..=n).map(|i| (i - 1, i)));
                edges.extend((2..=n).map(|i| (i - 2, i)));
            }
            Generator::LeaderBroadcast => edges.extend((1..=n).map(|i| (0, i))),
        }
        edges
    }
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Generator::Pf => "pf",
            Generator::Bd => "bd",
            Generator::TwoPred => "two-pred",
            Generator::LeaderBroadcast => "leader-broadcast",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopologyGraph {
    n_followers: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl TopologyGraph {
    pub fn new(n_followers: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, TopologyError> {
        if n_followers == 0 {
            return Err(TopologyError::NoFollowers);
        }
        let mut set = BTreeSet::new();
        for (from, to) in edges {
            if from == to {
                return Err(TopologyError::SelfLoop(from));
            }
            if from > n_followers || to > n_followers {
                return Err(TopologyError::IndexOutOfRange {
                    from,
                    to,
                    n: n_followers,
                });
            }
            set.insert((from, to));
        }
        Ok(Self {
            n_followers,
            edges: set,
        })
    }

    pub fn generate(generator: Generator, n_followers: usize) -> Result<Self, TopologyError> {
        Self::new(n_followers, generator.edges(n_followers))
    }

    pub fn pf(n: usize) -> Self {
        Self::generate(Generator::Pf, n).expect("pf topology")
    }

    pub fn bd(n: usize) -> Self {
        Self::generate(Generator::Bd, n).expect("bd topology")
    }

    pub fn two_pred(n: usize) -> Self {
        Self::generate(Generator::TwoPred, n).expect("two-pred topology")
    }

    pub fn leader_broadcast(n: usize) -> Self {
        Self::generate(Generator::LeaderBroadcast, n).expect("leader-broadcast topology")
    }

    /// Random graph passing the connectivity check: every follower gets at least one
    /// edge from a vehicle ahead of it, plus each other ordered pair is added
    /// with probability `extra`.
    pub fn random_connected<R: Rng + ?Sized>(n: usize, extra: f64, rng: &mut R) -> Self {
        let mut edges = Vec::new();
        for i in 1..=n {
            edges.push((rng.gen_range(0..i), i));
            for j in 0..=n {
                if j != i && rng.gen_bool(extra) {
                    edges.push((j, i));
                }
            }
        }
        Self::new(n, edges).expect("generated edges are in range")
    }

    pub fn n_followers(&self) -> usize {
        self.n_followers
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.contains(&(from, to))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    fn check_follower(&self, i: usize) -> Result<(), TopologyError> {
        if i == 0 || i > self.n_followers {
            Err(TopologyError::NotAFollower {
                index: i,
                n: self.n_followers,
            })
        } else {
            Ok(())
        }
    }

    /// Followers `i` receives from (leader excluded).
    pub fn receive_set(&self, i: usize) -> BTreeSet<usize> {
        self.edges
            .iter()
            .filter(|&&(j, to)| to == i && j != 0)
            .map(|&(j, _)| j)
            .collect()
    }

    /// Followers that receive from `i`.
    pub fn share_set(&self, i: usize) -> BTreeSet<usize> {
        self.edges
            .iter()
            .filter(|&&(from, j)| from == i && j != 0)
            .map(|&(_, j)| j)
            .collect()
    }

    pub fn hears_leader(&self, i: usize) -> bool {
        self.has_edge(0, i)
    }

    /// All vertices `i` receives from, the leader included.
    pub fn info_set(&self, i: usize) -> BTreeSet<usize> {
        let mut info = self.receive_set(i);
        if self.hears_leader(i) {
            info.insert(0);
        }
        info
    }

    pub fn info_pre_set(&self, i: usize) -> BTreeSet<usize> {
        self.info_set(i).into_iter().filter(|&j| j < i).collect()
    }

    pub fn vehicle_sets(&self, i: usize) -> Result<VehicleSets, TopologyError> {
        self.check_follower(i)?;
        let receive = self.receive_set(i);
        let share = self.share_set(i);
        let leader = if self.hears_leader(i) {
            BTreeSet::from([0])
        } else {
            BTreeSet::new()
        };
        let info: BTreeSet<usize> = receive.union(&leader).copied().collect();
        let info_pre = info.iter().copied().filter(|&j| j < i).collect();
        Ok(VehicleSets {
            receive,
            share,
            leader,
            info,
            info_pre,
        })
    }

    /// Checks that every follower is reachable from the leader and has an
    /// incoming edge from some vehicle ahead of it.
    pub fn validate_connectivity(&self) -> Result<(), ConnectivityViolation> {
        let n = self.n_followers;
        let mut reached = vec![false; n + 1];
        reached[0] = true;
        let mut queue = VecDeque::from([0usize]);
        while let Some(v) = queue.pop_front() {
            for &(from, to) in &self.edges {
                if from == v && !reached[to] {
                    reached[to] = true;
                    queue.push_back(to);
                }
            }
        }
        let unreachable: Vec<usize> = (1..=n).filter(|&i| !reached[i]).collect();
        let no_predecessor: Vec<usize> = (1..=n)
            .filter(|&i| !self.edges.iter().any(|&(j, to)| to == i && j < i))
            .collect();
        if unreachable.is_empty() && no_predecessor.is_empty() {
            Ok(())
        } else {
            Err(ConnectivityViolation {
                unreachable,
                no_predecessor,
            })
        }
    }

    pub fn matrices(&self) -> TopologyMatrices {
        build_matrices(self)
    }
}

/// Failure report for the leader-connectivity check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConnectivityViolation {
    /// Followers with no directed path from the leader.
    pub unreachable: Vec<usize>,
    /// Followers that receive from no vehicle ahead of them.
    pub no_predecessor: Vec<usize>,
}

impl fmt::Display for ConnectivityViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if !self.unreachable.is_empty() {
            parts.push(format!("no path from the leader to vehicle(s) {:?}", self.unreachable));
        }
        if !self.no_predecessor.is_empty() {
            parts.push(format!(
                "vehicle(s) {:?} receive from no preceding vehicle",
                self.no_predecessor
            ));
        }
        write!(
            f,
            "topology is not leader-connected through predecessors: {}",
            parts.join("; ")
        )
    }
}

/// Per-follower index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VehicleSets {
    pub receive: BTreeSet<usize>,
    pub share: BTreeSet<usize>,
    pub leader: BTreeSet<usize>,
    pub info: BTreeSet<usize>,
    pub info_pre: BTreeSet<usize>,
}

pub fn vehicle_sets(g: &TopologyGraph, i: usize) -> Result<VehicleSets, TopologyError> {
    g.vehicle_sets(i)
}

pub fn validate_connectivity(g: &TopologyGraph) -> Result<(), ConnectivityViolation> {
    g.validate_connectivity()
}

/// Adjacency, degree, Laplacian and pinning matrices over the followers.
/// Row/column `k` corresponds to vehicle `k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyMatrices {
    pub m: DMatrix<f64>,
    pub m_pre: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub d_pre: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub l_pre: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub p_pre: DMatrix<f64>,
}

impl TopologyMatrices {
    /// `(D_pre + P_pre)^-1 M_pre`, the averaging operator of the terminal
    /// constraint. `None` if some follower has no predecessor.
    pub fn predecessor_averaging(&self) -> Option<DMatrix<f64>> {
        let n = self.m.nrows();
        let mut out = self.m_pre.clone();
        for i in 0..n {
            let deg = self.d_pre[(i, i)] + self.p_pre[(i, i)];
            if deg == 0.0 {
                return None;
            }
            for j in 0..n {
                out[(i, j)] /= deg;
            }
        }
        Some(out)
    }
}

pub fn build_matrices(g: &TopologyGraph) -> TopologyMatrices {
    let n = g.n_followers;
    let mut m = DMatrix::zeros(n, n);
    let mut p = DMatrix::zeros(n, n);
    for (from, to) in g.edges() {
        if to == 0 {
            continue;
        }
        if from == 0 {
            p[(to - 1, to - 1)] = 1.0;
        } else {
            m[(to - 1, from - 1)] = 1.0;
        }
    }
    let m_pre = DMatrix::from_fn(n, n, |r, c| if c < r { m[(r, c)] } else { 0.0 });
    let degree = |adj: &DMatrix<f64>| {
        DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            n,
            adj.row_iter().map(|row| row.sum()),
        ))
    };
    let d = degree(&m);
    let d_pre = degree(&m_pre);
    let l = &d - &m;
    let l_pre = &d_pre - &m_pre;
    let p_pre = p.clone();
    TopologyMatrices {
        m,
        m_pre,
        d,
        d_pre,
        l,
        l_pre,
        p,
        p_pre,
    }
}

/// Propagation matrix of the terminal output error, `e(t+1) = T e(t)`.
///
/// Block `(i, j)` (2x2, followers only) is `Delta_ij / |I_pre(i)|` for each
/// predecessor `j >= 1` of `i`, with
/// `Delta_ij = [[1, dt - (i - j) delta_h], [0, 1]]`. The leader's column is
/// dropped because its terminal error is identically zero.
pub fn terminal_error_matrix(g: &TopologyGraph, dt: f64, delta_h: f64) -> Result<DMatrix<f64>, TopologyError> {
    g.validate_connectivity().map_err(TopologyError::Connectivity)?;
    let n = g.n_followers;
    let mut t = DMatrix::zeros(2 * n, 2 * n);
    for i in 1..=n {
        let pre = g.info_pre_set(i);
        let weight = 1.0 / pre.len() as f64;
        for &j in pre.iter().filter(|&&j| j >= 1) {
            let gap = (i - j) as f64;
            let block = Matrix2::new(1.0, dt - gap * delta_h, 0.0, 1.0) * weight;
            t.view_mut((2 * (i - 1), 2 * (j - 1)), (2, 2)).copy_from(&block);
        }
    }
    Ok(t)
}

/// Smallest `k` with `T^k = 0`.
pub fn nilpotency_index(t: &DMatrix<f64>) -> Result<usize, TopologyError> {
    let n = t.nrows();
    assert_eq!(n, t.ncols(), "nilpotency_index needs a square matrix");
    if n == 0 || t.iter().all(|&v| v == 0.0) {
        return Ok(1);
    }
    let mut power = t.clone();
    for k in 2..=n {
        power = &power * t;
        if power.amax() <= 1e-12 {
            return Ok(k);
        }
    }
    Err(TopologyError::NotNilpotent(n))
}

/// Whether `t` is strictly lower block-triangular with `block`-sized blocks.
pub fn is_strictly_lower_block_triangular(t: &DMatrix<f64>, block: usize) -> bool {
    (0..t.nrows()).all(|r| {
        (0..t.ncols())
            .filter(|&c| c / block >= r / block)
            .all(|c| t[(r, c)] == 0.0)
    })
}

pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Upper bound on the spectral radius from `||T^k||^(1/k)` (Gelfand). Exact
/// zero for nilpotent matrices whose powers vanish in floating point.
pub fn spectral_radius_bound(t: &DMatrix<f64>, k: usize) -> f64 {
    let mut power = t.clone();
    for _ in 1..k.max(1) {
        power = &power * t;
    }
    power.norm().powf(1.0 / k.max(1) as f64)
}

/// Eigenvalues of a square matrix from a dense general eigen-solver.
pub fn eigenvalues(t: &DMatrix<f64>) -> Vec<Complex<f64>> {
    t.complex_eigenvalues().iter().copied().collect()
}

/// Largest distance between the eigenvalues of `a ⊗ b` and the products
/// `λ_i μ_j`, after greedily pairing each product with its nearest unused
/// eigenvalue of the Kronecker product.
pub fn kronecker_eigen_deviation(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut pool = eigenvalues(&a.kronecker(b));
    let products: Vec<Complex<f64>> = eigenvalues(a)
        .iter()
        .flat_map(|l| eigenvalues(b).into_iter().map(move |m| l * m))
        .collect();
    let mut worst = 0.0f64;
    for z in products {
        let (idx, dist) = pool
            .iter()
            .enumerate()
            .map(|(k, w)| (k, (w - z).norm()))
            .fold((usize::MAX, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        if idx == usize::MAX {
            return f64::INFINITY;
        }
        pool.swap_remove(idx);
        worst = worst.max(dist);
    }
    worst
}

/// Eigenvalue moduli from a dense general eigen-solver.
pub fn spectral_radius(t: &DMatrix<f64>) -> f64 {
    t.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn pf_matrices() {
        let m = build_matrices(&TopologyGraph::pf(3));
        assert_eq!(m.m, dmatrix![0.0, 0.0, 0.0; 1.0, 0.0, 0.0; 0.0, 1.0, 0.0]);
        assert_eq!(m.d, DMatrix::from_diagonal(&nalgebra::dvector![0.0, 1.0, 1.0]));
        assert_eq!(m.p, DMatrix::from_diagonal(&nalgebra::dvector![1.0, 0.0, 0.0]));
        assert_eq!(m.l, dmatrix![0.0, 0.0, 0.0; -1.0, 1.0, 0.0; 0.0, -1.0, 1.0]);
        assert_eq!(m.p_pre, m.p);
    }

    #[test]
    fn bd_matrices() {
        let m = build_matrices(&TopologyGraph::bd(3));
        assert_eq!(m.m, dmatrix![0.0, 1.0, 0.0; 1.0, 0.0, 1.0; 0.0, 1.0, 0.0]);
        assert_eq!(m.d, DMatrix::from_diagonal(&nalgebra::dvector![1.0, 2.0, 1.0]));
        assert_eq!(m.m_pre, dmatrix![0.0, 0.0, 0.0; 1.0, 0.0, 0.0; 0.0, 1.0, 0.0]);
        assert_eq!(m.l_pre, &m.d_pre - &m.m_pre);
    }

    #[test]
    fn sets_follow_definitions() {
        let bd = TopologyGraph::bd(3);
        let s = bd.vehicle_sets(2).unwrap();
        assert_eq!(s.receive, set(&[1, 3]));
        assert_eq!(s.share, set(&[1, 3]));
        assert!(s.leader.is_empty());
        assert_eq!(s.info, set(&[1, 3]));
        assert_eq!(s.info_pre, set(&[1]));

        let pf = TopologyGraph::pf(3);
        let s = pf.vehicle_sets(1).unwrap();
        assert!(s.receive.is_empty());
        assert_eq!(s.share, set(&[2]));
        assert_eq!(s.leader, set(&[0]));
        assert_eq!(s.info, set(&[0]));
        assert_eq!(s.info_pre, set(&[0]));

        let s = pf.vehicle_sets(3).unwrap();
        assert_eq!(s.receive, set(&[2]));
        assert!(s.share.is_empty());
        assert_eq!(s.info_pre, set(&[2]));

        assert!(pf.vehicle_sets(0).is_err());
        assert!(pf.vehicle_sets(4).is_err());
    }

    #[test]
    fn rejects_malformed_edges() {
        assert_eq!(TopologyGraph::new(2, [(1, 1)]), Err(TopologyError::SelfLoop(1)));
        assert!(matches!(
            TopologyGraph::new(2, [(0, 3)]),
            Err(TopologyError::IndexOutOfRange { .. })
        ));
        assert_eq!(TopologyGraph::new(0, []), Err(TopologyError::NoFollowers));
    }

    #[test]
    fn connectivity_examples() {
        assert!(TopologyGraph::pf(50).validate_connectivity().is_ok());

        let g = TopologyGraph::new(3, [(0, 1), (3, 2), (1, 3)]).unwrap();
        let err = g.validate_connectivity().unwrap_err();
        assert_eq!(err.no_predecessor, vec![2]);
        assert!(err.unreachable.is_empty());

        let g = TopologyGraph::new(2, [(0, 1), (0, 2)]).unwrap();
        assert!(g.validate_connectivity().is_ok());

        let g = TopologyGraph::new(3, [(0, 1), (2, 3), (3, 2)]).unwrap();
        let err = g.validate_connectivity().unwrap_err();
        assert_eq!(err.unreachable, vec![2, 3]);
        assert_eq!(err.no_predecessor, vec![2]);
    }

    #[test]
    fn terminal_matrix_pf2() {
        let t = terminal_error_matrix(&TopologyGraph::pf(2), 0.1, 0.0).unwrap();
        let expected = dmatrix![
            0.0, 0.0, 0.0, 0.0;
            0.0, 0.0, 0.0, 0.0;
            1.0, 0.1, 0.0, 0.0;
            0.0, 1.0, 0.0, 0.0
        ];
        assert_eq!(t, expected);
        assert!((&t * &t).iter().all(|&v| v == 0.0));
        assert_eq!(nilpotency_index(&t).unwrap(), 2);
    }

    #[test]
    fn terminal_matrix_pf3_cubes_to_zero() {
        let t = terminal_error_matrix(&TopologyGraph::pf(3), 0.1, 0.2).unwrap();
        let t3 = &t * &t * &t;
        assert!(t3.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn terminal_matrix_requires_connectivity() {
        let g = TopologyGraph::new(3, [(0, 1), (3, 2), (1, 3)]).unwrap();
        assert!(matches!(
            terminal_error_matrix(&g, 0.1, 0.0),
            Err(TopologyError::Connectivity(_))
        ));
    }

    #[test]
    fn nilpotency_examples() {
        let pf4 = terminal_error_matrix(&TopologyGraph::pf(4), 0.1, 0.2).unwrap();
        assert_eq!(nilpotency_index(&pf4).unwrap(), 4);

        let broadcast = terminal_error_matrix(&TopologyGraph::leader_broadcast(4), 0.1, 0.2).unwrap();
        assert_eq!(nilpotency_index(&broadcast).unwrap(), 1);

        let two = terminal_error_matrix(&TopologyGraph::two_pred(4), 0.1, 0.2).unwrap();
        let k = nilpotency_index(&two).unwrap();
        assert!(k <= 4);
        // Vehicle 4 still depends on vehicle 1 through the chain 1 -> 2 -> 3 -> 4.
        assert_eq!(k, 4);

        assert_eq!(
            nilpotency_index(&DMatrix::identity(3, 3)),
            Err(TopologyError::NotNilpotent(3))
        );
    }

    #[test]
    fn averaging_operator_has_zero_spectrum() {
        for g in [TopologyGraph::pf(6), TopologyGraph::bd(6), TopologyGraph::two_pred(6)] {
            let m = g.matrices();
            let avg = m.predecessor_averaging().unwrap();
            assert!(is_strictly_lower_block_triangular(&avg, 1));
            assert!(spectral_radius_bound(&avg, 6) <= 1e-10);
        }
    }

    #[test]
    fn unconstrained_bd_average_is_not_nilpotent() {
        // With the full information set instead of predecessors only, the
        // averaging operator of a bidirectional chain has nonzero spectrum.
        let m = TopologyGraph::bd(4).matrices();
        let deg = &m.d + &m.p;
        let inv = deg.try_inverse().unwrap();
        let full = inv * &m.m;
        let rho = spectral_radius(&full);
        assert!(rho > 0.1 && rho < 1.0, "rho = {rho}");
        assert!(nilpotency_index(&full).is_err());
    }

    #[test]
    fn double_sum_identity_integer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(1..9);
            let g = TopologyGraph::random_connected(n, 0.3, &mut rng);
            let f = |i: usize, j: usize| (i * 31 + j * 7) as i64 - 40;
            let lhs: i64 = (1..=n)
                .map(|i| g.receive_set(i).iter().map(|&j| f(i, j)).sum::<i64>())
                .sum();
            let rhs: i64 = (1..=n)
                .map(|i| g.share_set(i).iter().map(|&j| f(j, i)).sum::<i64>())
                .sum();
            assert_eq!(lhs, rhs);
        }
    }

    proptest! {
        #[test]
        fn double_sum_identity_real(seed in any::<u64>(), n in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = TopologyGraph::random_connected(n, 0.4, &mut rng);
            let table: Vec<Vec<f64>> = (0..=n)
                .map(|_| (0..=n).map(|_| rng.gen_range(-10.0..10.0)).collect())
                .collect();
            let lhs: f64 = (1..=n)
                .map(|i| g.receive_set(i).iter().map(|&j| table[i][j]).sum::<f64>())
                .sum();
            let rhs: f64 = (1..=n)
                .map(|i| g.share_set(i).iter().map(|&j| table[j][i]).sum::<f64>())
                .sum();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn random_graphs_have_nilpotent_terminal_map(seed in any::<u64>(), n in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = TopologyGraph::random_connected(n, 0.3, &mut rng);
            prop_assert!(g.validate_connectivity().is_ok());
            let t = terminal_error_matrix(&g, 0.1, 0.2).unwrap();
            prop_assert!(is_strictly_lower_block_triangular(&t, 2));
            let mut power = t.clone();
            for _ in 1..n {
                power = &power * &t;
            }
            prop_assert!(power.iter().all(|&v| v == 0.0));
            prop_assert!(nilpotency_index(&t).unwrap() <= n);
        }

        #[test]
        fn kronecker_eigenvalues_are_products(seed in any::<u64>(), n in 1usize..5, m in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let b = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
            prop_assert!(kronecker_eigen_deviation(&a, &b) <= 1e-8);
        }

        #[test]
        fn matrix_invariants(seed in any::<u64>(), n in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = TopologyGraph::random_connected(n, 0.3, &mut rng);
            let m = g.matrices();
            for r in 0..n {
                prop_assert_eq!(m.m.row(r).sum(), m.d[(r, r)]);
                prop_assert_eq!(m.m_pre.row(r).sum(), m.d_pre[(r, r)]);
                prop_assert_eq!(m.m[(r, r)], 0.0);
                for c in r..n {
                    prop_assert_eq!(m.m_pre[(r, c)], 0.0);
                }
                prop_assert_eq!(
                    (m.d_pre[(r, r)] + m.p_pre[(r, r)]) as usize,
                    g.info_pre_set(r + 1).len()
                );
            }
            prop_assert_eq!(&m.l, &(&m.d - &m.m));
        }
    }
}
