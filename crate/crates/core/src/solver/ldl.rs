//! Sparse `L D L^T` factorization of quasi-definite matrices.
//!
//! Up-looking factorization over the elimination tree, no pivoting. The
//! input is the upper triangle of a symmetric matrix in CSC form. A
//! reverse Cuthill-McKee ordering is applied first; for the banded KKT
//! systems produced by horizon problems it keeps fill within the band.

use std::collections::VecDeque;

use thiserror::Error;

use super::sparse::CscMatrix;

#[derive(Debug, Error, PartialEq)]
pub enum LdlError {
    #[error("matrix is not square")]
    NotSquare,
    #[error("input has entries below the diagonal")]
    NotUpperTriangular,
    #[error("zero or non-finite pivot at column {0}")]
    ZeroPivot(usize),
    #[error("sparsity pattern changed since the symbolic factorization")]
    PatternMismatch,
}

/// Reverse Cuthill-McKee ordering of a symmetric pattern given by its upper
/// triangle. Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(upper: &CscMatrix) -> Vec<usize> {
    let n = upper.ncols;
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for c in 0..n {
        for (r, _) in upper.col(c) {
            if r != c {
                adj[r].push(c);
                adj[c].push(r);
            }
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(|a| a.len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_levels = |start: usize, visited: &[bool]| -> (usize, usize) {
        // returns (last vertex of the deepest level with minimal degree, depth)
        let mut depth = vec![usize::MAX; n];
        let mut queue = VecDeque::from([start]);
        depth[start] = 0;
        let mut last = start;
        while let Some(v) = queue.pop_front() {
            let better = depth[v] > depth[last] || (depth[v] == depth[last] && degree[v] < degree[last]);
            if better {
                last = v;
            }
            for &w in &adj[v] {
                if !visited[w] && depth[w] == usize::MAX {
                    depth[w] = depth[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        (last, depth[last])
    };

    while order.len() < n {
        // start from the unvisited vertex of minimum degree, then walk to a
        // pseudo-peripheral vertex
        let mut start = (0..n).filter(|&v| !visited[v]).min_by_key(|&v| degree[v]).unwrap();
        let (mut far, mut depth) = bfs_levels(start, &visited);
        for _ in 0..4 {
            let (next, next_depth) = bfs_levels(far, &visited);
            if next_depth <= depth {
                break;
            }
            start = far;
            far = next;
            depth = next_depth;
        }
        let _ = start;
        let root = far;
        let mut queue = VecDeque::from([root]);
        visited[root] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Upper triangle of `P A P^T` where `perm[new] = old`, given the upper
/// triangle of `A`. Also returns, for every input entry, its position in
/// the output so values can be refreshed without re-permuting.
pub fn permute_symmetric_upper(upper: &CscMatrix, perm: &[usize]) -> (CscMatrix, Vec<usize>) {
    let n = upper.ncols;
    let mut inverse = vec![0usize; n];
    for (new, &old) in perm.iter().enumerate() {
        inverse[old] = new;
    }
    let mut counts = vec![0usize; n];
    for c in 0..n {
        for (r, _) in upper.col(c) {
            let (i, j) = (inverse[r], inverse[c]);
            counts[i.max(j)] += 1;
        }
    }
    let mut colptr = vec![0usize; n + 1];
    for c in 0..n {
        colptr[c + 1] = colptr[c] + counts[c];
    }
    let mut next = colptr.clone();
    let nnz = upper.nnz();
    let mut rowval = vec![0usize; nnz];
    let mut nzval = vec![0.0; nnz];
    let mut map = vec![0usize; nnz];
    for c in 0..n {
        for p in upper.colptr[c]..upper.colptr[c + 1] {
            let r = upper.rowval[p];
            let (i, j) = (inverse[r], inverse[c]);
            let (row, col) = (i.min(j), i.max(j));
            let dest = next[col];
            next[col] += 1;
            rowval[dest] = row;
            nzval[dest] = upper.nzval[p];
            map[p] = dest;
        }
    }
    // sort rows inside each column, carrying the map along
    let mut position_of = vec![0usize; nnz];
    for (src, &dest) in map.iter().enumerate() {
        position_of[dest] = src;
    }
    for col in 0..n {
        let range = colptr[col]..colptr[col + 1];
        let mut entries: Vec<(usize, f64, usize)> =
            range.clone().map(|k| (rowval[k], nzval[k], position_of[k])).collect();
        entries.sort_by_key(|e| e.0);
        for (offset, (row, val, src)) in entries.into_iter().enumerate() {
            let k = range.start + offset;
            rowval[k] = row;
            nzval[k] = val;
            map[src] = k;
        }
    }
    (
        CscMatrix {
            nrows: n,
            ncols: n,
            colptr,
            rowval,
            nzval,
        },
        map,
    )
}

/// Elimination tree and column counts of `L`.
#[derive(Debug, Clone)]
struct Symbolic {
    etree: Vec<Option<usize>>,
    lnz: Vec<usize>,
}

fn symbolic(upper: &CscMatrix) -> Result<Symbolic, LdlError> {
    let n = upper.ncols;
    let mut work = vec![usize::MAX; n];
    let mut etree = vec![None; n];
    let mut lnz = vec![0usize; n];
    for j in 0..n {
        work[j] = j;
        for (row, _) in upper.col(j) {
            if row > j {
                return Err(LdlError::NotUpperTriangular);
            }
            let mut i = row;
            while work[i] != j {
                if etree[i].is_none() {
                    etree[i] = Some(j);
                }
                lnz[i] += 1;
                work[i] = j;
                match etree[i] {
                    Some(parent) => i = parent,
                    None => break,
                }
            }
        }
    }
    Ok(Symbolic { etree, lnz })
}

/// Factorization `P K P^T = L D L^T` with a fixed ordering and pattern.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    perm: Vec<usize>,
    /// Pattern of the permuted upper triangle used for the factorization.
    permuted: CscMatrix,
    map: Vec<usize>,
    pattern_colptr: Vec<usize>,
    pattern_rowval: Vec<usize>,
    sym: Symbolic,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    d_inv: Vec<f64>,
}

impl LdlFactor {
    /// Orders, analyzes and factors the upper triangle `upper`.
    pub fn new(upper: &CscMatrix) -> Result<Self, LdlError> {
        if upper.nrows != upper.ncols {
            return Err(LdlError::NotSquare);
        }
        let perm = reverse_cuthill_mckee(upper);
        Self::with_ordering(upper, perm)
    }

    pub fn with_ordering(upper: &CscMatrix, perm: Vec<usize>) -> Result<Self, LdlError> {
        if upper.nrows != upper.ncols {
            return Err(LdlError::NotSquare);
        }
        if upper.triplets().iter().any(|&(r, c, _)| r > c) {
            return Err(LdlError::NotUpperTriangular);
        }
        let n = upper.ncols;
        let (permuted, map) = permute_symmetric_upper(upper, &perm);
        let sym = symbolic(&permuted)?;
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + sym.lnz[i];
        }
        let total = lp[n];
        let mut factor = Self {
            n,
            perm,
            pattern_colptr: upper.colptr.clone(),
            pattern_rowval: upper.rowval.clone(),
            permuted,
            map,
            sym,
            lp,
            li: vec![0; total],
            lx: vec![0.0; total],
            d: vec![0.0; n],
            d_inv: vec![0.0; n],
        };
        factor.numeric()?;
        Ok(factor)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz_l(&self) -> usize {
        self.lx.len()
    }

    /// Number of negative pivots (the inertia's negative count).
    pub fn negative_pivots(&self) -> usize {
        self.d.iter().filter(|&&v| v < 0.0).count()
    }

    /// Refactors with new values on the same pattern.
    pub fn refactor(&mut self, upper: &CscMatrix) -> Result<(), LdlError> {
        if upper.colptr != self.pattern_colptr || upper.rowval != self.pattern_rowval {
            return Err(LdlError::PatternMismatch);
        }
        for (src, &dest) in self.map.iter().enumerate() {
            self.permuted.nzval[dest] = upper.nzval[src];
        }
        self.numeric()
    }

    fn numeric(&mut self) -> Result<(), LdlError> {
        let n = self.n;
        let a = &self.permuted;
        let etree = &self.sym.etree;
        let mut y_vals = vec![0.0; n];
        let mut y_marked = vec![false; n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];
        let mut next_in_col: Vec<usize> = self.lp[..n].to_vec();

        for k in 0..n {
            let mut nnz_y = 0;
            self.d[k] = 0.0;
            for p in a.colptr[k]..a.colptr[k + 1] {
                let b = a.rowval[p];
                if b == k {
                    self.d[k] = a.nzval[p];
                    continue;
                }
                y_vals[b] = a.nzval[p];
                if y_marked[b] {
                    continue;
                }
                y_marked[b] = true;
                elim[0] = b;
                let mut n_elim = 1;
                let mut next = etree[b];
                while let Some(v) = next {
                    if v >= k || y_marked[v] {
                        break;
                    }
                    y_marked[v] = true;
                    elim[n_elim] = v;
                    n_elim += 1;
                    next = etree[v];
                }
                while n_elim > 0 {
                    n_elim -= 1;
                    y_idx[nnz_y] = elim[n_elim];
                    nnz_y += 1;
                }
            }
            for i in (0..nnz_y).rev() {
                let c = y_idx[i];
                let end = next_in_col[c];
                let yc = y_vals[c];
                for j in self.lp[c]..end {
                    y_vals[self.li[j]] -= self.lx[j] * yc;
                }
                self.li[end] = k;
                self.lx[end] = yc * self.d_inv[c];
                self.d[k] -= yc * self.lx[end];
                next_in_col[c] += 1;
                y_vals[c] = 0.0;
                y_marked[c] = false;
            }
            if self.d[k] == 0.0 || !self.d[k].is_finite() {
                return Err(LdlError::ZeroPivot(k));
            }
            self.d_inv[k] = 1.0 / self.d[k];
        }
        Ok(())
    }

    /// Solves `K x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..n {
            let xi = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                x[self.li[j]] -= self.lx[j] * xi;
            }
        }
        for i in 0..n {
            x[i] *= self.d_inv[i];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                acc -= self.lx[j] * x[self.li[j]];
            }
            x[i] = acc;
        }
        for (new, &old) in self.perm.iter().enumerate() {
            b[old] = x[new];
        }
    }
}

/// Upper triangle of a square matrix.
pub fn upper_triangle(m: &CscMatrix) -> CscMatrix {
    let t: Vec<_> = m.triplets().into_iter().filter(|&(r, c, _)| r <= c).collect();
    CscMatrix::from_triplets(m.nrows, m.ncols, &t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quasidefinite(n: usize, m: usize, rng: &mut ChaCha8Rng) -> CscMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 1.0 + rng.gen::<f64>()));
        }
        for i in 0..m {
            t.push((n + i, n + i, -(0.1 + rng.gen::<f64>())));
            for j in 0..n {
                if rng.gen_bool(0.3) {
                    let v = rng.gen_range(-1.0..1.0);
                    t.push((n + i, j, v));
                    t.push((j, n + i, v));
                }
            }
        }
        CscMatrix::from_triplets(n + m, n + m, &t)
    }

    fn residual(full: &CscMatrix, x: &[f64], b: &[f64]) -> f64 {
        let mut y = vec![0.0; b.len()];
        full.mul_vec(x, &mut y);
        y.iter().zip(b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn solves_random_quasidefinite_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (n, m) = (rng.gen_range(1..15), rng.gen_range(0..10));
            let full = random_quasidefinite(n, m, &mut rng);
            let factor = LdlFactor::new(&upper_triangle(&full)).unwrap();
            assert_eq!(factor.negative_pivots(), m);
            let b: Vec<f64> = (0..n + m).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut x = b.clone();
            factor.solve(&mut x);
            assert!(residual(&full, &x, &b) < 1e-10);
        }
    }

    #[test]
    fn refactor_reuses_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let full = random_quasidefinite(6, 4, &mut rng);
        let upper = upper_triangle(&full);
        let mut factor = LdlFactor::new(&upper).unwrap();
        let mut scaled = upper.clone();
        scaled.nzval.iter_mut().for_each(|v| *v *= 2.0);
        factor.refactor(&scaled).unwrap();
        let b = vec![1.0; 10];
        let mut x = b.clone();
        factor.solve(&mut x);
        let mut full2 = full.clone();
        full2.nzval.iter_mut().for_each(|v| *v *= 2.0);
        assert!(residual(&full2, &x, &b) < 1e-10);

        let other = upper_triangle(&CscMatrix::identity(10));
        assert_eq!(factor.refactor(&other), Err(LdlError::PatternMismatch));
    }

    #[test]
    fn rcm_is_a_permutation_and_limits_fill_on_a_band() {
        // tridiagonal matrix shuffled: RCM should recover a banded order
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut labels: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            labels.swap(i, rng.gen_range(0..=i));
        }
        let mut t = Vec::new();
        for i in 0..n {
            t.push((labels[i], labels[i], 4.0));
            if i + 1 < n {
                let (a, b) = (labels[i].min(labels[i + 1]), labels[i].max(labels[i + 1]));
                t.push((a, b, -1.0));
            }
        }
        let upper = CscMatrix::from_triplets(n, n, &t);
        let mut perm = reverse_cuthill_mckee(&upper);
        let factor = LdlFactor::with_ordering(&upper, perm.clone()).unwrap();
        assert_eq!(factor.nnz_l(), n - 1);
        perm.sort_unstable();
        assert_eq!(perm, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn zero_pivot_is_reported() {
        let upper = CscMatrix::from_triplets(2, 2, &[(0, 1, 1.0)]);
        assert!(matches!(LdlFactor::new(&upper), Err(LdlError::ZeroPivot(_))));
    }
}
