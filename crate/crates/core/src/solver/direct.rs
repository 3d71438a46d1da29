//! Envelope (profile) factorizations after reverse Cuthill-McKee reordering.
//!
//! Symmetric systems use an `L L^T` Cholesky factor; nonsymmetric systems with
//! a symmetric sparsity pattern use a Doolittle `L U` factor without pivoting,
//! which is stable here because every assembled row is diagonally dominant.
//! Fill stays inside the envelope of the reordered matrix.

use std::collections::VecDeque;

use crate::error::{invalid, Error, Result};
use crate::sparse::CsrMatrix;

/// Reverse Cuthill-McKee permutation: `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.n_rows();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| a.row(i).0.iter().copied().filter(|&j| j != i).collect())
        .collect();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_levels = |start: usize, visited: &[bool]| -> (Vec<usize>, usize) {
        // nodes of the deepest level, and that depth
        let mut level = vec![usize::MAX; n];
        level[start] = 0;
        let mut queue = VecDeque::from([start]);
        let mut last = vec![start];
        let mut depth = 0;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !visited[w] && level[w] == usize::MAX {
                    level[w] = level[v] + 1;
                    if level[w] > depth {
                        depth = level[w];
                        last.clear();
                    }
                    if level[w] == depth {
                        last.push(w);
                    }
                    queue.push_back(w);
                }
            }
        }
        (last, depth)
    };

    let mut seeds: Vec<usize> = (0..n).collect();
    seeds.sort_by_key(|&i| (degree[i], i));
    for &seed in &seeds {
        if visited[seed] {
            continue;
        }
        // George-Liu pseudo-peripheral node search.
        let mut start = seed;
        let (mut last, mut ecc) = bfs_levels(start, &visited);
        loop {
            let cand = *last.iter().min_by_key(|&&v| (degree[v], v)).unwrap();
            let (l2, e2) = bfs_levels(cand, &visited);
            if e2 > ecc {
                start = cand;
                last = l2;
                ecc = e2;
            } else {
                break;
            }
        }
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
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

/// Envelope size (strictly lower part) of `a` under `perm`, used to decide
/// whether a direct factorization fits the memory budget.
pub fn envelope_size(a: &CsrMatrix, perm: &[usize]) -> usize {
    let first = envelope_first(a, perm);
    first.iter().enumerate().map(|(i, &f)| i - f).sum()
}

fn envelope_first(a: &CsrMatrix, perm: &[usize]) -> Vec<usize> {
    let n = a.n_rows();
    let mut inv = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    let mut first: Vec<usize> = (0..n).collect();
    for old in 0..n {
        let i = inv[old];
        for &c in a.row(old).0 {
            let j = inv[c];
            let (hi, lo) = if i > j { (i, j) } else { (j, i) };
            first[hi] = first[hi].min(lo);
        }
    }
    first
}

#[derive(Debug, Clone)]
pub struct EnvelopeFactor {
    n: usize,
    perm: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    /// Strictly lower rows of `L`.
    lower: Vec<f64>,
    /// Strictly upper columns of `U` (empty for Cholesky).
    upper: Vec<f64>,
    /// Diagonal of `L` (Cholesky) or of `U` (LU).
    diag: Vec<f64>,
    symmetric: bool,
}

impl EnvelopeFactor {
    /// Factorizes `a` (square, structurally symmetric pattern).
    pub fn new(a: &CsrMatrix, symmetric: bool, max_envelope: usize) -> Result<Self> {
        let n = a.n_rows();
        if a.n_cols() != n {
            return Err(invalid("direct factorization needs a square matrix"));
        }
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let first = envelope_first(a, &perm);
        let mut start = Vec::with_capacity(n + 1);
        start.push(0);
        for (i, &f) in first.iter().enumerate() {
            start.push(start[i] + (i - f));
        }
        let size = start[n];
        if size > max_envelope {
            return Err(invalid(format!(
                "envelope of {size} entries exceeds the direct-solve budget of {max_envelope}"
            )));
        }
        let mut lower = vec![0.0; size];
        let mut upper = if symmetric { Vec::new() } else { vec![0.0; size] };
        let mut diag = vec![0.0; n];
        for old in 0..n {
            let i = inv[old];
            let (cols, vals) = a.row(old);
            for (&c, &v) in cols.iter().zip(vals) {
                let j = inv[c];
                match j.cmp(&i) {
                    std::cmp::Ordering::Less => lower[start[i] + j - first[i]] = v,
                    std::cmp::Ordering::Equal => diag[i] = v,
                    std::cmp::Ordering::Greater => {
                        if !symmetric {
                            upper[start[j] + i - first[j]] = v;
                        }
                    }
                }
            }
        }
        let mut f = Self {
            n,
            perm,
            first,
            start,
            lower,
            upper,
            diag,
            symmetric,
        };
        if symmetric {
            f.cholesky()?;
        } else {
            f.lu()?;
        }
        Ok(f)
    }

    fn cholesky(&mut self) -> Result<()> {
        for i in 0..self.n {
            let fi = self.first[i];
            let si = self.start[i];
            for j in fi..i {
                let fj = self.first[j];
                let sj = self.start[j];
                let k0 = fi.max(fj);
                let mut s = self.lower[si + j - fi];
                for k in k0..j {
                    s -= self.lower[si + k - fi] * self.lower[sj + k - fj];
                }
                self.lower[si + j - fi] = s / self.diag[j];
            }
            let mut d = self.diag[i];
            for k in fi..i {
                let l = self.lower[si + k - fi];
                d -= l * l;
            }
            if !(d > 0.0) {
                return Err(Error::NotPositiveDefinite {
                    pivot: self.perm[i],
                    value: d,
                });
            }
            self.diag[i] = d.sqrt();
        }
        Ok(())
    }

    fn lu(&mut self) -> Result<()> {
        for i in 0..self.n {
            let fi = self.first[i];
            let si = self.start[i];
            // row i of L
            for j in fi..i {
                let fj = self.first[j];
                let sj = self.start[j];
                let k0 = fi.max(fj);
                let mut s = self.lower[si + j - fi];
                for k in k0..j {
                    s -= self.lower[si + k - fi] * self.upper[sj + k - fj];
                }
                self.lower[si + j - fi] = s / self.diag[j];
            }
            // column i of U
            for j in fi..i {
                let fj = self.first[j];
                let sj = self.start[j];
                let k0 = fi.max(fj);
                let mut s = self.upper[si + j - fi];
                for k in k0..j {
                    s -= self.lower[sj + k - fj] * self.upper[si + k - fi];
                }
                self.upper[si + j - fi] = s;
            }
            let mut d = self.diag[i];
            for k in fi..i {
                d -= self.lower[si + k - fi] * self.upper[si + k - fi];
            }
            if !(d.abs() > f64::MIN_POSITIVE) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: self.perm[i],
                    value: d,
                });
            }
            self.diag[i] = d;
        }
        Ok(())
    }

    pub fn envelope_entries(&self) -> usize {
        self.start[self.n]
    }

    /// Solves `A x = b` for one right-hand side.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y: Vec<f64> = (0..n).map(|i| b[self.perm[i]]).collect();
        // forward
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            let mut s = y[i];
            for k in fi..i {
                s -= self.lower[si + k - fi] * y[k];
            }
            y[i] = if self.symmetric { s / self.diag[i] } else { s };
        }
        // backward, column oriented
        for i in (0..n).rev() {
            let fi = self.first[i];
            let si = self.start[i];
            let xi = y[i] / self.diag[i];
            y[i] = xi;
            let col = if self.symmetric { &self.lower } else { &self.upper };
            for k in fi..i {
                y[k] -= col[si + k - fi] * xi;
            }
        }
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[self.perm[i]] = y[i];
        }
        x
    }
}
