//! Assembly and solution of the random-walker linear systems.
//!
//! For coupling weights `w` with row sums `d` and prior strength `lambda`,
//! every unknown sample `j` contributes the row
//!
//! ```text
//! (d_j + lambda) p_j - sum_{k unknown} w_jk p_k = lambda a_j + sum_{k known} w_jk p_k
//! ```
//!
//! with one right-hand side per class.

pub mod direct;
pub mod krylov;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::robust::EdgeWeights;
use crate::sparse::CsrMatrix;

/// Probability mass assigned to the seed class of a seeded sample.
pub const SEED_CONFIDENCE_EPSILON: f64 = 1e-4;
/// Default envelope budget (entries) for the direct solver under `Auto`.
pub const DEFAULT_DIRECT_BUDGET: usize = 2_000_000;
/// Systems up to this size fall back to a direct LU after a BiCGSTAB breakdown.
pub const BREAKDOWN_FALLBACK_LIMIT: usize = 20_000;

/// Row access to a (possibly nonsymmetric) nonnegative coupling matrix.
pub trait Coupling: Sync {
    fn n_samples(&self) -> usize;
    fn row(&self, j: usize) -> (&[usize], &[f64]);
    /// True when `w_jk == w_kj` for every stored entry.
    fn is_symmetric(&self) -> bool;

    fn row_sum(&self, j: usize) -> f64 {
        self.row(j).1.iter().sum()
    }
}

impl Coupling for EdgeWeights {
    fn n_samples(&self) -> usize {
        self.len()
    }

    fn row(&self, j: usize) -> (&[usize], &[f64]) {
        (self.neighbors(j), self.row_weights(j))
    }

    fn is_symmetric(&self) -> bool {
        true
    }

    fn row_sum(&self, j: usize) -> f64 {
        self.degree(j)
    }
}

/// Posterior probabilities, row-major `n_samples x n_clas`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    n_samples: usize,
    n_clas: usize,
    values: Vec<f64>,
}

impl PosteriorMatrix {
    pub fn new(n_samples: usize, n_clas: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_samples * n_clas {
            return Err(invalid(format!(
                "posterior matrix needs {} values, got {}",
                n_samples * n_clas,
                values.len()
            )));
        }
        Ok(Self {
            n_samples,
            n_clas,
            values,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_clas(&self) -> usize {
        self.n_clas
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.n_clas..(j + 1) * self.n_clas]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.n_samples).map(|j| self.values[j * self.n_clas + c]).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_samples).map(|j| self.row(j).iter().sum()).collect()
    }

    /// Class with the largest posterior; ties go to the smallest index.
    pub fn argmax(&self, j: usize) -> u16 {
        let row = self.row(j);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = c;
            }
        }
        best as u16
    }

    pub fn labels(&self) -> Vec<u16> {
        (0..self.n_samples).map(|j| self.argmax(j)).collect()
    }

    /// Rows rescaled to sum to one. Rows that sum to zero become uniform.
    pub fn normalized(&self) -> Self {
        let mut values = self.values.clone();
        let k = self.n_clas;
        for row in values.chunks_mut(k) {
            let clipped: Vec<f64> = row.iter().map(|v| v.max(0.0)).collect();
            let s: f64 = clipped.iter().sum();
            if s > 0.0 && s.is_finite() {
                for (v, c) in row.iter_mut().zip(clipped) {
                    *v = c / s;
                }
            } else {
                row.fill(1.0 / k as f64);
            }
        }
        Self {
            n_samples: self.n_samples,
            n_clas: k,
            values,
        }
    }
}

/// The reduced system over unknown samples.
#[derive(Debug, Clone)]
pub struct SparseSystem {
    matrix: CsrMatrix,
    /// One right-hand side per column.
    rhs: Vec<Vec<f64>>,
    unknowns: Vec<usize>,
    /// Full `n_samples x n_rhs` values with known rows filled in.
    template: Vec<f64>,
    /// `lambda + sum_{k known} w_jk` per unknown row.
    anchors: Vec<f64>,
    n_samples: usize,
    symmetric: bool,
}

impl SparseSystem {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn rhs(&self, c: usize) -> &[f64] {
        &self.rhs[c]
    }

    pub fn n_rhs(&self) -> usize {
        self.rhs.len()
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Sample indices of the unknowns, in system order.
    pub fn unknowns(&self) -> &[usize] {
        &self.unknowns
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Errors with [`Error::Singular`] if some connected group of unknowns
    /// is coupled to neither a prior nor a known sample.
    pub fn check_anchored(&self) -> Result<()> {
        let n = self.unknowns.len();
        let mut seen = vec![false; n];
        let mut stack = Vec::new();
        for root in 0..n {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            stack.push(root);
            let mut size = 0;
            let mut anchored = false;
            while let Some(i) = stack.pop() {
                size += 1;
                anchored |= self.anchors[i] > 0.0;
                let (cols, vals) = self.matrix.row(i);
                for (&c, &v) in cols.iter().zip(vals) {
                    if c != i && v != 0.0 && !seen[c] {
                        seen[c] = true;
                        stack.push(c);
                    }
                }
            }
            if !anchored {
                return Err(Error::Singular {
                    root: self.unknowns[root],
                    size,
                });
            }
        }
        Ok(())
    }

    fn scatter(&self, columns: &[Vec<f64>]) -> PosteriorMatrix {
        let k = self.n_rhs();
        let mut values = self.template.clone();
        for (i, &u) in self.unknowns.iter().enumerate() {
            for (c, col) in columns.iter().enumerate() {
                values[u * k + c] = col[i];
            }
        }
        PosteriorMatrix {
            n_samples: self.n_samples,
            n_clas: k,
            values,
        }
    }
}

/// Posterior row of a seeded sample: `1 - eps` on the seed, the rest spread evenly.
pub fn seed_posterior(class: u16, n_clas: usize) -> Vec<f64> {
    let off = SEED_CONFIDENCE_EPSILON / (n_clas as f64 - 1.0);
    (0..n_clas)
        .map(|c| {
            if c == class as usize {
                1.0 - SEED_CONFIDENCE_EPSILON
            } else {
                off
            }
        })
        .collect()
}

/// Assembles the prior-coupled system, optionally with seeded samples.
pub fn assemble<C: Coupling + ?Sized>(
    weights: &C,
    priors: &[f64],
    n_clas: usize,
    lambda: f64,
    seeds: Option<&[Option<u16>]>,
) -> Result<SparseSystem> {
    if n_clas < 2 {
        return Err(invalid("need at least two classes"));
    }
    let n = weights.n_samples();
    let known: Vec<Option<Vec<f64>>> = match seeds {
        None => vec![None; n],
        Some(s) => {
            if s.len() != n {
                return Err(invalid(format!("{} seed entries for {n} samples", s.len())));
            }
            s.iter()
                .map(|seed| match seed {
                    Some(c) if (*c as usize) >= n_clas => {
                        Err(invalid(format!("seed class {c} out of range for {n_clas} classes")))
                    }
                    Some(c) => Ok(Some(seed_posterior(*c, n_clas))),
                    None => Ok(None),
                })
                .collect::<Result<_>>()?
        }
    };
    assemble_with_known(weights, priors, n_clas, lambda, &known)
}

/// General assembly: `known[j]` holds the fixed `n_rhs` values of sample `j`.
pub fn assemble_with_known<C: Coupling + ?Sized>(
    weights: &C,
    priors: &[f64],
    n_rhs: usize,
    lambda: f64,
    known: &[Option<Vec<f64>>],
) -> Result<SparseSystem> {
    let n = weights.n_samples();
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(invalid(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    if n_rhs == 0 {
        return Err(invalid("need at least one right-hand side"));
    }
    if priors.len() != n * n_rhs {
        return Err(invalid(format!(
            "priors have {} entries, expected {n} x {n_rhs}",
            priors.len()
        )));
    }
    if known.len() != n {
        return Err(invalid(format!("{} known entries for {n} samples", known.len())));
    }
    let mut template = vec![0.0; n * n_rhs];
    let mut index = vec![usize::MAX; n];
    let mut unknowns = Vec::new();
    for (j, kv) in known.iter().enumerate() {
        match kv {
            Some(v) => {
                if v.len() != n_rhs {
                    return Err(invalid(format!("known row {j} has {} values, expected {n_rhs}", v.len())));
                }
                template[j * n_rhs..(j + 1) * n_rhs].copy_from_slice(v);
            }
            None => {
                index[j] = unknowns.len();
                unknowns.push(j);
            }
        }
    }
    let m = unknowns.len();
    let mut rows = Vec::with_capacity(m);
    let mut rhs = vec![vec![0.0; m]; n_rhs];
    let mut anchors = vec![lambda; m];
    for (i, &j) in unknowns.iter().enumerate() {
        let (nb, w) = weights.row(j);
        let mut row = Vec::with_capacity(nb.len() + 1);
        row.push((i, weights.row_sum(j) + lambda));
        for (c, col) in rhs.iter_mut().enumerate() {
            col[i] = lambda * priors[j * n_rhs + c];
        }
        for (&k, &wk) in nb.iter().zip(w) {
            if index[k] != usize::MAX {
                row.push((index[k], -wk));
            } else {
                anchors[i] += wk;
                for (c, col) in rhs.iter_mut().enumerate() {
                    col[i] += wk * template[k * n_rhs + c];
                }
            }
        }
        rows.push(row);
    }
    let matrix = CsrMatrix::from_rows(m, rows)?;
    let symmetric = weights.is_symmetric();
    Ok(SparseSystem {
        matrix,
        rhs,
        unknowns,
        template,
        anchors,
        n_samples: n,
        symmetric,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolverChoice {
    /// Direct when the envelope fits the budget, iterative otherwise.
    #[default]
    Auto,
    Direct,
    /// Conjugate gradients for symmetric systems, BiCGSTAB otherwise.
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub method: SolverChoice,
    pub tol: f64,
    /// Defaults to four times the number of unknowns.
    pub max_iter: Option<usize>,
    pub direct_budget: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: SolverChoice::Auto,
            tol: 1e-8,
            max_iter: None,
            direct_budget: DEFAULT_DIRECT_BUDGET,
        }
    }
}

/// Per-column iteration counts and relative residuals; empty for direct solves.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IterationReport {
    pub method: String,
    pub iterations: Vec<usize>,
    pub relative_residuals: Vec<f64>,
}

fn max_iter_for(system: &SparseSystem, max_iter: Option<usize>) -> usize {
    max_iter.unwrap_or(4 * system.unknowns.len().max(1))
}

/// Direct solve; envelope Cholesky for symmetric systems and envelope LU otherwise.
pub fn solve_direct(system: &SparseSystem) -> Result<PosteriorMatrix> {
    solve_direct_budget(system, usize::MAX)
}

fn solve_direct_budget(system: &SparseSystem, budget: usize) -> Result<PosteriorMatrix> {
    system.check_anchored()?;
    if system.unknowns.is_empty() {
        return Ok(system.scatter(&vec![Vec::new(); system.n_rhs()]));
    }
    let factor = direct::EnvelopeFactor::new(&system.matrix, system.symmetric, budget)?;
    let columns = crate::par::map_range(system.n_rhs(), |c| factor.solve(&system.rhs[c]));
    Ok(system.scatter(&columns))
}

/// Jacobi-preconditioned conjugate gradients, one independent solve per class.
pub fn solve_pcg(
    system: &SparseSystem,
    tol: f64,
    max_iter: Option<usize>,
) -> Result<(PosteriorMatrix, IterationReport)> {
    if !system.symmetric {
        return Err(invalid("conjugate gradients need a symmetric system"));
    }
    system.check_anchored()?;
    let max_iter = max_iter_for(system, max_iter);
    let results = crate::par::map_range(system.n_rhs(), |c| {
        krylov::pcg(&system.matrix, &system.rhs[c], tol, max_iter, c)
    });
    collect_columns(system, results, "pcg")
}

/// BiCGSTAB for nonsymmetric systems. After a breakdown, systems with at
/// most [`BREAKDOWN_FALLBACK_LIMIT`] unknowns are re-solved directly.
pub fn solve_nonsymmetric(
    system: &SparseSystem,
    tol: f64,
    max_iter: Option<usize>,
) -> Result<(PosteriorMatrix, IterationReport)> {
    system.check_anchored()?;
    let max_iter = max_iter_for(system, max_iter);
    let results = crate::par::map_range(system.n_rhs(), |c| {
        krylov::bicgstab(&system.matrix, &system.rhs[c], tol, max_iter, c)
    });
    match collect_columns(system, results, "bicgstab") {
        Err(Error::Breakdown(msg)) if system.unknowns.len() <= BREAKDOWN_FALLBACK_LIMIT => {
            log::warn!("bicgstab breakdown ({msg}); falling back to direct LU");
            let p = solve_direct(system)?;
            Ok((
                p,
                IterationReport {
                    method: "direct-after-breakdown".into(),
                    ..Default::default()
                },
            ))
        }
        other => other,
    }
}

fn collect_columns(
    system: &SparseSystem,
    results: Vec<Result<krylov::ColumnSolve>>,
    method: &str,
) -> Result<(PosteriorMatrix, IterationReport)> {
    let mut columns = Vec::with_capacity(results.len());
    let mut report = IterationReport {
        method: method.into(),
        ..Default::default()
    };
    for r in results {
        let s = r?;
        report.iterations.push(s.iterations);
        report.relative_residuals.push(s.relative_residual);
        columns.push(s.x);
    }
    Ok((system.scatter(&columns), report))
}

/// Dispatches on [`SolverOptions::method`].
pub fn solve(system: &SparseSystem, opts: &SolverOptions) -> Result<(PosteriorMatrix, IterationReport)> {
    let direct_report = || IterationReport {
        method: if system.symmetric { "cholesky" } else { "lu" }.into(),
        ..Default::default()
    };
    let iterative = || {
        if system.symmetric {
            solve_pcg(system, opts.tol, opts.max_iter)
        } else {
            solve_nonsymmetric(system, opts.tol, opts.max_iter)
        }
    };
    match opts.method {
        SolverChoice::Direct => Ok((solve_direct(system)?, direct_report())),
        SolverChoice::Iterative => iterative(),
        SolverChoice::Auto => {
            system.check_anchored()?;
            let perm = direct::reverse_cuthill_mckee(&system.matrix);
            if direct::envelope_size(&system.matrix, &perm) <= opts.direct_budget {
                Ok((solve_direct_budget(system, opts.direct_budget)?, direct_report()))
            } else {
                iterative()
            }
        }
    }
}

/// Largest deviation from the fixed-point form
/// `p_j = (lambda a_j + sum_k w_jk p_k) / (d_j + lambda)` over the rows
/// selected by `include`.
pub fn stationarity_residual<C: Coupling + ?Sized>(
    weights: &C,
    priors: &[f64],
    lambda: f64,
    posteriors: &PosteriorMatrix,
    include: impl Fn(usize) -> bool,
) -> f64 {
    let k = posteriors.n_clas();
    let mut worst: f64 = 0.0;
    for j in 0..weights.n_samples() {
        if !include(j) {
            continue;
        }
        let (nb, w) = weights.row(j);
        let denom = weights.row_sum(j) + lambda;
        for c in 0..k {
            let mut s = lambda * priors[j * k + c];
            for (&n, &wn) in nb.iter().zip(w) {
                s += wn * posteriors.values[n * k + c];
            }
            let fixed = if denom > 0.0 { s / denom } else { posteriors.values[j * k + c] };
            worst = worst.max((posteriors.values[j * k + c] - fixed).abs());
        }
    }
    worst
}

/// Dirichlet energy of one column:
/// `1/4 sum_j sum_k w_jk (p_j - p_k)^2 + lambda/2 sum_j (p_j - a_j)^2`.
/// For symmetric weights the first term counts each edge once.
pub fn dirichlet_energy<C: Coupling + ?Sized>(weights: &C, prior_col: &[f64], lambda: f64, p: &[f64]) -> f64 {
    let mut e = 0.0;
    for j in 0..weights.n_samples() {
        let (nb, w) = weights.row(j);
        for (&k, &wk) in nb.iter().zip(w) {
            let d = p[j] - p[k];
            e += 0.25 * wk * d * d;
        }
        let d = p[j] - prior_col[j];
        e += 0.5 * lambda * d * d;
    }
    e
}
