//! Susceptibility-guided diffusion: modified directional weights, the explicit
//! Euler evolution and the guided steady-state solve.

use crate::constrained::{categorize, solve_constrained};
use crate::error::{invalid, Result};
use crate::robust::EdgeWeights;
use crate::samples::SampleSet;
use crate::solver::{assemble_with_known, solve, Coupling, IterationReport, PosteriorMatrix, SolverOptions};

/// Per-sample, per-class susceptibilities, row-major `n x n_clas`.
#[derive(Debug, Clone, PartialEq)]
pub struct SusceptibilityField {
    n_samples: usize,
    n_clas: usize,
    values: Vec<f64>,
}

impl SusceptibilityField {
    /// Wraps normalized rows: strictly positive, each summing to one.
    pub fn new(n_samples: usize, n_clas: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_samples * n_clas {
            return Err(invalid(format!(
                "susceptibilities need {} values, got {}",
                n_samples * n_clas,
                values.len()
            )));
        }
        for (j, row) in values.chunks(n_clas).enumerate() {
            if row.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                return Err(invalid(format!("susceptibility row {j} has a non-positive entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("susceptibility row {j} sums to {sum}")));
            }
        }
        Ok(Self {
            n_samples,
            n_clas,
            values,
        })
    }

    /// Normalizes positive raw scores row by row.
    pub fn from_scores(n_samples: usize, n_clas: usize, mut scores: Vec<f64>) -> Result<Self> {
        if scores.len() != n_samples * n_clas {
            return Err(invalid("susceptibility score matrix has the wrong size"));
        }
        for row in scores.chunks_mut(n_clas) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&s| !(s > 0.0)) || !sum.is_finite() {
                return Err(invalid("susceptibility scores must be positive and finite"));
            }
            row.iter_mut().for_each(|s| *s /= sum);
        }
        Self::new(n_samples, n_clas, scores)
    }

    pub fn uniform(n_samples: usize, n_clas: usize) -> Self {
        Self {
            n_samples,
            n_clas,
            values: vec![1.0 / n_clas as f64; n_samples * n_clas],
        }
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

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.n_clas..(j + 1) * self.n_clas]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.n_samples).map(|j| self.values[j * self.n_clas + c]).collect()
    }
}

/// Directional weights `w'_jk = (w_jk / sqrt(d_k)) (s_k / s_j)` of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ModifiedWeights {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
    degrees: Vec<f64>,
    /// `|sqrt(d_j) - d'_j|` per sample.
    gap: Vec<f64>,
    symmetric: bool,
}

impl ModifiedWeights {
    pub fn degree(&self, j: usize) -> f64 {
        self.degrees[j]
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn weight(&self, j: usize, k: usize) -> f64 {
        let (nb, w) = self.row(j);
        nb.iter().position(|&x| x == k).map_or(0.0, |p| w[p])
    }

    pub fn gap(&self) -> &[f64] {
        &self.gap
    }

    pub fn max_gap(&self) -> f64 {
        self.gap.iter().fold(0.0, |m, &g| m.max(g))
    }
}

impl Coupling for ModifiedWeights {
    fn n_samples(&self) -> usize {
        self.degrees.len()
    }

    fn row(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.offsets[j]..self.offsets[j + 1];
        (&self.neighbors[r.clone()], &self.weights[r])
    }

    fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    fn row_sum(&self, j: usize) -> f64 {
        self.degrees[j]
    }
}

/// Modified weights of one class from that class's susceptibility column.
/// Only ratios of `s` enter, so any positive rescaling of the column is harmless.
pub fn modified_weights_from_column(weights: &EdgeWeights, s: &[f64]) -> Result<ModifiedWeights> {
    let n = weights.len();
    if s.len() != n {
        return Err(invalid(format!("{} susceptibilities for {n} samples", s.len())));
    }
    if let Some(j) = s.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(invalid(format!("susceptibility of sample {j} is {}; ratios are undefined", s[j])));
    }
    let d = weights.degrees();
    let mut w_mod = Vec::with_capacity(weights.offsets()[n]);
    let mut neighbors = Vec::with_capacity(weights.offsets()[n]);
    for j in 0..n {
        for (&k, &w) in weights.neighbors(j).iter().zip(weights.row_weights(j)) {
            neighbors.push(k);
            w_mod.push(if w == 0.0 { 0.0 } else { w / d[k].sqrt() * (s[k] / s[j]) });
        }
    }
    let offsets = weights.offsets().to_vec();
    let degrees: Vec<f64> = (0..n).map(|j| w_mod[offsets[j]..offsets[j + 1]].iter().sum()).collect();
    let gap = (0..n).map(|j| (d[j].sqrt() - degrees[j]).abs()).collect();
    let mut out = ModifiedWeights {
        offsets,
        neighbors,
        weights: w_mod,
        degrees,
        gap,
        symmetric: false,
    };
    out.symmetric = (0..n).all(|j| {
        let (nb, w) = out.row(j);
        nb.iter().zip(w).all(|(&k, &wjk)| out.weight(k, j) == wjk)
    });
    Ok(out)
}

pub fn modified_weights(weights: &EdgeWeights, s: &SusceptibilityField, class: usize) -> Result<ModifiedWeights> {
    if class >= s.n_clas() {
        return Err(invalid(format!("class {class} out of range")));
    }
    if s.n_samples() != weights.len() {
        return Err(invalid("susceptibility field and weights disagree on the sample count"));
    }
    modified_weights_from_column(weights, &s.column(class))
}

/// One explicit Euler step of the locally averaged evolution for one class:
/// `dp_j = dt * sum_k w_jk / sqrt(d_j) * (s_k p_k / sqrt(d_k) - s_j p_j / sqrt(d_j))`.
/// Zero-degree samples are left unchanged; their indices are returned.
pub fn sir_step(p: &[f64], weights: &EdgeWeights, s: &[f64], dt: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    let n = weights.len();
    if p.len() != n || s.len() != n {
        return Err(invalid("probability and susceptibility vectors must match the graph"));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(invalid(format!("dt must be positive, got {dt}")));
    }
    let d = weights.degrees();
    let q: Vec<f64> = (0..n)
        .map(|j| if d[j] > 0.0 { s[j] * p[j] / d[j].sqrt() } else { 0.0 })
        .collect();
    let mut skipped = Vec::new();
    let next = (0..n)
        .map(|j| {
            if d[j] <= 0.0 {
                skipped.push(j);
                return p[j];
            }
            let flux: f64 = weights
                .neighbors(j)
                .iter()
                .zip(weights.row_weights(j))
                .map(|(&k, &w)| w * (q[k] - q[j]))
                .sum();
            p[j] + dt * flux / d[j].sqrt()
        })
        .collect();
    if !skipped.is_empty() {
        log::info!("{} zero-degree samples left out of the evolution", skipped.len());
    }
    Ok((next, skipped))
}

/// Iterates [`sir_step`] until the largest update is at most `tol`.
pub fn sir_iterate(
    p0: &[f64],
    weights: &EdgeWeights,
    s: &[f64],
    dt: f64,
    tol: f64,
    max_steps: usize,
) -> Result<(Vec<f64>, usize)> {
    let mut p = p0.to_vec();
    for step in 1..=max_steps {
        let (next, _) = sir_step(&p, weights, s, dt)?;
        let change = next.iter().zip(&p).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        p = next;
        if change <= tol {
            return Ok((p, step));
        }
    }
    Err(crate::Error::NoConvergence(Box::new(crate::error::ConvergenceFailure {
        iterations: max_steps,
        relative_residual: f64::NAN,
        column: 0,
        best_iterate: p,
    })))
}

#[derive(Debug, Clone)]
pub struct GuidedSolution {
    /// Per-class columns as solved.
    pub posteriors: PosteriorMatrix,
    /// Largest `|sqrt(d_j) - d'_j|` per class.
    pub max_gap: Vec<f64>,
    pub reports: Vec<IterationReport>,
}

/// Solves every class with its own modified weights. With `boundary` set, the
/// classes are solved in the constrained form instead.
pub fn solve_guided(
    weights: &EdgeWeights,
    s: &SusceptibilityField,
    samples: &SampleSet,
    lambda: f64,
    opts: &SolverOptions,
    boundary: Option<&[bool]>,
) -> Result<GuidedSolution> {
    let n = samples.len();
    let n_clas = samples.n_clas;
    if s.n_clas() != n_clas || s.n_samples() != n {
        return Err(invalid("susceptibility field does not match the sample set"));
    }
    if boundary.is_none() && !(lambda > 0.0) {
        return Err(invalid(format!("guided solve needs lambda > 0, got {lambda}")));
    }
    let per_class = crate::par::map_range(n_clas, |c| -> Result<(Vec<f64>, f64, IterationReport)> {
        let mw = modified_weights(weights, s, c)?;
        let prior = samples.prior_column(c);
        match boundary {
            Some(b) => {
                let cats = categorize(samples, b, c)?;
                let sol = solve_constrained(&mw, &cats, &prior, lambda, opts)?;
                Ok((sol.values, mw.max_gap(), sol.report))
            }
            None => {
                let system = assemble_with_known(&mw, &prior, 1, lambda, &vec![None; n])?;
                let (p, report) = solve(&system, opts)?;
                Ok((p.into_values(), mw.max_gap(), report))
            }
        }
    });
    let mut values = vec![0.0; n * n_clas];
    let mut max_gap = Vec::with_capacity(n_clas);
    let mut reports = Vec::with_capacity(n_clas);
    for (c, r) in per_class.into_iter().enumerate() {
        let (col, gap, report) = r?;
        for j in 0..n {
            values[j * n_clas + c] = col[j];
        }
        log::debug!("class {c}: steady-state consistency gap {gap:e}");
        max_gap.push(gap);
        reports.push(report);
    }
    Ok(GuidedSolution {
        posteriors: PosteriorMatrix::new(n, n_clas, values)?,
        max_gap,
        reports,
    })
}
