//! Robust edge weights for the spatial and prior subgraphs.
//!
//! Spatial edges use Tukey's biweight of the l1 feature residual, scaled by the
//! reliabilities of both endpoints:
//!
//! ```text
//! w_jk = h_j * h_k * exp(-tukey(|f_j - f_k|_1))
//! ```
//!
//! with the tuning parameter `sigma` estimated per resolution from the median
//! absolute deviation of the neighbour-difference matrices. Prior edges are
//! `lambda * a_jc`.

use std::io::Write;

use crate::error::{invalid, Result};
use crate::pyramid::NeighborhoodTopology;
use crate::samples::SampleSet;

/// Consistency constant between the MAD and the standard deviation of a normal.
pub const MAD_NORMALIZATION: f64 = 1.4826;

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TukeyParams {
    pub sigma_out: f64,
    pub sigma_floor: f64,
}

impl TukeyParams {
    /// `sigma` below the floor is raised to it.
    pub fn new(sigma: f64, floor: f64) -> Result<Self> {
        if !(floor > 0.0) || !floor.is_finite() {
            return Err(invalid(format!("sigma floor must be positive, got {floor}")));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(invalid(format!("sigma must be finite and nonnegative, got {sigma}")));
        }
        Ok(Self {
            sigma_out: sigma.max(floor),
            sigma_floor: floor,
        })
    }

    pub fn with_sigma(sigma: f64) -> Result<Self> {
        Self::new(sigma, DEFAULT_SIGMA_FLOOR)
    }

    /// Saturation level `sigma^2 / 6`.
    pub fn ceiling(&self) -> f64 {
        self.sigma_out * self.sigma_out / 6.0
    }
}

/// Tukey's biweight loss of a nonnegative residual.
pub fn tukey(rho: f64, params: &TukeyParams) -> Result<f64> {
    if !(rho >= 0.0) {
        return Err(invalid(format!("tukey residual must be nonnegative, got {rho}")));
    }
    Ok(tukey_unchecked(rho, params.sigma_out))
}

pub(crate) fn tukey_unchecked(rho: f64, sigma: f64) -> f64 {
    let ceiling = sigma * sigma / 6.0;
    if rho.abs() >= sigma {
        return ceiling;
    }
    let u = rho / sigma;
    let inner = 1.0 - u * u;
    ceiling * (1.0 - inner * inner * inner)
}

/// Derivative of [`tukey`]; defined on the whole real line.
pub fn tukey_deriv(rho: f64, params: &TukeyParams) -> f64 {
    let sigma = params.sigma_out;
    if rho.abs() > sigma {
        return 0.0;
    }
    let u = rho / sigma;
    let inner = 1.0 - u * u;
    rho * inner * inner
}

/// Median with the midpoint rule for even counts. Sorts `v` in place.
pub fn median_in_place(v: &mut [f64]) -> f64 {
    assert!(!v.is_empty(), "median of an empty slice");
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Estimates the Tukey tuning parameter of one resolution.
///
/// Builds the neighbour-difference matrix of each sample (one column per
/// neighbour slot), takes the elementwise median matrix over all samples, and
/// scales the median l1 deviation from it:
/// `sigma / sqrt(5) = 1.4826 * median_j |F_j - median_l F_l|_1`.
/// Boundary samples contribute only their in-bounds columns.
pub fn mad_sigma(samples: &SampleSet, topology: &NeighborhoodTopology, floor: f64) -> Result<TukeyParams> {
    let n = samples.len();
    if topology.len() != n {
        return Err(invalid(format!(
            "topology has {} samples, sample set has {n}",
            topology.len()
        )));
    }
    if n < 2 || topology.edge_count() == 0 {
        return Err(invalid("MAD sigma needs at least two samples and one edge"));
    }
    let dim = samples.feat_dim();
    let n_slots = topology.n_slots();

    // Per (slot, dim) collection of differences.
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n_slots * dim];
    for j in 0..n {
        let fj = samples.feature(j);
        for (&k, &slot) in topology.neighbors(j).iter().zip(topology.slots(j)) {
            let fk = samples.feature(k);
            for d in 0..dim {
                columns[slot as usize * dim + d].push(fj[d] - fk[d]);
            }
        }
    }
    let medians: Vec<f64> = crate::par::map_range(columns.len(), |i| {
        let mut col = columns[i].clone();
        if col.is_empty() {
            0.0
        } else {
            median_in_place(&mut col)
        }
    });

    let mut deviations: Vec<f64> = crate::par::map_range(n, |j| {
        if topology.degree(j) == 0 {
            return None;
        }
        let fj = samples.feature(j);
        let mut dev = 0.0;
        for (&k, &slot) in topology.neighbors(j).iter().zip(topology.slots(j)) {
            let fk = samples.feature(k);
            for d in 0..dim {
                dev += ((fj[d] - fk[d]) - medians[slot as usize * dim + d]).abs();
            }
        }
        Some(dev)
    })
    .into_iter()
    .flatten()
    .collect();
    let mad = median_in_place(&mut deviations);
    TukeyParams::new(5f64.sqrt() * MAD_NORMALIZATION * mad, floor)
}

/// Reliability `exp(-mean entropy)` from the class histograms of `n_weak` sources.
///
/// Entropies are in bits.
pub fn reliability_from_entropy(histograms: &[&[u64]]) -> Result<f64> {
    if histograms.is_empty() {
        return Err(invalid("reliability needs at least one histogram"));
    }
    let mut total_entropy = 0.0;
    for (w, hist) in histograms.iter().enumerate() {
        let total: u64 = hist.iter().sum();
        if total == 0 {
            return Err(invalid(format!("histogram {w} is empty")));
        }
        let total = total as f64;
        let h: f64 = hist
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.log2()
            })
            .sum();
        total_entropy += h;
    }
    Ok((-total_entropy / histograms.len() as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightMode {
    /// `h_j h_k exp(-tukey(|df|_1))`.
    Tukey(TukeyParams),
    /// `exp(-|df|_2^2)`, unit bandwidth.
    Plain,
}

/// Symmetric spatial edge weights aligned with a topology's CSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
    degrees: Vec<f64>,
}

impl EdgeWeights {
    fn from_rows(offsets: Vec<usize>, neighbors: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("edge weights must be finite and nonnegative"));
        }
        let n = offsets.len() - 1;
        let degrees = (0..n)
            .map(|j| weights[offsets[j]..offsets[j + 1]].iter().sum())
            .collect();
        Ok(Self {
            offsets,
            neighbors,
            weights,
            degrees,
        })
    }

    /// Builds weights from an undirected weighted edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(j, k, w) in edges {
            if j >= n || k >= n || j == k {
                return Err(invalid(format!("bad edge ({j},{k})")));
            }
            rows[j].push((k, w));
            rows[k].push((j, w));
        }
        let mut offsets = vec![0];
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        for row in &mut rows {
            row.sort_by_key(|e| e.0);
            for pair in row.windows(2) {
                if pair[0].0 == pair[1].0 {
                    return Err(invalid(format!("duplicate edge to {}", pair[0].0)));
                }
            }
            for &(k, w) in row.iter() {
                neighbors.push(k);
                weights.push(w);
            }
            offsets.push(neighbors.len());
        }
        Self::from_rows(offsets, neighbors, weights)
    }

    pub fn len(&self) -> usize {
        self.degrees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degrees.is_empty()
    }

    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.neighbors[self.offsets[j]..self.offsets[j + 1]]
    }

    pub fn row_weights(&self, j: usize) -> &[f64] {
        &self.weights[self.offsets[j]..self.offsets[j + 1]]
    }

    pub fn degree(&self, j: usize) -> f64 {
        self.degrees[j]
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Weight of edge `(j, k)`, zero when they are not neighbours.
    pub fn weight(&self, j: usize, k: usize) -> f64 {
        let nb = self.neighbors(j);
        match nb.binary_search(&k) {
            Ok(pos) => self.row_weights(j)[pos],
            Err(_) => nb
                .iter()
                .position(|&x| x == k)
                .map_or(0.0, |pos| self.row_weights(j)[pos]),
        }
    }

    /// Undirected edges `(j, k, w)` with `j < k`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.len()).flat_map(move |j| {
            self.neighbors(j)
                .iter()
                .zip(self.row_weights(j))
                .filter(move |(&k, _)| j < k)
                .map(move |(&k, &w)| (j, k, w))
        })
    }

    /// Writes the `j k w` edge list, one undirected edge per line.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> Result<()> {
        for (j, k, w) in self.edges() {
            writeln!(out, "{j} {k} {w:e}")?;
        }
        Ok(())
    }
}

/// Spatial edge weights over a topology.
pub fn spatial_edge_weights(
    samples: &SampleSet,
    topology: &NeighborhoodTopology,
    mode: WeightMode,
) -> Result<EdgeWeights> {
    let n = samples.len();
    if topology.len() != n {
        return Err(invalid(format!(
            "topology has {} samples, sample set has {n}",
            topology.len()
        )));
    }
    let h = samples.reliability();
    let rows: Vec<Vec<f64>> = crate::par::map_range(n, |j| {
        let fj = samples.feature(j);
        topology
            .neighbors(j)
            .iter()
            .map(|&k| {
                let fk = samples.feature(k);
                match mode {
                    WeightMode::Tukey(p) => {
                        let l1: f64 = fj.iter().zip(fk).map(|(a, b)| (a - b).abs()).sum();
                        h[j] * h[k] * (-tukey_unchecked(l1, p.sigma_out)).exp()
                    }
                    WeightMode::Plain => {
                        let l2sq: f64 = fj.iter().zip(fk).map(|(a, b)| (a - b) * (a - b)).sum();
                        (-l2sq).exp()
                    }
                }
            })
            .collect()
    });
    let weights = rows.into_iter().flatten().collect();
    EdgeWeights::from_rows(
        topology.offsets().to_vec(),
        (0..n).flat_map(|j| topology.neighbors(j).iter().copied()).collect(),
        weights,
    )
}

/// Prior-edge weights `lambda * a_jc`, row-major `n x n_clas`.
pub fn prior_edge_weights(samples: &SampleSet, lambda_prior: f64) -> Result<Vec<f64>> {
    if !(lambda_prior > 0.0) || !lambda_prior.is_finite() {
        return Err(invalid(format!("lambda_prior must be positive, got {lambda_prior}")));
    }
    Ok(samples.priors().iter().map(|a| lambda_prior * a).collect())
}

/// The discrete hyperparameter grid `{0.1, 0.2, ..., 1.0}`.
pub fn lambda_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}
