//! Hierarchical CRF over the parent-child forest of all resolutions.
//!
//! The energy of a labeling `l` is
//!
//! ```text
//! E(l) = sum_v -ln max(p_v[l_v], 1e-12) + lambda * sum_{(v, parent v)} w_v [l_v != l_parent]
//! ```
//!
//! Only parent-child pairs are coupled, so the graph is a forest and the
//! exact minimizer follows from one bottom-up pass of min-sum messages and a
//! top-down backtrack per tree.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::pyramid::Pyramid;
use crate::robust::{tukey, TukeyParams};
use crate::samples::SampleSet;
use crate::solver::PosteriorMatrix;

/// Posteriors below this are clamped before taking logarithms.
pub const UNARY_FLOOR: f64 = 1e-12;

/// Tuning parameter shared by two adjacent resolutions.
pub fn consolidated_sigma(sigma_child: f64, sigma_parent: f64) -> f64 {
    sigma_child.min(sigma_parent)
}

/// Weight of every child-parent edge between `child` (resolution `r`) and
/// `parent` (resolution `r + 1`): `h_child * h_parent * exp(-tukey(|df|_1))`
/// on the resolution-independent features, with the smaller of the two sigmas.
pub fn hcrf_edge_weights(
    child: &SampleSet,
    parent: &SampleSet,
    parent_map: &[usize],
    sigma_child: f64,
    sigma_parent: f64,
) -> Result<Vec<f64>> {
    if child.indep_dim() != parent.indep_dim() {
        return Err(invalid(format!(
            "resolution-independent feature dimensions differ: {} vs {}",
            child.indep_dim(),
            parent.indep_dim()
        )));
    }
    if parent_map.len() != child.len() {
        return Err(invalid("parent map length differs from the child sample count"));
    }
    if let Some(&k) = parent_map.iter().find(|&&k| k >= parent.len()) {
        return Err(invalid(format!("parent index {k} out of range")));
    }
    let params = TukeyParams::with_sigma(consolidated_sigma(sigma_child, sigma_parent))?;
    let (hc, hp) = (child.reliability(), parent.reliability());
    let out = crate::par::map_range(child.len(), |j| {
        let k = parent_map[j];
        let l1: f64 = child
            .indep_feature(j)
            .iter()
            .zip(parent.indep_feature(k))
            .map(|(a, b)| (a - b).abs())
            .sum();
        tukey(l1, &params).map(|t| hc[j] * hp[k] * (-t).exp())
    });
    out.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyReport {
    pub unary: f64,
    pub pairwise: f64,
    pub total: f64,
    pub disagreements: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HcrfGraph {
    n_clas: usize,
    parent: Vec<Option<usize>>,
    /// Weight of the edge to the parent; zero for roots.
    weight: Vec<f64>,
    unary: Vec<f64>,
    children_offsets: Vec<usize>,
    children: Vec<usize>,
    roots: Vec<usize>,
    /// Start of each resolution in the global vertex order, when built from a pyramid.
    layer_offsets: Vec<usize>,
    clamped: usize,
}

impl HcrfGraph {
    /// Builds a forest from parent pointers, parent-edge weights and
    /// row-major `n x n_clas` posteriors.
    pub fn new(n_clas: usize, parent: Vec<Option<usize>>, weight: Vec<f64>, posteriors: &[f64]) -> Result<Self> {
        let n = parent.len();
        if n_clas == 0 || posteriors.len() != n * n_clas || weight.len() != n {
            return Err(invalid("HCRF inputs have inconsistent sizes"));
        }
        if weight.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("HCRF edge weights must be finite and nonnegative"));
        }
        if posteriors.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("posteriors must be finite and nonnegative"));
        }
        let mut count = vec![0usize; n + 1];
        for (v, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n {
                    return Err(invalid(format!("vertex {v} has out-of-range parent {p}")));
                }
                count[p + 1] += 1;
            }
        }
        for i in 0..n {
            count[i + 1] += count[i];
        }
        let children_offsets = count.clone();
        let mut fill = count;
        let mut children = vec![0; children_offsets[n]];
        for (v, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                children[fill[p]] = v;
                fill[p] += 1;
            }
        }
        let roots: Vec<usize> = (0..n).filter(|&v| parent[v].is_none()).collect();
        let clamped = posteriors.iter().filter(|&&p| p < UNARY_FLOOR).count();
        if clamped > 0 {
            log::info!("clamped {clamped} posteriors to {UNARY_FLOOR:e} before taking logs");
        }
        let unary = posteriors.iter().map(|p| -p.max(UNARY_FLOOR).ln()).collect();
        let g = Self {
            n_clas,
            parent,
            weight,
            unary,
            children_offsets,
            children,
            roots,
            layer_offsets: vec![0, n],
            clamped,
        };
        // every vertex must hang off a root, otherwise a cycle exists
        let reached: usize = g.roots.iter().map(|&r| g.subtree_order(r).len()).sum();
        if reached != n {
            return Err(Error::Structure(format!(
                "parent links contain a cycle: {} of {n} vertices are not below any root",
                n - reached
            )));
        }
        Ok(g)
    }

    /// Forest over all resolutions of `pyramid`. `weights[r]` holds the
    /// parent-edge weight of every sample at `r < n_lay`.
    pub fn from_pyramid(pyramid: &Pyramid, posteriors: &[PosteriorMatrix], weights: &[Vec<f64>]) -> Result<Self> {
        let layers = pyramid.n_lay + 1;
        if posteriors.len() != layers || weights.len() != pyramid.n_lay {
            return Err(invalid(format!(
                "need {layers} posterior matrices and {} weight vectors",
                pyramid.n_lay
            )));
        }
        let n_clas = posteriors[0].n_clas();
        let mut layer_offsets = vec![0];
        for (r, p) in posteriors.iter().enumerate() {
            if p.n_samples() != pyramid.len(r) || p.n_clas() != n_clas {
                return Err(invalid(format!("posteriors at resolution {r} have the wrong shape")));
            }
            layer_offsets.push(layer_offsets[r] + p.n_samples());
        }
        let mut parent = Vec::with_capacity(layer_offsets[layers]);
        let mut weight = Vec::with_capacity(layer_offsets[layers]);
        for r in 0..layers {
            if r < pyramid.n_lay {
                if weights[r].len() != pyramid.len(r) {
                    return Err(invalid(format!("edge weights at resolution {r} have the wrong length")));
                }
                for k in pyramid.parent_map(r)? {
                    parent.push(Some(layer_offsets[r + 1] + k));
                }
                weight.extend_from_slice(&weights[r]);
            } else {
                parent.extend(std::iter::repeat_n(None, pyramid.len(r)));
                weight.extend(std::iter::repeat_n(0.0, pyramid.len(r)));
            }
        }
        let values: Vec<f64> = posteriors.iter().flat_map(|p| p.values().iter().copied()).collect();
        let mut g = Self::new(n_clas, parent, weight, &values)?;
        g.layer_offsets = layer_offsets;
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn n_clas(&self) -> usize {
        self.n_clas
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub fn edge_weight(&self, v: usize) -> f64 {
        self.weight[v]
    }

    pub fn unary(&self, v: usize, c: usize) -> f64 {
        self.unary[v * self.n_clas + c]
    }

    /// Number of posteriors raised to the floor.
    pub fn clamped(&self) -> usize {
        self.clamped
    }

    pub fn layer_offsets(&self) -> &[usize] {
        &self.layer_offsets
    }

    fn children(&self, v: usize) -> &[usize] {
        &self.children[self.children_offsets[v]..self.children_offsets[v + 1]]
    }

    /// Vertices of the tree under `root`, parents before children.
    fn subtree_order(&self, root: usize) -> Vec<usize> {
        let mut order = vec![root];
        let mut i = 0;
        while i < order.len() {
            order.extend_from_slice(self.children(order[i]));
            i += 1;
        }
        order
    }

    pub fn energy(&self, labels: &[u16], lambda: f64) -> Result<EnergyReport> {
        if labels.len() != self.len() {
            return Err(invalid(format!("need {} labels, got {}", self.len(), labels.len())));
        }
        if let Some(&c) = labels.iter().find(|&&c| c as usize >= self.n_clas) {
            return Err(invalid(format!("label {c} outside the class set")));
        }
        let mut unary = 0.0;
        let mut pairwise = 0.0;
        let mut disagreements = 0;
        for v in 0..self.len() {
            unary += self.unary(v, labels[v] as usize);
            if let Some(p) = self.parent[v] {
                if labels[v] != labels[p] {
                    pairwise += self.weight[v];
                    disagreements += 1;
                }
            }
        }
        pairwise *= lambda;
        Ok(EnergyReport { unary, pairwise, total: unary + pairwise, disagreements })
    }

    /// Exact minimizer. Ties go to the smallest class index.
    pub fn minimize(&self, lambda: f64) -> Result<Vec<u16>> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(invalid(format!("lambda_hcrf must be finite and nonnegative, got {lambda}")));
        }
        let k = self.n_clas;
        let trees = crate::par::map_slice(&self.roots, |&root| {
            let order = self.subtree_order(root);
            // belief[i * k + c]: cost of the subtree of order[i] given label c
            let pos: std::collections::HashMap<usize, usize> = order.iter().enumerate().map(|(i, &v)| (v, i)).collect();
            let mut belief = vec![0.0; order.len() * k];
            for (i, &v) in order.iter().enumerate().rev() {
                for c in 0..k {
                    belief[i * k + c] += self.unary(v, c);
                }
                if let Some(p) = self.parent[v] {
                    let b = &belief[i * k..(i + 1) * k];
                    let floor = b.iter().copied().fold(f64::INFINITY, f64::min) + lambda * self.weight[v];
                    let msg: Vec<f64> = b.iter().map(|&x| x.min(floor)).collect();
                    let pi = pos[&p];
                    for c in 0..k {
                        belief[pi * k + c] += msg[c];
                    }
                }
            }
            let mut labels = vec![0u16; order.len()];
            for (i, &v) in order.iter().enumerate() {
                let b = &belief[i * k..(i + 1) * k];
                let lp = self.parent[v].map(|p| labels[pos[&p]] as usize);
                let cost = |c: usize| match lp {
                    Some(lp) if c != lp => b[c] + lambda * self.weight[v],
                    _ => b[c],
                };
                let mut best = 0;
                for c in 1..k {
                    if cost(c) < cost(best) {
                        best = c;
                    }
                }
                labels[i] = best as u16;
            }
            order.into_iter().zip(labels).collect::<Vec<_>>()
        });
        let mut out = vec![0u16; self.len()];
        for tree in trees {
            for (v, l) in tree {
                out[v] = l;
            }
        }
        Ok(out)
    }

    /// Splits a global labeling into per-resolution label vectors.
    pub fn split_layers(&self, labels: &[u16]) -> Vec<Vec<u16>> {
        self.layer_offsets.windows(2).map(|w| labels[w[0]..w[1]].to_vec()).collect()
    }
}
