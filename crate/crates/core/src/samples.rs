//! Per-resolution sample data: features, priors, reliabilities, labels.

use crate::error::{invalid, Result};
use crate::pyramid::Pyramid;
use crate::robust::reliability_from_entropy;
use crate::volume::Volume;

/// Smallest prior probability kept after aggregation; priors live in (0, 1).
pub const PRIOR_FLOOR: f64 = 1e-6;

/// Samples of one resolution. Matrices are stored row-major, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub resolution: usize,
    pub n_clas: usize,
    feat_dim: usize,
    features: Vec<f64>,
    indep_dim: usize,
    indep_features: Vec<f64>,
    priors: Vec<f64>,
    reliability: Vec<f64>,
    labels: Option<Vec<u16>>,
}

impl SampleSet {
    /// Validates and wraps per-sample data.
    ///
    /// `features` is `n x feat_dim`, `indep_features` is `n x indep_dim`,
    /// `priors` is `n x n_clas`. Missing reliabilities default to 1.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        resolution: usize,
        n_clas: usize,
        feat_dim: usize,
        features: Vec<f64>,
        indep_dim: usize,
        indep_features: Vec<f64>,
        priors: Vec<f64>,
        reliability: Option<Vec<f64>>,
        labels: Option<Vec<u16>>,
    ) -> Result<Self> {
        if n_clas < 2 {
            return Err(invalid("at least two classes are required"));
        }
        if !priors.len().is_multiple_of(n_clas) {
            return Err(invalid("prior matrix is not n x n_clas"));
        }
        let n = priors.len() / n_clas;
        if features.len() != n * feat_dim {
            return Err(invalid(format!(
                "feature matrix has {} entries, expected {n} x {feat_dim}",
                features.len()
            )));
        }
        if indep_features.len() != n * indep_dim {
            return Err(invalid(format!(
                "resolution-independent feature matrix has {} entries, expected {n} x {indep_dim}",
                indep_features.len()
            )));
        }
        if features.iter().chain(&indep_features).any(|v| !v.is_finite()) {
            return Err(invalid("non-finite feature value"));
        }
        for (j, row) in priors.chunks_exact(n_clas).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("prior row {j} sums to {sum}")));
            }
            if row.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
                return Err(invalid(format!("prior row {j} has an entry outside (0,1)")));
            }
        }
        let reliability = reliability.unwrap_or_else(|| vec![1.0; n]);
        if reliability.len() != n {
            return Err(invalid("reliability vector length mismatch"));
        }
        if let Some(j) = reliability.iter().position(|&h| !(h > 0.0 && h <= 1.0)) {
            return Err(invalid(format!("reliability of sample {j} outside (0,1]")));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(invalid("label vector length mismatch"));
            }
            if let Some(&bad) = l.iter().find(|&&c| c as usize >= n_clas) {
                return Err(invalid(format!("label {bad} outside class set")));
            }
        }
        Ok(Self {
            resolution,
            n_clas,
            feat_dim,
            features,
            indep_dim,
            indep_features,
            priors,
            reliability,
            labels,
        })
    }

    /// Minimal set with identical resolution-specific and -independent features.
    pub fn from_parts(
        n_clas: usize,
        feat_dim: usize,
        features: Vec<f64>,
        priors: Vec<f64>,
        reliability: Option<Vec<f64>>,
    ) -> Result<Self> {
        Self::new(
            0,
            n_clas,
            feat_dim,
            features.clone(),
            feat_dim,
            features,
            priors,
            reliability,
            None,
        )
    }

    pub fn len(&self) -> usize {
        self.reliability.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn indep_dim(&self) -> usize {
        self.indep_dim
    }

    pub fn feature(&self, j: usize) -> &[f64] {
        &self.features[j * self.feat_dim..(j + 1) * self.feat_dim]
    }

    pub fn indep_feature(&self, j: usize) -> &[f64] {
        &self.indep_features[j * self.indep_dim..(j + 1) * self.indep_dim]
    }

    pub fn prior(&self, j: usize) -> &[f64] {
        &self.priors[j * self.n_clas..(j + 1) * self.n_clas]
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn indep_features(&self) -> &[f64] {
        &self.indep_features
    }

    /// Column `c` of the prior matrix.
    pub fn prior_column(&self, c: usize) -> Vec<f64> {
        self.priors.chunks_exact(self.n_clas).map(|r| r[c]).collect()
    }

    pub fn reliability(&self) -> &[f64] {
        &self.reliability
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    pub fn with_labels(mut self, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(invalid("label vector length mismatch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.n_clas) {
            return Err(invalid(format!("label {bad} out of range for {} classes", self.n_clas)));
        }
        self.labels = Some(labels);
        Ok(self)
    }
}

/// Clamps a probability row into (0,1) and renormalises it to sum to one.
pub fn normalize_prior_row(row: &mut [f64]) {
    let k = row.len() as f64;
    let mut sum = 0.0;
    for v in row.iter_mut() {
        if !v.is_finite() || *v < PRIOR_FLOOR {
            *v = PRIOR_FLOOR;
        }
        sum += *v;
    }
    if sum <= 0.0 {
        row.fill(1.0 / k);
        return;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Aggregates voxel inputs into the samples of layer `r`.
///
/// * resolution-independent features: per-channel patch mean intensity;
/// * resolution-specific features: the same means standardised over the layer;
/// * priors: patch mean of voxel priors, clamped into (0,1) and renormalised;
/// * reliability: `exp(-H)` of the class histogram of voxel prior argmaxes in the patch.
///
/// `volume` and `voxel_priors` must already be padded to the pyramid's finest dims.
pub fn aggregate(
    pyramid: &Pyramid,
    r: usize,
    volume: &Volume<f32>,
    voxel_priors: &Volume<f32>,
) -> Result<SampleSet> {
    let layer = pyramid.layer(r)?.clone();
    if volume.dims != pyramid.finest_dims || voxel_priors.dims != pyramid.finest_dims {
        return Err(invalid(format!(
            "inputs must be padded to {:?} (got {:?} and {:?})",
            pyramid.finest_dims, volume.dims, voxel_priors.dims
        )));
    }
    let n_clas = voxel_priors.channels;
    let channels = volume.channels;
    let n = layer.len();
    struct Agg {
        means: Vec<f64>,
        prior: Vec<f64>,
        hist: Vec<u64>,
    }
    let aggs: Vec<Agg> = crate::par::map_range(n, |j| {
        let (lo, hi) = layer.patch_bounds(j);
        let mut means = vec![0.0; channels];
        let mut prior = vec![0.0; n_clas];
        let mut hist = vec![0u64; n_clas];
        let mut count = 0.0;
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let v = volume.index([x, y, z]);
                    for (c, m) in means.iter_mut().enumerate() {
                        *m += f64::from(volume.channel(c)[v]);
                    }
                    let mut best = 0;
                    let mut best_p = f64::NEG_INFINITY;
                    for (c, p) in prior.iter_mut().enumerate() {
                        let a = f64::from(voxel_priors.channel(c)[v]);
                        *p += a;
                        if a > best_p {
                            best_p = a;
                            best = c;
                        }
                    }
                    hist[best] += 1;
                    count += 1.0;
                }
            }
        }
        means.iter_mut().for_each(|m| *m /= count);
        prior.iter_mut().for_each(|p| *p /= count);
        normalize_prior_row(&mut prior);
        Agg { means, prior, hist }
    });

    let mut indep = Vec::with_capacity(n * channels);
    let mut priors = Vec::with_capacity(n * n_clas);
    let mut reliability = Vec::with_capacity(n);
    for a in &aggs {
        indep.extend_from_slice(&a.means);
        priors.extend_from_slice(&a.prior);
        reliability.push(reliability_from_entropy(&[a.hist.as_slice()])?);
    }
    let features = standardize_columns(&indep, n, channels);
    SampleSet::new(
        r,
        n_clas,
        channels,
        features,
        channels,
        indep,
        priors,
        Some(reliability),
        None,
    )
}

/// Column-wise z-scores; constant columns are only centred.
pub fn standardize_columns(m: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = m.to_vec();
    if n == 0 {
        return out;
    }
    for c in 0..k {
        let mean = (0..n).map(|j| m[j * k + c]).sum::<f64>() / n as f64;
        let var = (0..n).map(|j| (m[j * k + c] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for j in 0..n {
            let centred = m[j * k + c] - mean;
            out[j * k + c] = if sd > 1e-12 { centred / sd } else { centred };
        }
    }
    out
}

/// Reference labels per layer: layer 0 copies the voxels, coarser layers take
/// the majority of their children (ties go to the smallest class index).
pub fn reference_labels(pyramid: &Pyramid, voxel_labels: &[u16], n_clas: usize) -> Result<Vec<Vec<u16>>> {
    if voxel_labels.len() != pyramid.len(0) {
        return Err(invalid("voxel label volume does not match the pyramid"));
    }
    let mut out = vec![voxel_labels.to_vec()];
    for r in 1..=pyramid.n_lay {
        let finer = &out[r - 1];
        let labels: Vec<u16> = (0..pyramid.len(r))
            .map(|j| {
                let mut votes = vec![0usize; n_clas];
                for k in pyramid.children_of(r, j)? {
                    votes[finer[k] as usize] += 1;
                }
                Ok(argmax_usize(&votes) as u16)
            })
            .collect::<Result<_>>()?;
        out.push(labels);
    }
    Ok(out)
}

fn argmax_usize(v: &[usize]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
