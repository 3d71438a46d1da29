//! Constrained variant: Sobel boundary detection, per-class sample categories
//! and the reduced solve over the remaining samples.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::pyramid::{Dims, Pyramid};
use crate::samples::SampleSet;
use crate::solver::{assemble_with_known, solve, Coupling, IterationReport, PosteriorMatrix, SolverOptions};
use crate::volume::Volume;

pub const FORE_THRESHOLD: f64 = 0.8;
pub const BACK_THRESHOLD: f64 = 0.2;
pub const SOFT_RANGE: (f64, f64) = (0.4, 0.6);
pub const HARD_VALUE: f64 = 0.5;
pub const DEFAULT_SOBEL_QUANTILE: f64 = 0.9;

/// Voxel-level boundary detection result.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMask {
    pub dims: Dims,
    pub magnitude: Vec<f64>,
    pub mask: Vec<bool>,
    pub threshold: f64,
}

impl BoundaryMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn to_volume(&self) -> Volume<u8> {
        Volume {
            dims: self.dims,
            channels: 1,
            data: self.mask.iter().map(|&m| u8::from(m)).collect(),
        }
    }
}

/// 3x3x3 Sobel gradient magnitude of one channel, with replicated faces.
fn sobel_magnitude(data: &[f32], dims: Dims) -> Vec<f64> {
    const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];
    const DIFF: [f64; 3] = [-1.0, 0.0, 1.0];
    let [nx, ny, nz] = dims;
    let at = |x: i64, y: i64, z: i64| -> f64 {
        let c = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
        f64::from(data[c(x, nx) + nx * (c(y, ny) + ny * c(z, nz))])
    };
    crate::par::map_range(nx * ny * nz, |i| {
        let x = (i % nx) as i64;
        let y = ((i / nx) % ny) as i64;
        let z = (i / (nx * ny)) as i64;
        let (mut gx, mut gy, mut gz) = (0.0, 0.0, 0.0);
        for dz in 0..3 {
            for dy in 0..3 {
                for dx in 0..3 {
                    let v = at(x + dx as i64 - 1, y + dy as i64 - 1, z + dz as i64 - 1);
                    gx += DIFF[dx] * SMOOTH[dy] * SMOOTH[dz] * v;
                    gy += SMOOTH[dx] * DIFF[dy] * SMOOTH[dz] * v;
                    gz += SMOOTH[dx] * SMOOTH[dy] * DIFF[dz] * v;
                }
            }
        }
        (gx * gx + gy * gy + gz * gz).sqrt()
    })
}

/// Nearest-rank `q`-quantile of the nonzero entries, or `None` if all are zero.
pub fn nonzero_quantile(values: &[f64], q: f64) -> Option<f64> {
    let mut nz: Vec<f64> = values.iter().copied().filter(|&v| v > 0.0).collect();
    if nz.is_empty() {
        return None;
    }
    nz.sort_by(f64::total_cmp);
    let rank = ((q * nz.len() as f64).ceil() as usize).clamp(1, nz.len());
    Some(nz[rank - 1])
}

/// Per-channel Sobel magnitudes combined by their maximum, thresholded at
/// the `quantile` of the nonzero magnitudes.
pub fn sobel3d(volume: &Volume<f32>, quantile: f64) -> Result<BoundaryMask> {
    if volume.dims.iter().any(|&d| d < 3) {
        return Err(invalid(format!("Sobel needs at least 3 voxels per axis, got {:?}", volume.dims)));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(invalid(format!("Sobel quantile must lie in [0, 1], got {quantile}")));
    }
    let mut magnitude = vec![0.0f64; volume.voxel_count()];
    for c in 0..volume.channels {
        let m = sobel_magnitude(volume.channel(c), volume.dims);
        for (a, b) in magnitude.iter_mut().zip(m) {
            *a = a.max(b);
        }
    }
    let (threshold, mask) = match nonzero_quantile(&magnitude, quantile) {
        Some(t) => (t, magnitude.iter().map(|&m| m > 0.0 && m >= t).collect()),
        None => (0.0, vec![false; magnitude.len()]),
    };
    Ok(BoundaryMask {
        dims: volume.dims,
        magnitude,
        mask,
        threshold,
    })
}

/// A sample is a boundary sample when its patch holds at least one masked voxel.
/// The mask may cover the original or the padded grid.
pub fn boundary_samples(pyramid: &Pyramid, r: usize, mask: &BoundaryMask) -> Result<Vec<bool>> {
    if mask.dims != pyramid.original_dims && mask.dims != pyramid.finest_dims {
        return Err(invalid(format!(
            "mask dims {:?} match neither {:?} nor {:?}",
            mask.dims, pyramid.original_dims, pyramid.finest_dims
        )));
    }
    let layer = pyramid.layer(r)?;
    let [mx, my, mz] = mask.dims;
    Ok(crate::par::map_range(layer.len(), |j| {
        let (lo, hi) = layer.patch_bounds(j);
        for z in lo[2]..hi[2].min(mz) {
            for y in lo[1]..hi[1].min(my) {
                for x in lo[0]..hi[0].min(mx) {
                    if mask.mask[x + mx * (y + my * z)] {
                        return true;
                    }
                }
            }
        }
        false
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Fore,
    Back,
    Hard,
    Rest,
}

/// One-vs-all categories of every sample for a single class.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleCategories {
    pub class: usize,
    pub category: Vec<Category>,
    /// Rest samples whose prior lies in the soft range; diagnostics only.
    pub soft: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CategorySummary {
    pub class: usize,
    pub fore: usize,
    pub back: usize,
    pub hard: usize,
    pub soft: usize,
    pub rest: usize,
}

impl SampleCategories {
    pub fn indices(&self, which: Category) -> Vec<usize> {
        (0..self.category.len()).filter(|&j| self.category[j] == which).collect()
    }

    pub fn count(&self, which: Category) -> usize {
        self.category.iter().filter(|&&c| c == which).count()
    }

    /// Fixed posterior of each constrained sample.
    pub fn fixed_value(&self, j: usize) -> Option<f64> {
        match self.category[j] {
            Category::Fore => Some(1.0),
            Category::Back => Some(0.0),
            Category::Hard => Some(HARD_VALUE),
            Category::Rest => None,
        }
    }

    pub fn summary(&self) -> CategorySummary {
        CategorySummary {
            class: self.class,
            fore: self.count(Category::Fore),
            back: self.count(Category::Back),
            hard: self.count(Category::Hard),
            soft: self.soft.len(),
            rest: self.count(Category::Rest),
        }
    }
}

/// Categorizes with precedence hard > fore > back; everything else is rest.
pub fn categorize(samples: &SampleSet, boundary: &[bool], class: usize) -> Result<SampleCategories> {
    let n_clas = samples.n_clas;
    if class >= n_clas {
        return Err(invalid(format!("class {class} out of range for {n_clas} classes")));
    }
    if boundary.len() != samples.len() {
        return Err(invalid(format!(
            "{} boundary flags for {} samples",
            boundary.len(),
            samples.len()
        )));
    }
    let mut soft = Vec::new();
    let category = (0..samples.len())
        .map(|j| {
            let a = samples.prior(j)[class];
            if boundary[j] {
                Category::Hard
            } else if a >= FORE_THRESHOLD {
                Category::Fore
            } else if a <= BACK_THRESHOLD {
                Category::Back
            } else {
                if (SOFT_RANGE.0..=SOFT_RANGE.1).contains(&a) {
                    soft.push(j);
                }
                Category::Rest
            }
        })
        .collect();
    Ok(SampleCategories { class, category, soft })
}

#[derive(Debug, Clone)]
pub struct ConstrainedSolution {
    pub values: Vec<f64>,
    pub unknowns: usize,
    pub report: IterationReport,
    pub notice: Option<String>,
}

/// Solves one class: constrained samples keep their fixed values exactly,
/// rest samples solve the reduced system.
pub fn solve_constrained<C: Coupling + ?Sized>(
    weights: &C,
    categories: &SampleCategories,
    prior_col: &[f64],
    lambda: f64,
    opts: &SolverOptions,
) -> Result<ConstrainedSolution> {
    let n = weights.n_samples();
    if categories.category.len() != n || prior_col.len() != n {
        return Err(invalid("categories, priors and weights disagree on the sample count"));
    }
    let known: Vec<Option<Vec<f64>>> = (0..n).map(|j| categories.fixed_value(j).map(|v| vec![v])).collect();
    let rest = categories.count(Category::Rest);
    if rest == 0 {
        let values = known.iter().map(|k| k.as_ref().unwrap()[0]).collect();
        let notice = format!("class {}: no rest samples, returning constraint values", categories.class);
        log::info!("{notice}");
        return Ok(ConstrainedSolution {
            values,
            unknowns: 0,
            report: IterationReport::default(),
            notice: Some(notice),
        });
    }
    let system = assemble_with_known(weights, prior_col, 1, lambda, &known)?;
    let (p, report) = solve(&system, opts)?;
    Ok(ConstrainedSolution {
        values: p.into_values(),
        unknowns: system.unknowns().len(),
        report,
        notice: None,
    })
}

/// Runs every class one-vs-all. Columns are returned as solved, without
/// renormalization across classes.
pub fn solve_constrained_all<C: Coupling + ?Sized>(
    weights: &C,
    samples: &SampleSet,
    boundary: &[bool],
    lambda: f64,
    opts: &SolverOptions,
) -> Result<(PosteriorMatrix, Vec<SampleCategories>, Vec<ConstrainedSolution>)> {
    let n = samples.len();
    let n_clas = samples.n_clas;
    let per_class = crate::par::map_range(n_clas, |c| -> Result<(SampleCategories, ConstrainedSolution)> {
        let cats = categorize(samples, boundary, c)?;
        let sol = solve_constrained(weights, &cats, &samples.prior_column(c), lambda, opts)?;
        Ok((cats, sol))
    });
    let mut values = vec![0.0; n * n_clas];
    let mut cats = Vec::with_capacity(n_clas);
    let mut sols = Vec::with_capacity(n_clas);
    for (c, r) in per_class.into_iter().enumerate() {
        let (cat, sol) = r?;
        for j in 0..n {
            values[j * n_clas + c] = sol.values[j];
        }
        cats.push(cat);
        sols.push(sol);
    }
    Ok((PosteriorMatrix::new(n, n_clas, values)?, cats, sols))
}
