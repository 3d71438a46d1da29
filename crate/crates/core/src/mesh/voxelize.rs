//! Surface voxelization with per-voxel curvature and normal medians.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::curvature::VertexCurvature;
use super::{add, dot3, norm3, normalize, scale, sub, TriMesh, Vec3};
use crate::error::{invalid, Result};
use crate::pyramid::Dims;
use crate::robust::median_in_place;

/// Sampling step along triangle edges, in voxels.
pub const SUBVOXEL_STEP: f64 = 0.5;

/// Voxel `v` covers `[origin + v * spacing, origin + (v + 1) * spacing)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: Dims,
    pub origin: Vec3,
    pub spacing: Vec3,
}

impl Grid {
    pub fn new(dims: Dims, origin: Vec3, spacing: Vec3) -> Result<Self> {
        if spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(invalid(format!("grid spacing must be positive, got {spacing:?}")));
        }
        Ok(Self { dims, origin, spacing })
    }

    /// Unit-spaced grid at the origin.
    pub fn unit(dims: Dims) -> Self {
        Self { dims, origin: [0.0; 3], spacing: [1.0; 3] }
    }

    pub fn index(&self, v: Dims) -> usize {
        v[0] + self.dims[0] * (v[1] + self.dims[1] * v[2])
    }

    /// Continuous voxel coordinates of a world point.
    pub fn to_voxel_space(&self, p: Vec3) -> Vec3 {
        [0, 1, 2].map(|a| (p[a] - self.origin[a]) / self.spacing[a])
    }

    /// Voxel containing `p`; the upper faces of the grid belong to the last voxel.
    pub fn voxel_of(&self, p: Vec3) -> Option<Dims> {
        let q = self.to_voxel_space(p);
        let mut v = [0; 3];
        for a in 0..3 {
            if !(q[a] >= 0.0 && q[a] <= self.dims[a] as f64) || self.dims[a] == 0 {
                return None;
            }
            v[a] = (q[a].floor() as usize).min(self.dims[a] - 1);
        }
        Some(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceVoxel {
    pub voxel: Dims,
    /// Median `|k_max|` and median max-curvature direction, when any
    /// contributing triangle has a typed vertex.
    pub curvature: Option<(f64, Vec3)>,
    pub normal: Option<Vec3>,
}

/// Values a triangle carries into every voxel it touches.
#[derive(Clone, Copy)]
struct TriangleValue {
    curvature: Option<(f64, Vec3)>,
    normal: Option<Vec3>,
}

fn triangle_value(mesh: &TriMesh, f: usize, normals: &[Option<Vec3>], curv: &[Option<VertexCurvature>]) -> TriangleValue {
    let face = mesh.faces[f];
    let normal = normalize(face.iter().filter_map(|&v| normals[v]).fold([0.0; 3], add)).or(mesh.face_normal(f));
    let typed: Vec<&VertexCurvature> = face.iter().filter_map(|&v| curv[v].as_ref()).collect();
    let curvature = if typed.is_empty() {
        None
    } else {
        let mag = typed.iter().map(|c| c.k_max.abs()).sum::<f64>() / typed.len() as f64;
        // directions are axial: align signs to the first before averaging
        let r = typed[0].dir_max;
        let mut d = [0.0; 3];
        for c in &typed {
            let s = if dot3(c.dir_max, r) < 0.0 { -1.0 } else { 1.0 };
            d = add(d, scale(c.dir_max, s));
        }
        normalize(d).map(|d| (mag, d))
    };
    TriangleValue { curvature, normal }
}

fn component_median(vs: &[Vec3]) -> Option<Vec3> {
    if vs.is_empty() {
        return None;
    }
    let mut m = [0.0; 3];
    for (a, slot) in m.iter_mut().enumerate() {
        let mut c: Vec<f64> = vs.iter().map(|v| v[a]).collect();
        *slot = median_in_place(&mut c);
    }
    normalize(m)
}

/// Median of axial directions. Signs are aligned to the dominant axis of the
/// set, which does not depend on the order of the inputs.
pub fn axial_median(vs: &[Vec3]) -> Option<Vec3> {
    if vs.is_empty() {
        return None;
    }
    let mut t = Matrix3::<f64>::zeros();
    for v in vs {
        for i in 0..3 {
            for j in 0..3 {
                t[(i, j)] += v[i] * v[j];
            }
        }
    }
    let eig = SymmetricEigen::new(t);
    let k = eig.eigenvalues.imax();
    let mut axis = [eig.eigenvectors[(0, k)], eig.eigenvectors[(1, k)], eig.eigenvectors[(2, k)]];
    let big = (0..3).max_by(|&i, &j| axis[i].abs().total_cmp(&axis[j].abs())).unwrap();
    if axis[big] < 0.0 {
        axis = scale(axis, -1.0);
    }
    let aligned: Vec<Vec3> = vs.iter().map(|&v| if dot3(v, axis) < 0.0 { scale(v, -1.0) } else { v }).collect();
    component_median(&aligned)
}

/// Marks every voxel touched by a triangle, sampling each triangle on a
/// barycentric lattice no coarser than half a voxel. Each voxel takes the
/// median over the triangles that touch it. Output is sorted by voxel index.
pub fn voxelize_surface(
    mesh: &TriMesh,
    grid: &Grid,
    normals: &[Option<Vec3>],
    curvatures: &[Option<VertexCurvature>],
) -> Result<Vec<SurfaceVoxel>> {
    if normals.len() != mesh.vertices.len() || curvatures.len() != mesh.vertices.len() {
        return Err(invalid("normals and curvatures must have one entry per vertex"));
    }
    if let Some(v) = mesh.vertices.iter().find(|v| grid.voxel_of(**v).is_none()) {
        return Err(invalid(format!("mesh vertex {v:?} lies outside the grid")));
    }
    // per triangle: the voxels it touches
    let touched: Vec<Vec<usize>> = crate::par::map_range(mesh.faces.len(), |f| {
        let [a, b, c] = mesh.faces[f].map(|v| grid.to_voxel_space(mesh.vertices[v]));
        let longest = [norm3(sub(b, a)), norm3(sub(c, b)), norm3(sub(a, c))].into_iter().fold(0.0, f64::max);
        let n = ((longest / SUBVOXEL_STEP).ceil() as usize).max(1);
        let mut out = Vec::new();
        for i in 0..=n {
            for j in 0..=(n - i) {
                let (u, w) = (i as f64 / n as f64, j as f64 / n as f64);
                let q = add(a, add(scale(sub(b, a), u), scale(sub(c, a), w)));
                let v = [0, 1, 2].map(|ax| (q[ax].floor().max(0.0) as usize).min(grid.dims[ax] - 1));
                out.push(grid.index(v));
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    });
    let values: Vec<TriangleValue> =
        crate::par::map_range(mesh.faces.len(), |f| triangle_value(mesh, f, normals, curvatures));
    let mut per_voxel: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (f, vs) in touched.iter().enumerate() {
        for &v in vs {
            per_voxel.entry(v).or_default().push(f);
        }
    }
    let entries: Vec<(usize, Vec<usize>)> = per_voxel.into_iter().collect();
    let d = grid.dims;
    Ok(crate::par::map_slice(&entries, |(idx, faces)| {
        let voxel = [idx % d[0], (idx / d[0]) % d[1], idx / (d[0] * d[1])];
        let curv: Vec<(f64, Vec3)> = faces.iter().filter_map(|&f| values[f].curvature).collect();
        let curvature = if curv.is_empty() {
            None
        } else {
            let mut mags: Vec<f64> = curv.iter().map(|c| c.0).collect();
            let dirs: Vec<Vec3> = curv.iter().map(|c| c.1).collect();
            axial_median(&dirs).map(|dir| (median_in_place(&mut mags), dir))
        };
        let ns: Vec<Vec3> = faces.iter().filter_map(|&f| values[f].normal).collect();
        SurfaceVoxel { voxel, curvature, normal: component_median(&ns) }
    }))
}
