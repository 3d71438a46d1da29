//! Per-vertex curvature tensors from edge-wise normal differences.
//!
//! For each vertex, the shape operator restricted to the tangent plane is the
//! symmetric 2x2 matrix `C` minimizing `sum |C e_t - dn_t|^2` over incident
//! edges, where `e_t` is the projected edge and `dn_t` the projected normal
//! difference. With outward normals a sphere of radius `R` gives `C = I / R`.

use super::{cross, dot3, normalize, sub, TriMesh, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexCurvature {
    pub k_min: f64,
    pub k_max: f64,
    pub dir_min: Vec3,
    pub dir_max: Vec3,
    pub normal: Vec3,
    /// Tangent basis the tensor is expressed in.
    pub basis: [Vec3; 2],
    /// Tensor entries `[c11, c12, c22]` in `basis`.
    pub tensor: [f64; 3],
}

impl VertexCurvature {
    pub fn gaussian(&self) -> f64 {
        self.k_min * self.k_max
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.k_min + self.k_max)
    }

    /// Normal curvature along a tangent direction, from the tensor.
    pub fn normal_curvature(&self, e: Vec3) -> f64 {
        let u = dot3(e, self.basis[0]);
        let v = dot3(e, self.basis[1]);
        let len2 = u * u + v * v;
        if len2 == 0.0 {
            return 0.0;
        }
        let [a, b, c] = self.tensor;
        (a * u * u + 2.0 * b * u * v + c * v * v) / len2
    }

    /// The same value from the principal decomposition.
    pub fn normal_curvature_principal(&self, e: Vec3) -> f64 {
        let e1 = dot3(e, self.dir_min);
        let e2 = dot3(e, self.dir_max);
        let len2 = e1 * e1 + e2 * e2;
        if len2 == 0.0 {
            return 0.0;
        }
        (self.k_min * e1 * e1 + self.k_max * e2 * e2) / len2
    }
}

fn tangent_basis(n: Vec3) -> [Vec3; 2] {
    let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = normalize(cross(helper, n)).unwrap();
    let v = cross(n, u);
    [u, v]
}

/// Eigen-decomposition of a symmetric 2x2 matrix, ascending.
fn eigen_sym2(a: f64, b: f64, c: f64) -> ((f64, [f64; 2]), (f64, [f64; 2])) {
    let mean = 0.5 * (a + c);
    let diff = 0.5 * (a - c);
    let rad = (diff * diff + b * b).sqrt();
    let (l1, l2) = (mean - rad, mean + rad);
    // eigenvector of l2
    let v2 = if b.abs() > 1e-300 || diff.abs() > 1e-300 {
        let theta = 0.5 * b.atan2(diff);
        [theta.cos(), theta.sin()]
    } else {
        [1.0, 0.0]
    };
    let v1 = [-v2[1], v2[0]];
    ((l1, v1), (l2, v2))
}

/// Curvature of every vertex, or `None` where the vertex has no normal or
/// fewer than three independent edge constraints.
pub fn curvature_tensors(mesh: &TriMesh, normals: &[Option<Vec3>]) -> Vec<Option<VertexCurvature>> {
    let neighbors = mesh.vertex_neighbors();
    crate::par::map_range(mesh.vertices.len(), |i| {
        let n = normals[i]?;
        let basis = tangent_basis(n);
        // normal equations for x = (c11, c12, c22)
        let mut m = [[0.0f64; 3]; 3];
        let mut rhs = [0.0f64; 3];
        let mut scale = 0.0f64;
        let mut used = 0;
        for &j in &neighbors[i] {
            let Some(nj) = normals[j] else { continue };
            let e = sub(mesh.vertices[j], mesh.vertices[i]);
            let dn = sub(nj, n);
            let (eu, ev) = (dot3(e, basis[0]), dot3(e, basis[1]));
            let (du, dv) = (dot3(dn, basis[0]), dot3(dn, basis[1]));
            // rows: [eu, ev, 0] . x = du and [0, eu, ev] . x = dv
            let w = 1.0 / (eu * eu + ev * ev).max(1e-300);
            for (row, t) in [([eu, ev, 0.0], du), ([0.0, eu, ev], dv)] {
                for p in 0..3 {
                    rhs[p] += w * row[p] * t;
                    for q in 0..3 {
                        m[p][q] += w * row[p] * row[q];
                    }
                }
            }
            scale = scale.max(w * (eu * eu + ev * ev));
            used += 1;
        }
        if used < 3 {
            return None;
        }
        let x = solve3(m, rhs, scale)?;
        let (a, b, c) = (x[0], x[1], x[2]);
        let ((k_min, v1), (k_max, v2)) = eigen_sym2(a, b, c);
        let to3 = |v: [f64; 2]| -> Vec3 {
            let d = [
                v[0] * basis[0][0] + v[1] * basis[1][0],
                v[0] * basis[0][1] + v[1] * basis[1][1],
                v[0] * basis[0][2] + v[1] * basis[1][2],
            ];
            normalize(d).unwrap_or(basis[0])
        };
        Some(VertexCurvature {
            k_min,
            k_max,
            dir_min: to3(v1),
            dir_max: to3(v2),
            normal: n,
            basis,
            tensor: [a, b, c],
        })
    })
}

/// Solves a 3x3 system by Cramer's rule; `None` when it is rank deficient.
fn solve3(m: [[f64; 3]; 3], r: [f64; 3], scale: f64) -> Option<[f64; 3]> {
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&m);
    if !(d.abs() > 1e-10 * scale.powi(3).max(f64::MIN_POSITIVE)) {
        return None;
    }
    let mut x = [0.0; 3];
    for k in 0..3 {
        let mut mk = m;
        for row in 0..3 {
            mk[row][k] = r[row];
        }
        x[k] = det(&mk) / d;
    }
    Some(x)
}
