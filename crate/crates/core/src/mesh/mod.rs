//! Triangle meshes: OBJ input, normals, curvature, voxelization and the
//! curvature-guided susceptibility search.

pub mod curvature;
pub mod histogram;
pub mod hog;
pub mod susceptibility;
pub mod voxelize;

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{invalid, Result};

pub type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm3(a);
    (n > 0.0 && n.is_finite()).then(|| scale(a, 1.0 / n))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&v| v >= n)) {
            return Err(invalid(format!("face {f:?} references a missing vertex ({n} vertices)")));
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(invalid("mesh has non-finite coordinates"));
        }
        Ok(Self { vertices, faces })
    }

    /// Parses the OBJ subset `v x y z` / `f a b c` (1-based). Other lines are ignored;
    /// `f` entries may carry `/vt/vn` suffixes, which are dropped.
    pub fn read_obj<R: BufRead>(input: R) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| invalid(format!("line {}: {e}", lineno + 1)))?;
                    if c.len() != 3 {
                        return Err(invalid(format!("line {}: vertex needs 3 coordinates", lineno + 1)));
                    }
                    vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let idx: Vec<usize> = it
                        .map(|t| t.split('/').next().unwrap_or("").parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| invalid(format!("line {}: {e}", lineno + 1)))?;
                    if idx.len() != 3 || idx.contains(&0) {
                        return Err(invalid(format!(
                            "line {}: faces must be triangles with 1-based indices",
                            lineno + 1
                        )));
                    }
                    faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
                }
                _ => {}
            }
        }
        Self::new(vertices, faces)
    }

    pub fn write_obj<W: Write>(&self, mut out: W) -> Result<()> {
        for v in &self.vertices {
            writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for f in &self.faces {
            writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        Ok(())
    }

    /// Unnormalized face normal; its length is twice the face area.
    fn face_cross(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.faces[f];
        cross(sub(self.vertices[b], self.vertices[a]), sub(self.vertices[c], self.vertices[a]))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * norm3(self.face_cross(f))
    }

    pub fn face_normal(&self, f: usize) -> Option<Vec3> {
        normalize(self.face_cross(f))
    }

    /// Area-weighted vertex normals. Zero-area faces are skipped; vertices
    /// without a usable face get `None`.
    pub fn vertex_normals(&self) -> Vec<Option<Vec3>> {
        let mut acc = vec![[0.0; 3]; self.vertices.len()];
        let mut degenerate = 0;
        for (f, face) in self.faces.iter().enumerate() {
            // the cross product is the unit normal times twice the area
            let c = self.face_cross(f);
            if norm3(c) == 0.0 {
                degenerate += 1;
                continue;
            }
            for &v in face {
                acc[v] = add(acc[v], c);
            }
        }
        if degenerate > 0 {
            log::info!("skipped {degenerate} zero-area faces");
        }
        acc.into_iter().map(normalize).collect()
    }

    /// Undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .filter(|(a, b)| a != b)
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }

    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.vertices.len()];
        for (a, b) in self.edges() {
            nb[a].push(b);
            nb[b].push(a);
        }
        nb
    }

    /// Concatenates two meshes.
    pub fn merged(&self, other: &TriMesh) -> TriMesh {
        let off = self.vertices.len();
        let mut vertices = self.vertices.clone();
        vertices.extend_from_slice(&other.vertices);
        let mut faces = self.faces.clone();
        faces.extend(other.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
        TriMesh { vertices, faces }
    }

    pub fn translated(&self, by: Vec3) -> TriMesh {
        TriMesh {
            vertices: self.vertices.iter().map(|&v| add(v, by)).collect(),
            faces: self.faces.clone(),
        }
    }

    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (
                [lo[0].min(v[0]), lo[1].min(v[1]), lo[2].min(v[2])],
                [hi[0].max(v[0]), hi[1].max(v[1]), hi[2].max(v[2])],
            )
        }))
    }
}

/// Regular octahedron with vertices on the axes at distance `r`, faces outward.
pub fn octahedron(r: f64) -> TriMesh {
    let vertices = vec![
        [r, 0.0, 0.0],
        [-r, 0.0, 0.0],
        [0.0, r, 0.0],
        [0.0, -r, 0.0],
        [0.0, 0.0, r],
        [0.0, 0.0, -r],
    ];
    let faces = vec![
        [0, 2, 4],
        [2, 1, 4],
        [1, 3, 4],
        [3, 0, 4],
        [2, 0, 5],
        [1, 2, 5],
        [3, 1, 5],
        [0, 3, 5],
    ];
    TriMesh { vertices, faces }
}

/// Icosahedron subdivided `subdivisions` times, projected onto a sphere of
/// `radius` around the origin. Faces are oriented outward.
pub fn icosphere(radius: f64, subdivisions: usize) -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|&v| normalize(v).unwrap())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, vertices: &mut Vec<Vec3>| -> usize {
            *midpoint.entry((a.min(b), a.max(b))).or_insert_with(|| {
                vertices.push(normalize(scale(add(vertices[a], vertices[b]), 0.5)).unwrap());
                vertices.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = mid(a, b, &mut vertices);
            let bc = mid(b, c, &mut vertices);
            let ca = mid(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    TriMesh {
        vertices: vertices.into_iter().map(|v| scale(v, radius)).collect(),
        faces,
    }
}

/// Open tube of `radius` along +z from `z = 0` to `length`, with outward faces.
pub fn cylinder(radius: f64, length: f64, around: usize, along: usize) -> TriMesh {
    let around = around.max(3);
    let along = along.max(1);
    let mut vertices = Vec::with_capacity(around * (along + 1));
    for k in 0..=along {
        let z = length * k as f64 / along as f64;
        for i in 0..around {
            // stagger alternate rings so edges are not all axis-aligned
            let phase = if k % 2 == 1 { 0.5 } else { 0.0 };
            let th = 2.0 * std::f64::consts::PI * (i as f64 + phase) / around as f64;
            vertices.push([radius * th.cos(), radius * th.sin(), z]);
        }
    }
    let id = |k: usize, i: usize| k * around + (i % around);
    let mut faces = Vec::with_capacity(2 * around * along);
    for k in 0..along {
        for i in 0..around {
            if k % 2 == 0 {
                faces.push([id(k, i), id(k, i + 1), id(k + 1, i)]);
                faces.push([id(k, i + 1), id(k + 1, i + 1), id(k + 1, i)]);
            } else {
                faces.push([id(k, i), id(k + 1, i + 1), id(k + 1, i)]);
                faces.push([id(k, i), id(k, i + 1), id(k + 1, i + 1)]);
            }
        }
    }
    TriMesh { vertices, faces }
}

/// Flat square grid in the `z = 0` plane with normals along +z.
pub fn plane(size: f64, cells: usize) -> TriMesh {
    let n = cells.max(1);
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for y in 0..=n {
        for x in 0..=n {
            vertices.push([size * x as f64 / n as f64, size * y as f64 / n as f64, 0.0]);
        }
    }
    let id = |x: usize, y: usize| y * (n + 1) + x;
    let mut faces = Vec::with_capacity(2 * n * n);
    for y in 0..n {
        for x in 0..n {
            faces.push([id(x, y), id(x + 1, y), id(x + 1, y + 1)]);
            faces.push([id(x, y), id(x + 1, y + 1), id(x, y + 1)]);
        }
    }
    TriMesh { vertices, faces }
}

/// A large sphere next to a thin open tube: two curvature populations.
pub fn sphere_tube(center: Vec3, sphere_radius: f64, tube_radius: f64, tube_length: f64, tube_offset: Vec3) -> TriMesh {
    let sphere = icosphere(sphere_radius, 4).translated(center);
    let around = ((2.0 * std::f64::consts::PI * tube_radius / 0.35).ceil() as usize).max(12);
    let along = ((tube_length / 0.35).ceil() as usize).max(2);
    let tube = cylinder(tube_radius, tube_length, around, along).translated(tube_offset);
    sphere.merged(&tube)
}
