//! Synthetic volumes with known labels and priors.
//!
//! Three kinds are available. `step` is a two-class half space. `nested-shells`
//! has three concentric spherical classes inside a background. `sphere-tube`
//! is a large sphere with a thin tube on top, each wrapped in a thin fat
//! layer, and comes with a matching triangle mesh.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mesh::{sphere_tube, TriMesh, Vec3};
use crate::pyramid::Dims;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    Step,
    NestedShells,
    SphereTube,
}

impl std::str::FromStr for PhantomKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Self::Step),
            "nested-shells" => Ok(Self::NestedShells),
            "sphere-tube" => Ok(Self::SphereTube),
            _ => Err(invalid(format!("unknown phantom kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub dims: Dims,
    /// Standard deviation of additive Gaussian noise on every channel.
    pub noise: f64,
    pub seed: u64,
    /// Blend towards the 3x3x3 box average, 0 (sharp) to 1 (fully blurred).
    pub weak_boundary: f64,
    /// Weight of the blurred one-hot labels in the priors; the rest is uniform.
    pub prior_confidence: f64,
    /// Box radius used to blur the one-hot labels into priors.
    pub prior_blur: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            kind: PhantomKind::NestedShells,
            dims: [24, 24, 24],
            noise: 0.0,
            seed: 0,
            weak_boundary: 0.0,
            prior_confidence: 0.9,
            prior_blur: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub n_clas: usize,
    pub background: usize,
    pub class_names: Vec<String>,
    pub volume: Volume<f32>,
    pub labels: Volume<u16>,
    pub priors: Volume<f32>,
    pub mesh: Option<TriMesh>,
}

/// Shell radii of the nested-shells phantom, as fractions of half the
/// smallest dimension.
pub const SHELL_FRACTIONS: [f64; 3] = [0.3, 0.55, 0.8];

const FAT_THICKNESS: f64 = 2.0;

fn center_of(v: Dims) -> Vec3 {
    [v[0] as f64 + 0.5, v[1] as f64 + 0.5, v[2] as f64 + 0.5]
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Geometry of the sphere-tube phantom for the given dims.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereTubeGeometry {
    pub center: Vec3,
    pub sphere_radius: f64,
    pub tube_radius: f64,
    pub tube_start: f64,
    pub tube_length: f64,
}

impl SphereTubeGeometry {
    pub fn for_dims(d: Dims) -> Self {
        let sphere_radius = 0.3 * d[0].min(d[1]) as f64;
        let center = [0.5 * d[0] as f64, 0.5 * d[1] as f64, sphere_radius + FAT_THICKNESS + 2.0];
        let tube_radius = (sphere_radius / 6.0).max(1.0);
        let tube_start = center[2] + sphere_radius + 0.5;
        let tube_length = d[2] as f64 - 2.0 - tube_start;
        Self { center, sphere_radius, tube_radius, tube_start, tube_length }
    }

    pub fn mesh(&self) -> TriMesh {
        sphere_tube(
            self.center,
            self.sphere_radius,
            self.tube_radius,
            self.tube_length,
            [self.center[0], self.center[1], self.tube_start],
        )
    }
}

/// Class names used by the four-class phantoms.
/// Stems and paths written by [`Phantom::write`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhantomFiles {
    pub volume: PathBuf,
    pub priors: PathBuf,
    pub labels: PathBuf,
    pub mesh: Option<PathBuf>,
}

impl Phantom {
    /// Writes `volume`, `priors` and `labels` volumes, `mesh.obj` when the
    /// kind has one, and `phantom.json` describing the classes.
    pub fn write(&self, dir: &Path) -> Result<PhantomFiles> {
        fs::create_dir_all(dir)?;
        let meta = serde_json::json!({
            "phantom": self.spec,
            "class_names": self.class_names,
            "background": self.background,
        });
        let files = PhantomFiles {
            volume: dir.join("volume"),
            priors: dir.join("priors"),
            labels: dir.join("labels"),
            mesh: self.mesh.as_ref().map(|_| dir.join("mesh.obj")),
        };
        self.volume.write(&files.volume, Some(meta.clone()))?;
        self.priors.write(&files.priors, Some(meta.clone()))?;
        self.labels.write(&files.labels, Some(meta.clone()))?;
        if let (Some(m), Some(path)) = (&self.mesh, &files.mesh) {
            m.write_obj(BufWriter::new(fs::File::create(path)?))?;
        }
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        fs::write(dir.join("phantom.json"), text)?;
        Ok(files)
    }
}

pub fn default_class_names() -> Vec<String> {
    ["EpAT", "PeAT", "PvAT", "Background"].iter().map(|s| s.to_string()).collect()
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let d = spec.dims;
    if d.iter().any(|&v| v < 3) {
        return Err(invalid(format!("phantom dims must be at least 3 per axis, got {d:?}")));
    }
    if !(spec.noise >= 0.0) || !(0.0..=1.0).contains(&spec.weak_boundary) || !(0.0..=1.0).contains(&spec.prior_confidence)
    {
        return Err(invalid("noise must be >= 0; weak_boundary and prior_confidence must lie in [0, 1]"));
    }
    let n: usize = d.iter().product();
    let coords = |i: usize| [i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])];
    let (n_clas, background, class_names, channels, mesh);
    let mut labels = vec![0u16; n];
    let mut intensity: Vec<Vec<f64>>;
    match spec.kind {
        PhantomKind::Step => {
            n_clas = 2;
            background = 0;
            class_names = vec!["background".to_string(), "foreground".to_string()];
            channels = 1;
            mesh = None;
            let at = d[0] / 2;
            intensity = vec![vec![0.0; n]];
            for i in 0..n {
                if coords(i)[0] >= at {
                    labels[i] = 1;
                    intensity[0][i] = 1.0;
                }
            }
        }
        PhantomKind::NestedShells => {
            n_clas = 4;
            background = 3;
            class_names = default_class_names();
            channels = 2;
            mesh = None;
            // fat-like and water-like intensities per class
            let table = [[1.0, 0.0], [0.6, 0.3], [0.3, 0.7], [0.0, 0.1]];
            let half = 0.5 * d.iter().copied().min().unwrap() as f64;
            let c = [0.5 * d[0] as f64, 0.5 * d[1] as f64, 0.5 * d[2] as f64];
            intensity = vec![vec![0.0; n]; 2];
            for i in 0..n {
                let r = dist(center_of(coords(i)), c);
                let l = SHELL_FRACTIONS.iter().position(|&f| r < f * half).unwrap_or(3);
                labels[i] = l as u16;
                intensity[0][i] = table[l][0];
                intensity[1][i] = table[l][1];
            }
        }
        PhantomKind::SphereTube => {
            if d[0] < 16 || d[1] < 16 || d[2] < 24 {
                return Err(invalid(format!("sphere-tube phantom needs at least 16 x 16 x 24 voxels, got {d:?}")));
            }
            n_clas = 4;
            background = 3;
            class_names = default_class_names();
            channels = 2;
            let g = SphereTubeGeometry::for_dims(d);
            mesh = Some(g.mesh());
            intensity = vec![vec![0.1; n], vec![0.2; n]];
            for i in 0..n {
                let p = center_of(coords(i));
                let ds = dist(p, g.center) - g.sphere_radius;
                let in_tube_range = p[2] >= g.tube_start && p[2] <= g.tube_start + g.tube_length;
                let dt = if in_tube_range {
                    ((p[0] - g.center[0]).hypot(p[1] - g.center[1])) - g.tube_radius
                } else {
                    f64::INFINITY
                };
                if ds <= 0.0 || dt <= 0.0 {
                    intensity[0][i] = 0.0;
                    intensity[1][i] = 0.9;
                    labels[i] = 3;
                } else if ds <= FAT_THICKNESS {
                    labels[i] = 0;
                    intensity[0][i] = 1.0;
                    intensity[1][i] = 0.0;
                } else if dt <= FAT_THICKNESS {
                    labels[i] = 2;
                    intensity[0][i] = 0.8;
                    intensity[1][i] = 0.05;
                } else {
                    labels[i] = 3;
                }
            }
        }
    }
    if spec.weak_boundary > 0.0 {
        for ch in intensity.iter_mut() {
            let blurred = box_blur(ch, d, 1);
            for (v, b) in ch.iter_mut().zip(blurred) {
                *v = (1.0 - spec.weak_boundary) * *v + spec.weak_boundary * b;
            }
        }
    }
    if spec.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise).map_err(|e| invalid(e.to_string()))?;
        for ch in intensity.iter_mut() {
            for v in ch.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let mut prior_data = Vec::with_capacity(n * n_clas);
    let uniform = (1.0 - spec.prior_confidence) / n_clas as f64;
    for c in 0..n_clas {
        let onehot: Vec<f64> = labels.iter().map(|&l| f64::from(l as usize == c)).collect();
        let blurred = box_blur(&onehot, d, spec.prior_blur);
        prior_data.extend(blurred.into_iter().map(|b| spec.prior_confidence * b + uniform));
    }
    let volume = Volume::from_f64(d, channels, &intensity.concat())?;
    Ok(Phantom {
        spec: spec.clone(),
        n_clas,
        background,
        class_names,
        volume,
        labels: Volume::new(d, 1, labels)?,
        priors: Volume::from_f64(d, n_clas, &prior_data)?,
        mesh,
    })
}

/// Separable box average of half-width `radius` with replicated borders.
pub fn box_blur(data: &[f64], d: Dims, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return data.to_vec();
    }
    let mut cur = data.to_vec();
    let stride = [1, d[0], d[0] * d[1]];
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / stride[axis]) % d[axis];
            let base = i - pos * stride[axis];
            let mut s = 0.0;
            for off in -(radius as i64)..=radius as i64 {
                let q = (pos as i64 + off).clamp(0, d[axis] as i64 - 1) as usize;
                s += cur[base + q * stride[axis]];
            }
            *out = s / (2 * radius + 1) as f64;
        }
        cur = next;
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constrained::sobel3d;
    use crate::mesh::susceptibility::SurfaceAnalysis;
    use crate::mesh::voxelize::Grid;

    #[test]
    fn step_is_exact() {
        let spec = PhantomSpec { kind: PhantomKind::Step, dims: [8, 4, 4], noise: 0.0, ..Default::default() };
        let p = generate_phantom(&spec).unwrap();
        for i in 0..p.labels.data.len() {
            let x = i % 8;
            assert_eq!(p.labels.data[i], u16::from(x >= 4));
            assert_eq!(p.volume.data[i], if x >= 4 { 1.0 } else { 0.0 });
        }
        // the boundary mask is exactly the two layers either side of the step
        let mask = sobel3d(&p.volume, 0.9).unwrap();
        for (i, &m) in mask.mask.iter().enumerate() {
            let x = i % 8;
            assert_eq!(m, x == 3 || x == 4, "x = {x}");
        }
    }

    #[test]
    fn priors_are_distributions() {
        let p = generate_phantom(&PhantomSpec::default()).unwrap();
        let n = p.labels.data.len();
        for i in 0..n {
            let s: f64 = (0..4).map(|c| f64::from(p.priors.channel(c)[i])).sum();
            assert!((s - 1.0).abs() < 1e-5);
            // the true class keeps the largest prior away from boundaries
            assert!(p.priors.channel(p.labels.data[i] as usize)[i] > 0.0);
        }
    }

    #[test]
    fn shell_volumes_match_analytic() {
        let d = [40, 40, 40];
        let p = generate_phantom(&PhantomSpec { dims: d, ..Default::default() }).unwrap();
        let half = 20.0;
        let ball = |f: f64| 4.0 / 3.0 * std::f64::consts::PI * (f * half).powi(3);
        let want = [
            ball(SHELL_FRACTIONS[0]),
            ball(SHELL_FRACTIONS[1]) - ball(SHELL_FRACTIONS[0]),
            ball(SHELL_FRACTIONS[2]) - ball(SHELL_FRACTIONS[1]),
        ];
        for (c, w) in want.iter().enumerate() {
            let got = p.labels.data.iter().filter(|&&l| l as usize == c).count() as f64;
            assert!((got - w).abs() / w < 0.03, "class {c}: {got} vs {w}");
        }
    }

    #[test]
    fn deterministic_noise() {
        let spec = PhantomSpec { noise: 0.1, seed: 4, weak_boundary: 0.5, ..Default::default() };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.volume.data, b.volume.data);
        let c = generate_phantom(&PhantomSpec { seed: 5, ..spec }).unwrap();
        assert_ne!(a.volume.data, c.volume.data);
    }

    #[test]
    fn sphere_tube_mesh_has_two_populations() {
        let d = [24, 24, 36];
        let p = generate_phantom(&PhantomSpec { kind: PhantomKind::SphereTube, dims: d, ..Default::default() }).unwrap();
        let g = SphereTubeGeometry::for_dims(d);
        let a = SurfaceAnalysis::new(p.mesh.as_ref().unwrap(), Grid::unit(d)).unwrap();
        assert!(a.populations.myocardium.contains(1.0 / g.sphere_radius), "{:?}", a.populations.myocardium);
        assert!(a.populations.vessel.contains(1.0 / g.tube_radius), "{:?}", a.populations.vessel);
        assert!(p.labels.data.contains(&0) && p.labels.data.contains(&2));
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(generate_phantom(&PhantomSpec { dims: [2, 8, 8], ..Default::default() }).is_err());
        let spec = PhantomSpec { kind: PhantomKind::SphereTube, dims: [10, 10, 10], ..Default::default() };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn box_blur_preserves_constants_and_mass_inside() {
        let d = [5, 4, 3];
        let ones = vec![1.0; 60];
        assert!(box_blur(&ones, d, 2).iter().all(|v| (v - 1.0).abs() < 1e-15));
        let mut spike = vec![0.0; 60];
        spike[1 + 5 * (1 + 4)] = 27.0;
        let b = box_blur(&spike, d, 1);
        assert!((b[1 + 5 * (1 + 4)] - 1.0).abs() < 1e-12);
    }
}
