//! Surface samples, the outward-normal search and the resulting
//! susceptibility fields.

use serde::{Deserialize, Serialize};

use super::curvature::curvature_tensors;
use super::histogram::{detect_populations, CurvaturePopulations, Population};
use super::hog::axial_angle;
use super::voxelize::{axial_median, voxelize_surface, Grid, SurfaceVoxel};
use super::{normalize, TriMesh, Vec3};
use crate::error::{invalid, Result};
use crate::pyramid::{Dims, Pyramid};
use crate::robust::median_in_place;
use crate::sir::SusceptibilityField;

pub const DEFAULT_MAX_STEPS: usize = 30;

/// Which class indices receive the alignment boost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassRoles {
    /// Boosted by hits from myocardium samples.
    pub epat: usize,
    /// Boosted by hits from vessel samples.
    pub pvat: usize,
    pub n_clas: usize,
}

impl Default for ClassRoles {
    fn default() -> Self {
        Self { epat: 0, pvat: 2, n_clas: 4 }
    }
}

impl ClassRoles {
    fn validate(&self) -> Result<()> {
        if self.epat >= self.n_clas || self.pvat >= self.n_clas || self.epat == self.pvat {
            return Err(invalid(format!("invalid class roles {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurfaceSample {
    pub sample: usize,
    /// Median `|k_max|`, if any voxel of the patch carries curvature.
    pub curvature: Option<f64>,
    pub direction: Option<Vec3>,
    pub normal: Option<Vec3>,
    pub population: Population,
    pub voxels: usize,
}

/// Mesh-derived quantities shared by every resolution.
#[derive(Debug, Clone)]
pub struct SurfaceAnalysis {
    pub grid: Grid,
    pub voxels: Vec<SurfaceVoxel>,
    pub populations: CurvaturePopulations,
    /// Vertices without a curvature estimate.
    pub untyped_vertices: usize,
}

impl SurfaceAnalysis {
    /// Normals, curvature, voxelization and curvature populations of a mesh.
    pub fn new(mesh: &TriMesh, grid: Grid) -> Result<Self> {
        let normals = mesh.vertex_normals();
        let curv = curvature_tensors(mesh, &normals);
        let untyped_vertices = curv.iter().filter(|c| c.is_none()).count();
        if untyped_vertices > 0 {
            log::info!("{untyped_vertices} vertices have no curvature estimate");
        }
        let voxels = voxelize_surface(mesh, &grid, &normals, &curv)?;
        let mags: Vec<f64> = voxels.iter().filter_map(|v| v.curvature.map(|c| c.0)).collect();
        let populations = detect_populations(&mags)?;
        Ok(Self { grid, voxels, populations, untyped_vertices })
    }

    /// Samples of resolution `r` whose patch holds at least one surface voxel.
    pub fn surface_samples(&self, pyramid: &Pyramid, r: usize) -> Result<Vec<SurfaceSample>> {
        surface_samples(pyramid, r, &self.grid, &self.voxels, &self.populations)
    }

    pub fn susceptibilities(
        &self,
        pyramid: &Pyramid,
        r: usize,
        hog_modes: &[Option<f64>],
        roles: ClassRoles,
        max_steps: usize,
    ) -> Result<(SusceptibilityField, SearchSummary)> {
        let surface = self.surface_samples(pyramid, r)?;
        derive_susceptibilities(&surface, pyramid, r, &self.grid, hog_modes, roles, max_steps)
    }
}

/// Groups surface voxels by their sample at resolution `r` and takes
/// per-sample medians.
pub fn surface_samples(
    pyramid: &Pyramid,
    r: usize,
    grid: &Grid,
    voxels: &[SurfaceVoxel],
    populations: &CurvaturePopulations,
) -> Result<Vec<SurfaceSample>> {
    if grid.dims != pyramid.original_dims && grid.dims != pyramid.finest_dims {
        return Err(invalid(format!(
            "grid dims {:?} do not match the pyramid {:?}",
            grid.dims, pyramid.original_dims
        )));
    }
    let layer = pyramid.layer(r)?;
    let e = layer.patch_edge;
    let mut groups: std::collections::BTreeMap<usize, Vec<&SurfaceVoxel>> = Default::default();
    for v in voxels {
        let j = layer.index(v.voxel.map(|c| c / e));
        groups.entry(j).or_default().push(v);
    }
    let entries: Vec<(usize, Vec<&SurfaceVoxel>)> = groups.into_iter().collect();
    Ok(crate::par::map_slice(&entries, |(j, vs)| {
        let mut mags: Vec<f64> = vs.iter().filter_map(|v| v.curvature.map(|c| c.0)).collect();
        let dirs: Vec<Vec3> = vs.iter().filter_map(|v| v.curvature.map(|c| c.1)).collect();
        let normals: Vec<Vec3> = vs.iter().filter_map(|v| v.normal).collect();
        let curvature = (!mags.is_empty()).then(|| median_in_place(&mut mags));
        let normal = if normals.is_empty() {
            None
        } else {
            let mut m = [0.0; 3];
            for (a, slot) in m.iter_mut().enumerate() {
                let mut c: Vec<f64> = normals.iter().map(|n| n[a]).collect();
                *slot = median_in_place(&mut c);
            }
            normalize(m)
        };
        SurfaceSample {
            sample: *j,
            curvature,
            direction: axial_median(&dirs),
            normal,
            population: curvature.map_or(Population::Untyped, |k| populations.classify(k)),
            voxels: vs.len(),
        }
    }))
}

/// Sample of `layer` containing continuous voxel position `p`. A coordinate
/// exactly on a patch border goes to the lower patch.
fn sample_at(p: Vec3, dims: Dims, e: usize) -> Option<Dims> {
    let mut c = [0; 3];
    for a in 0..3 {
        let q = p[a] / e as f64;
        if !(q >= 0.0) || q > dims[a] as f64 {
            return None;
        }
        let f = q.floor();
        let k = if f == q && f > 0.0 { f as usize - 1 } else { f as usize };
        if k >= dims[a] {
            return None;
        }
        c[a] = k;
    }
    Some(c)
}

/// Distinct samples entered by the ray from the centroid of `source` along
/// `direction` (voxel space, unit length), one voxel per step.
pub fn march(pyramid: &Pyramid, r: usize, source: usize, direction: Vec3, max_steps: usize) -> Result<Vec<usize>> {
    let layer = pyramid.layer(r)?;
    let (lo, hi) = layer.patch_bounds(source);
    let start = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]) as f64);
    let mut hits = Vec::new();
    for step in 1..=max_steps {
        let p = [0, 1, 2].map(|a| start[a] + step as f64 * direction[a]);
        let Some(c) = sample_at(p, layer.dims, layer.patch_edge) else { break };
        let j = layer.index(c);
        if j != source && !hits.contains(&j) {
            hits.push(j);
        }
    }
    Ok(hits)
}

/// Normalized susceptibility of one hit: the boosted class gets
/// `exp(|cos(hit - source)|)`, every other class 1.
pub fn hit_susceptibility(hit_angle_deg: f64, source_angle_deg: f64, boosted: usize, n_clas: usize) -> Vec<f64> {
    let boost = (hit_angle_deg - source_angle_deg).to_radians().cos().abs().exp();
    let total = boost + (n_clas - 1) as f64;
    (0..n_clas).map(|c| if c == boosted { boost } else { 1.0 } / total).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SearchSummary {
    pub surface_samples: usize,
    pub myocardium_sources: usize,
    pub vessel_sources: usize,
    pub hit_samples: usize,
    /// Hits ignored because the hit sample has no HOG mode.
    pub undefined_orientation_hits: usize,
}

/// Runs the outward-normal search from every typed surface sample and folds
/// the hits into a susceptibility field. A sample hit several times keeps the
/// per-class maximum of its normalized hit susceptibilities, renormalized;
/// unhit samples are uniform.
pub fn derive_susceptibilities(
    surface: &[SurfaceSample],
    pyramid: &Pyramid,
    r: usize,
    grid: &Grid,
    hog_modes: &[Option<f64>],
    roles: ClassRoles,
    max_steps: usize,
) -> Result<(SusceptibilityField, SearchSummary)> {
    roles.validate()?;
    let n = pyramid.len(r);
    if hog_modes.len() != n {
        return Err(invalid(format!("need {n} HOG modes, got {}", hog_modes.len())));
    }
    let k = roles.n_clas;
    let rays = crate::par::map_slice(surface, |s| -> Result<Vec<(usize, Vec<f64>)>> {
        let boosted = match s.population {
            Population::Myocardium => roles.epat,
            Population::Vessel => roles.pvat,
            Population::Untyped => return Ok(Vec::new()),
        };
        let (Some(normal), Some(dir)) = (s.normal, s.direction) else { return Ok(Vec::new()) };
        // the normal lives in world space; march in voxel units
        let Some(step) = normalize([0, 1, 2].map(|a| normal[a] / grid.spacing[a])) else { return Ok(Vec::new()) };
        if dir[0].hypot(dir[1]) < 1e-9 {
            // no axial azimuth to compare against
            return Ok(Vec::new());
        }
        let src_angle = axial_angle(dir[0], dir[1]);
        Ok(march(pyramid, r, s.sample, step, max_steps)?
            .into_iter()
            .map(|j| (j, hog_modes[j].map(|a| hit_susceptibility(a, src_angle, boosted, k)).unwrap_or_default()))
            .collect())
    });
    let mut acc: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut summary = SearchSummary { surface_samples: surface.len(), ..Default::default() };
    for s in surface {
        match s.population {
            Population::Myocardium => summary.myocardium_sources += 1,
            Population::Vessel => summary.vessel_sources += 1,
            Population::Untyped => {}
        }
    }
    for ray in rays {
        for (j, s) in ray? {
            if s.is_empty() {
                summary.undefined_orientation_hits += 1;
                continue;
            }
            match &mut acc[j] {
                Some(row) => row.iter_mut().zip(&s).for_each(|(a, b)| *a = a.max(*b)),
                slot => *slot = Some(s),
            }
        }
    }
    summary.hit_samples = acc.iter().filter(|a| a.is_some()).count();
    let mut scores = Vec::with_capacity(n * k);
    for row in acc {
        match row {
            Some(r) => scores.extend(r),
            None => scores.extend(std::iter::repeat_n(1.0, k)),
        }
    }
    Ok((SusceptibilityField::from_scores(n, k, scores)?, summary))
}

/// Full mesh path: analysis plus the field for resolution `r`.
pub fn susceptibilities_from_mesh(
    mesh: &TriMesh,
    grid: Grid,
    pyramid: &Pyramid,
    r: usize,
    hog_modes: &[Option<f64>],
    roles: ClassRoles,
) -> Result<(SusceptibilityField, SearchSummary)> {
    SurfaceAnalysis::new(mesh, grid)?.susceptibilities(pyramid, r, hog_modes, roles, DEFAULT_MAX_STEPS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::histogram::Interval;
    use crate::mesh::sphere_tube;
    use crate::pyramid::build_pyramid;

    #[test]
    fn hit_values() {
        let e = std::f64::consts::E;
        let s = hit_susceptibility(30.0, 30.0, 0, 4);
        assert!((s[0] - e / (e + 3.0)).abs() < 1e-15);
        assert!((s[0] - 0.4754).abs() < 5e-5);
        assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let s = hit_susceptibility(90.0, 0.0, 2, 4);
        for v in s {
            assert!((v - 0.25).abs() < 1e-15);
        }
        // 180 degree flips of either angle change nothing
        let a = hit_susceptibility(20.0, 70.0, 0, 4);
        let b = hit_susceptibility(200.0, 70.0, 0, 4);
        let c = hit_susceptibility(20.0, 250.0, 0, 4);
        for i in 0..4 {
            assert!((a[i] - b[i]).abs() < 1e-12 && (a[i] - c[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn border_positions_go_to_lower_patch() {
        assert_eq!(sample_at([3.0, 0.5, 0.5], [2, 2, 2], 3), Some([0, 0, 0]));
        assert_eq!(sample_at([3.01, 0.5, 0.5], [2, 2, 2], 3), Some([1, 0, 0]));
        assert_eq!(sample_at([6.0, 0.5, 0.5], [2, 2, 2], 3), Some([1, 0, 0]));
        assert_eq!(sample_at([6.01, 0.5, 0.5], [2, 2, 2], 3), None);
        assert_eq!(sample_at([-0.1, 0.5, 0.5], [2, 2, 2], 3), None);
    }

    #[test]
    fn march_along_x() {
        let p = build_pyramid([9, 3, 3], 1).unwrap();
        // layer 1 is 3 x 1 x 1; from the first patch center (1.5) steps hit 2.5, 3.5, ...
        let hits = march(&p, 1, 0, [1.0, 0.0, 0.0], 30).unwrap();
        assert_eq!(hits, vec![1, 2]);
        let hits = march(&p, 0, p.layers[0].index([0, 1, 1]), [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(hits, vec![p.layers[0].index([1, 1, 1]), p.layers[0].index([2, 1, 1]), p.layers[0].index([3, 1, 1])]);
    }

    fn fake_populations() -> CurvaturePopulations {
        CurvaturePopulations {
            histogram: crate::mesh::histogram::CurvatureHistogram::new(&[]).unwrap(),
            myocardium: Interval { lo: 0.1, hi: 0.3 },
            vessel: Interval { lo: 0.8, hi: 1.2 },
        }
    }

    fn source(sample: usize, pop: Population, dir: Vec3) -> SurfaceSample {
        SurfaceSample {
            sample,
            curvature: Some(match pop {
                Population::Vessel => 1.0,
                _ => 0.2,
            }),
            direction: Some(dir),
            normal: Some([1.0, 0.0, 0.0]),
            population: pop,
            voxels: 1,
        }
    }

    #[test]
    fn per_class_max_then_normalize() {
        let p = build_pyramid([4, 1, 1], 0).unwrap();
        let grid = Grid::unit([4, 1, 1]);
        let modes = vec![Some(0.0); 4];
        let surface = vec![
            source(0, Population::Myocardium, [1.0, 0.0, 0.0]),
            source(1, Population::Vessel, [1.0, 0.0, 0.0]),
        ];
        let (f, summary) = derive_susceptibilities(&surface, &p, 0, &grid, &modes, ClassRoles::default(), 30).unwrap();
        assert_eq!(summary.hit_samples, 3);
        let e = std::f64::consts::E;
        // sample 1: hit by the myocardium ray only
        assert!((f.row(1)[0] - e / (e + 3.0)).abs() < 1e-12);
        // samples 2 and 3: hit by both rays
        let (a, b) = (e / (e + 3.0), 1.0 / (e + 3.0));
        let total = 2.0 * a + 2.0 * b;
        let want = [a / total, b / total, a / total, b / total];
        for j in [2, 3] {
            for c in 0..4 {
                assert!((f.row(j)[c] - want[c]).abs() < 1e-12);
            }
        }
        // sample 0 is never hit
        assert_eq!(f.row(0), &[0.25; 4]);
        for j in 0..4 {
            assert!((f.row(j).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_modes_and_untyped_sources() {
        let p = build_pyramid([4, 1, 1], 0).unwrap();
        let grid = Grid::unit([4, 1, 1]);
        let modes = vec![None; 4];
        let mut surface = vec![source(0, Population::Myocardium, [0.0, 1.0, 0.0])];
        let (f, summary) = derive_susceptibilities(&surface, &p, 0, &grid, &modes, ClassRoles::default(), 30).unwrap();
        assert_eq!(summary.undefined_orientation_hits, 3);
        assert!(f.values().iter().all(|&v| v == 0.25));
        surface[0].population = Population::Untyped;
        let modes = vec![Some(90.0); 4];
        let (f, _) = derive_susceptibilities(&surface, &p, 0, &grid, &modes, ClassRoles::default(), 30).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn surface_sample_medians() {
        let p = build_pyramid([6, 3, 3], 1).unwrap();
        let grid = Grid::unit([6, 3, 3]);
        let vox = |v: Dims, k: f64| SurfaceVoxel {
            voxel: v,
            curvature: Some((k, [1.0, 0.0, 0.0])),
            normal: Some([0.0, 0.0, 1.0]),
        };
        let voxels = vec![vox([0, 0, 0], 0.2), vox([1, 0, 0], 0.25), vox([2, 2, 2], 0.9), vox([4, 1, 1], 1.0)];
        let s = surface_samples(&p, 1, &grid, &voxels, &fake_populations()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].voxels, 3);
        assert_eq!(s[0].curvature, Some(0.25));
        assert_eq!(s[0].population, Population::Myocardium);
        assert_eq!(s[1].population, Population::Vessel);
        let mut rev = voxels.clone();
        rev.reverse();
        assert_eq!(surface_samples(&p, 1, &grid, &rev, &fake_populations()).unwrap(), s);
    }

    #[test]
    fn sphere_tube_populations() {
        let (big, small) = (6.0, 1.0);
        let mesh = sphere_tube([10.0, 10.0, 10.0], big, small, 12.0, [10.0, 10.0, 16.5]);
        let analysis = SurfaceAnalysis::new(&mesh, Grid::unit([20, 20, 30])).unwrap();
        let p = &analysis.populations;
        assert!(p.myocardium.contains(1.0 / big), "{:?}", p.myocardium);
        assert!(p.vessel.contains(1.0 / small), "{:?}", p.vessel);
    }

    #[test]
    fn single_sphere_has_one_population() {
        let mesh = super::super::icosphere(6.0, 4).translated([10.0; 3]);
        let err = SurfaceAnalysis::new(&mesh, Grid::unit([20, 20, 20])).unwrap_err();
        assert_eq!(err.kind(), "population-detection");
    }
}
