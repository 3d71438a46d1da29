//! Multiresolution sample lattice.
//!
//! Layer `r = 0` holds one sample per voxel. Layer `r >= 1` holds cubic patches
//! with an edge of `3 * 2^(r-1)` voxels, so each layer-1 sample has 27
//! children and every coarser sample has 8. Samples are indexed row-major
//! with x fastest.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Dims = [usize; 3];

/// Voxels per patch edge at resolution `r`.
pub fn patch_edge(r: usize) -> usize {
    if r == 0 {
        1
    } else {
        3 << (r - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub resolution: usize,
    pub dims: Dims,
    pub patch_edge: usize,
}

impl Layer {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, c: Dims) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    pub fn coords(&self, j: usize) -> Dims {
        let x = j % self.dims[0];
        let yz = j / self.dims[0];
        [x, yz % self.dims[1], yz / self.dims[1]]
    }

    /// Half-open voxel box `[lo, hi)` covered by sample `j` at the finest scale.
    pub fn patch_bounds(&self, j: usize) -> (Dims, Dims) {
        let c = self.coords(j);
        let e = self.patch_edge;
        let lo = [c[0] * e, c[1] * e, c[2] * e];
        (lo, [lo[0] + e, lo[1] + e, lo[2] + e])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pyramid {
    pub n_lay: usize,
    /// Voxel dimensions as supplied, before padding.
    pub original_dims: Dims,
    /// Voxel dimensions after padding to a multiple of the coarsest patch edge.
    pub finest_dims: Dims,
    /// `layers[r]` for `r = 0..=n_lay`.
    pub layers: Vec<Layer>,
}

/// Builds the sample lattice for all resolutions `0..=n_lay`.
///
/// Dimensions that are not a multiple of the coarsest patch edge are padded
/// at the high-index faces.
pub fn build_pyramid(dims_finest: Dims, n_lay: usize) -> Result<Pyramid> {
    if dims_finest.contains(&0) {
        return Err(invalid(format!("zero dimension in {dims_finest:?}")));
    }
    if n_lay > 20 {
        return Err(invalid(format!("n_lay = {n_lay} is unreasonably deep")));
    }
    let coarsest = patch_edge(n_lay);
    let padded = dims_finest.map(|d| d.div_ceil(coarsest) * coarsest);
    let layers = (0..=n_lay)
        .map(|r| {
            let e = patch_edge(r);
            Layer {
                resolution: r,
                dims: padded.map(|d| d / e),
                patch_edge: e,
            }
        })
        .collect();
    Ok(Pyramid {
        n_lay,
        original_dims: dims_finest,
        finest_dims: padded,
        layers,
    })
}

impl Pyramid {
    pub fn layer(&self, r: usize) -> Result<&Layer> {
        self.layers
            .get(r)
            .ok_or_else(|| Error::OutOfHierarchy(format!("resolution {r} > n_lay = {}", self.n_lay)))
    }

    pub fn len(&self, r: usize) -> usize {
        self.layers.get(r).map_or(0, Layer::len)
    }

    /// Whether finest-scale voxel `v` lies in the padding region.
    pub fn is_padding(&self, v: Dims) -> bool {
        (0..3).any(|a| v[a] >= self.original_dims[a])
    }

    fn check_index(&self, r: usize, j: usize) -> Result<&Layer> {
        let layer = self.layer(r)?;
        if j >= layer.len() {
            return Err(invalid(format!(
                "sample {j} out of range at resolution {r} ({} samples)",
                layer.len()
            )));
        }
        Ok(layer)
    }

    /// In-bounds 26-connected neighbours of sample `j`, ordered by offset
    /// (z outermost, x innermost).
    pub fn neighbors_26(&self, r: usize, j: usize) -> Result<Vec<usize>> {
        let layer = self.check_index(r, j)?;
        Ok(lattice_neighbors(layer.dims, j).map(|(k, _)| k).collect())
    }

    /// Integer ratio between patch edges of layers `r + 1` and `r`.
    fn edge_ratio(r: usize) -> usize {
        if r == 0 {
            3
        } else {
            2
        }
    }

    pub fn parent_of(&self, r: usize, j: usize) -> Result<usize> {
        if r >= self.n_lay {
            return Err(Error::OutOfHierarchy(format!(
                "resolution {r} is the coarsest layer and has no parents"
            )));
        }
        let layer = self.check_index(r, j)?;
        let ratio = Self::edge_ratio(r);
        let c = layer.coords(j);
        Ok(self.layers[r + 1].index(c.map(|v| v / ratio)))
    }

    pub fn children_of(&self, r: usize, j: usize) -> Result<Vec<usize>> {
        if r == 0 {
            return Err(Error::OutOfHierarchy(
                "resolution 0 is the finest layer and has no children".into(),
            ));
        }
        let layer = self.check_index(r, j)?;
        let ratio = Self::edge_ratio(r - 1);
        let child = &self.layers[r - 1];
        let c = layer.coords(j);
        let mut out = Vec::with_capacity(ratio * ratio * ratio);
        for dz in 0..ratio {
            for dy in 0..ratio {
                for dx in 0..ratio {
                    out.push(child.index([
                        c[0] * ratio + dx,
                        c[1] * ratio + dy,
                        c[2] * ratio + dz,
                    ]));
                }
            }
        }
        Ok(out)
    }

    /// Parent index of every sample at `r`, in sample order.
    pub fn parent_map(&self, r: usize) -> Result<Vec<usize>> {
        let n = self.layer(r)?.len();
        (0..n).map(|j| self.parent_of(r, j)).collect()
    }

    pub fn topology(&self, r: usize) -> Result<NeighborhoodTopology> {
        Ok(NeighborhoodTopology::lattice(self.layer(r)?.dims))
    }
}

/// The 26 lattice offsets, z outermost and x innermost; slot ids index this table.
pub const OFFSETS_26: [[i64; 3]; 26] = {
    let mut out = [[0i64; 3]; 26];
    let mut n = 0;
    let mut dz = -1;
    while dz <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dx = -1;
            while dx <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

fn lattice_neighbors(dims: Dims, j: usize) -> impl Iterator<Item = (usize, u8)> {
    let x = (j % dims[0]) as i64;
    let yz = j / dims[0];
    let y = (yz % dims[1]) as i64;
    let z = (yz / dims[1]) as i64;
    OFFSETS_26.iter().enumerate().filter_map(move |(slot, o)| {
        let (nx, ny, nz) = (x + o[0], y + o[1], z + o[2]);
        let inside = nx >= 0
            && ny >= 0
            && nz >= 0
            && (nx as usize) < dims[0]
            && (ny as usize) < dims[1]
            && (nz as usize) < dims[2];
        inside.then(|| {
            (
                nx as usize + dims[0] * (ny as usize + dims[1] * nz as usize),
                slot as u8,
            )
        })
    })
}

/// Symmetric adjacency over the samples of one resolution, in CSR layout.
///
/// Every adjacency entry carries a slot id. On lattices the slot is the index
/// into [`OFFSETS_26`]; on graphs built from edge lists it is the position of
/// the neighbour in the sorted adjacency row.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodTopology {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    slots: Vec<u8>,
    n_slots: usize,
}

impl NeighborhoodTopology {
    pub fn lattice(dims: Dims) -> Self {
        let n: usize = dims.iter().product();
        let rows: Vec<Vec<(usize, u8)>> =
            crate::par::map_range(n, |j| lattice_neighbors(dims, j).collect());
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut neighbors = Vec::with_capacity(n * 26);
        let mut slots = Vec::with_capacity(n * 26);
        for row in rows {
            for (k, s) in row {
                neighbors.push(k);
                slots.push(s);
            }
            offsets.push(neighbors.len());
        }
        Self {
            offsets,
            neighbors,
            slots,
            n_slots: 26,
        }
    }

    /// Builds an undirected topology from an edge list; duplicates collapse.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut rows = vec![Vec::new(); n];
        for &(j, k) in edges {
            if j >= n || k >= n {
                return Err(invalid(format!("edge ({j},{k}) out of range for {n} samples")));
            }
            if j == k {
                return Err(invalid(format!("self-loop at sample {j}")));
            }
            rows[j].push(k);
            rows[k].push(j);
        }
        let mut offsets = vec![0];
        let mut neighbors = Vec::new();
        let mut slots = Vec::new();
        let mut n_slots = 0;
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
            n_slots = n_slots.max(row.len());
            for (s, &k) in row.iter().enumerate() {
                neighbors.push(k);
                slots.push(s.min(255) as u8);
            }
            offsets.push(neighbors.len());
        }
        Ok(Self {
            offsets,
            neighbors,
            slots,
            n_slots: n_slots.min(256),
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.neighbors[self.offsets[j]..self.offsets[j + 1]]
    }

    pub fn slots(&self, j: usize) -> &[u8] {
        &self.slots[self.offsets[j]..self.offsets[j + 1]]
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn degree(&self, j: usize) -> usize {
        self.offsets[j + 1] - self.offsets[j]
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Undirected edges with `j < k`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).flat_map(move |j| {
            self.neighbors(j)
                .iter()
                .filter(move |&&k| j < k)
                .map(move |&k| (j, k))
        })
    }
}
