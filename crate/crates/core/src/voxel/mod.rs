//! Voxelized volumes on a shared grid.
//!
//! Each registered mesh gets a [`MeshId`]. Surface voxelization tags every cell whose
//! box touches a triangle (the shell); the scan-line fill then tags every cell whose
//! center lies inside the mesh (the solid). Volumes and overlaps count solid cells, so
//! a closed mesh contributes exactly its center-sampled volume.
//!
//! Cell boundaries sit on multiples of the spacing in the grid's coordinate frame.
//! Two grids with the same spacing therefore share cells wherever they overlap, and a
//! mesh's occupied cells do not depend on what else was registered.

mod tribox;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::mesh::{ray_triangle, Aabb, MeshModel, SpatialIndex};
use crate::MM3_PER_LITRE;

pub use tribox::triangle_box_overlap;

pub const DEFAULT_SPACING_MM: f64 = 15.0;
/// Upper bound on grid size, to catch runaway spacing values.
pub const MAX_CELLS: usize = 64_000_000;
pub const MAX_MESHES: u8 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoxelError {
    #[error("grid needs at least one mesh")]
    NoMeshes,
    #[error("voxel spacing must be positive and finite, got {0}")]
    Spacing(f64),
    #[error("grid of {0} cells exceeds the limit")]
    TooLarge(usize),
    #[error("mesh id {0} out of range (max {max})", max = MAX_MESHES - 1)]
    IdOutOfRange(u8),
    #[error("mesh id {0} already registered")]
    DuplicateId(u8),
    #[error("mesh id {0} not registered")]
    UnknownId(u8),
    #[error("mesh id {0} has no surface voxels; voxelize the surface first")]
    NotSurfaced(u8),
    #[error("mesh id {0} already filled")]
    AlreadyFilled(u8),
    #[error("mesh `{0}` is not closed; scan-line fill needs a closed surface")]
    OpenMesh(String),
    #[error("overlap query needs at least one mesh id")]
    EmptyQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MeshId(u8);

impl MeshId {
    pub fn new(id: u8) -> Result<Self, VoxelError> {
        if id >= MAX_MESHES {
            return Err(VoxelError::IdOutOfRange(id));
        }
        Ok(Self(id))
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

/// Set of mesh ids stored in one cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct MeshIdSet(u64);

impl MeshIdSet {
    pub fn insert(&mut self, id: MeshId) {
        self.0 |= 1 << id.0;
    }
    pub fn contains(&self, id: MeshId) -> bool {
        self.0 & (1 << id.0) != 0
    }
    pub fn is_superset(&self, other: MeshIdSet) -> bool {
        self.0 & other.0 == other.0
    }
    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }
    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }
    pub fn union(self, other: MeshIdSet) -> MeshIdSet {
        MeshIdSet(self.0 | other.0)
    }
    pub fn iter(&self) -> impl Iterator<Item = MeshId> + '_ {
        (0..MAX_MESHES).filter(|&i| self.0 & (1 << i) != 0).map(MeshId)
    }
}

impl FromIterator<MeshId> for MeshIdSet {
    fn from_iter<I: IntoIterator<Item = MeshId>>(iter: I) -> Self {
        let mut s = MeshIdSet::default();
        for id in iter {
            s.insert(id);
        }
        s
    }
}

/// What to do when `fill_interior` meets an open mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OpenMeshPolicy {
    #[default]
    Reject,
    /// Classify every cell center by ray parity. Slower, and only meaningful for
    /// surfaces with small gaps.
    RayParity,
}

/// Counts from one fill; `ambiguous_rows` rows fell back to per-run inside tests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FillStats {
    pub solid_cells: usize,
    pub rows: usize,
    pub ambiguous_rows: usize,
}

/// Global lattice coordinates of a cell: the cell spans `[k, k+1) * spacing` per axis.
pub type LatticeCell = [i64; 3];

#[derive(Debug, Clone)]
pub struct VoxelGrid {
    spacing: f64,
    lattice_min: LatticeCell,
    dims: [usize; 3],
    shell: Vec<MeshIdSet>,
    solid: Vec<MeshIdSet>,
    surfaced: MeshIdSet,
    filled: MeshIdSet,
}

impl VoxelGrid {
    /// Grid covering the union bounds of `meshes` plus one cell of margin.
    pub fn build(meshes: &[&MeshModel], spacing: f64) -> Result<Self, VoxelError> {
        if meshes.is_empty() {
            return Err(VoxelError::NoMeshes);
        }
        let bounds = meshes.iter().fold(Aabb::empty(), |acc, m| acc.union(&m.bounds()));
        Self::covering(&bounds, spacing)
    }

    pub fn covering(bounds: &Aabb, spacing: f64) -> Result<Self, VoxelError> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(VoxelError::Spacing(spacing));
        }
        if bounds.is_empty() {
            return Err(VoxelError::NoMeshes);
        }
        let mut lattice_min = [0i64; 3];
        let mut dims = [0usize; 3];
        for k in 0..3 {
            let lo = (bounds.min[k] / spacing).floor() as i64 - 1;
            let hi = (bounds.max[k] / spacing).ceil() as i64 + 1;
            lattice_min[k] = lo;
            dims[k] = (hi - lo).max(1) as usize;
        }
        let total = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .unwrap_or(usize::MAX);
        if total > MAX_CELLS {
            return Err(VoxelError::TooLarge(total));
        }
        Ok(Self {
            spacing,
            lattice_min,
            dims,
            shell: vec![MeshIdSet::default(); total],
            solid: vec![MeshIdSet::default(); total],
            surfaced: MeshIdSet::default(),
            filled: MeshIdSet::default(),
        })
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn cell_count(&self) -> usize {
        self.shell.len()
    }

    /// Corner of cell (0, 0, 0).
    pub fn origin(&self) -> Point3<f64> {
        Point3::new(
            self.lattice_min[0] as f64 * self.spacing,
            self.lattice_min[1] as f64 * self.spacing,
            self.lattice_min[2] as f64 * self.spacing,
        )
    }

    pub fn cell_volume_litres(&self) -> f64 {
        self.spacing.powi(3) / MM3_PER_LITRE
    }

    pub fn registered(&self) -> MeshIdSet {
        self.surfaced
    }

    /// Flat index, x fastest.
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.dims[0];
        let y = (index / self.dims[0]) % self.dims[1];
        let z = index / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn cell_center(&self, x: usize, y: usize, z: usize) -> Point3<f64> {
        let c = |k: usize, i: usize| (self.lattice_min[k] as f64 + i as f64 + 0.5) * self.spacing;
        Point3::new(c(0, x), c(1, y), c(2, z))
    }

    pub fn lattice_cell(&self, index: usize) -> LatticeCell {
        let [x, y, z] = self.coords(index);
        [
            self.lattice_min[0] + x as i64,
            self.lattice_min[1] + y as i64,
            self.lattice_min[2] + z as i64,
        ]
    }

    pub fn shell_ids(&self, index: usize) -> MeshIdSet {
        self.shell[index]
    }

    pub fn solid_ids(&self, index: usize) -> MeshIdSet {
        self.solid[index]
    }

    /// Lowest id not yet registered.
    pub fn next_id(&self) -> Result<MeshId, VoxelError> {
        (0..MAX_MESHES)
            .map(MeshId)
            .find(|id| !self.surfaced.contains(*id))
            .ok_or(VoxelError::IdOutOfRange(MAX_MESHES))
    }

    /// Cell index range `[lo, hi]` along axis `k` touched by the interval `[a, b]`.
    fn cell_range(&self, k: usize, a: f64, b: f64) -> Option<(usize, usize)> {
        let lo = (a / self.spacing).floor() as i64 - self.lattice_min[k];
        let hi = (b / self.spacing).floor() as i64 - self.lattice_min[k];
        let max = self.dims[k] as i64 - 1;
        if hi < 0 || lo > max {
            return None;
        }
        Some((lo.clamp(0, max) as usize, hi.clamp(0, max) as usize))
    }

    /// Tags every cell whose box intersects at least one triangle of `mesh`.
    pub fn voxelize_surface(&mut self, mesh: &MeshModel, id: MeshId) -> Result<usize, VoxelError> {
        if self.surfaced.contains(id) {
            return Err(VoxelError::DuplicateId(id.0));
        }
        let half = 0.5 * self.spacing;
        let mut tagged = 0;
        for t in 0..mesh.triangle_count() {
            let tri = mesh.triangle(t);
            let b = Aabb::from_points(tri.iter());
            // Widened by a hair: the box test is inclusive at cell faces.
            let ranges: Option<Vec<(usize, usize)>> = (0..3)
                .map(|k| self.cell_range(k, b.min[k] - half * 1e-9, b.max[k] + half * 1e-9))
                .collect();
            let Some(r) = ranges else { continue };
            for z in r[2].0..=r[2].1 {
                for y in r[1].0..=r[1].1 {
                    for x in r[0].0..=r[0].1 {
                        let i = self.index(x, y, z);
                        if self.shell[i].contains(id) {
                            continue;
                        }
                        if triangle_box_overlap(&self.cell_center(x, y, z), half, &tri) {
                            self.shell[i].insert(id);
                            tagged += 1;
                        }
                    }
                }
            }
        }
        self.surfaced.insert(id);
        Ok(tagged)
    }

    /// Tags every cell whose center is inside the mesh, one x-row at a time.
    ///
    /// Each row is a line through cell centers parallel to +x; its crossings with the
    /// surface split it into runs whose inside/outside state flips at every crossing.
    /// Rows where the line grazes an edge or vertex, or where the crossing count comes
    /// out odd, are resolved by a ray-parity test at the first cell of each run of
    /// cells between shell cells. Cells near a crossing get their own parity test.
    pub fn fill_interior(
        &mut self,
        index: &SpatialIndex,
        id: MeshId,
        policy: OpenMeshPolicy,
    ) -> Result<FillStats, VoxelError> {
        if !self.surfaced.contains(id) {
            return Err(VoxelError::NotSurfaced(id.0));
        }
        if self.filled.contains(id) {
            return Err(VoxelError::AlreadyFilled(id.0));
        }
        let closed = index.is_closed();
        if !closed && policy == OpenMeshPolicy::Reject {
            return Err(VoxelError::OpenMesh(index.mesh().name().to_string()));
        }

        let [nx, ny, nz] = self.dims;
        let rows: Vec<(usize, usize)> = (0..nz).flat_map(|z| (0..ny).map(move |y| (y, z))).collect();
        let results: Vec<(Vec<usize>, bool)> = if closed {
            let buckets = self.row_buckets(index);
            rows.par_iter()
                .map(|&(y, z)| self.fill_row(index, id, y, z, &buckets[y + ny * z]))
                .collect()
        } else {
            rows.par_iter()
                .map(|&(y, z)| {
                    let inside = (0..nx)
                        .filter(|&x| index.parity_inside(&self.cell_center(x, y, z)))
                        .map(|x| self.index(x, y, z))
                        .collect();
                    (inside, false)
                })
                .collect()
        };

        let mut stats = FillStats {
            rows: rows.len(),
            ..FillStats::default()
        };
        for (cells, ambiguous) in results {
            stats.ambiguous_rows += ambiguous as usize;
            stats.solid_cells += cells.len();
            for i in cells {
                self.solid[i].insert(id);
            }
        }
        self.filled.insert(id);
        Ok(stats)
    }

    /// Triangle ids whose yz-extent covers each row's center line.
    fn row_buckets(&self, index: &SpatialIndex) -> Vec<Vec<u32>> {
        let [_, ny, nz] = self.dims;
        let mut buckets = vec![Vec::new(); ny * nz];
        let h = self.spacing;
        for t in 0..index.mesh().triangle_count() {
            let b = Aabb::from_points(index.triangle(t).iter());
            // Rows whose center (lattice + 0.5) * h lies in [min, max].
            let row_span = |k: usize| {
                let lo = ((b.min[k] / h - 0.5).ceil() as i64 - self.lattice_min[k]).max(0);
                let hi = ((b.max[k] / h - 0.5).floor() as i64 - self.lattice_min[k]).min(self.dims[k] as i64 - 1);
                (lo, hi)
            };
            let (y0, y1) = row_span(1);
            let (z0, z1) = row_span(2);
            for z in z0..=z1 {
                for y in y0..=y1 {
                    buckets[y as usize + ny * z as usize].push(t as u32);
                }
            }
        }
        buckets
    }

    fn fill_row(&self, index: &SpatialIndex, id: MeshId, y: usize, z: usize, candidates: &[u32]) -> (Vec<usize>, bool) {
        let nx = self.dims[0];
        let start = self.cell_center(0, y, z) - Vector3::x() * self.spacing;
        let mut crossings = Vec::new();
        let mut ambiguous = false;
        for &t in candidates {
            if let Some(hit) = ray_triangle(&start, &Vector3::x(), index.triangle(t as usize)) {
                if hit.edge_proximity() < 1e-9 {
                    ambiguous = true;
                }
                crossings.push(start.x + hit.distance);
            }
        }
        crossings.sort_by(|a, b| a.total_cmp(b));
        if crossings.len() % 2 == 1 {
            ambiguous = true;
        }
        let parity_at = |x: f64| crossings.partition_point(|&c| c < x) % 2 == 1;
        let near_crossing = |x: f64| {
            let i = crossings.partition_point(|&c| c < x);
            let d_hi = crossings.get(i).map_or(f64::INFINITY, |c| c - x);
            let d_lo = if i > 0 { x - crossings[i - 1] } else { f64::INFINITY };
            d_hi.min(d_lo) < 1e-6
        };

        let mut inside_cells = Vec::new();
        let mut x = 0;
        while x < nx {
            let i = self.index(x, y, z);
            if self.shell[i].contains(id) {
                let c = self.cell_center(x, y, z);
                let inside = if ambiguous || near_crossing(c.x) {
                    index.parity_inside(&c)
                } else {
                    parity_at(c.x)
                };
                if inside {
                    inside_cells.push(i);
                }
                x += 1;
                continue;
            }
            // Run of cells untouched by the surface: one state for the whole run.
            let run_start = x;
            while x < nx && !self.shell[self.index(x, y, z)].contains(id) {
                x += 1;
            }
            let c = self.cell_center(run_start, y, z);
            let inside = if ambiguous {
                index.parity_inside(&c)
            } else {
                parity_at(c.x)
            };
            if inside {
                inside_cells.extend((run_start..x).map(|xx| self.index(xx, y, z)));
            }
        }
        (inside_cells, ambiguous)
    }

    /// Surface and interior in one step, with the next free id.
    pub fn add_solid(&mut self, index: &SpatialIndex) -> Result<MeshId, VoxelError> {
        let id = self.next_id()?;
        self.voxelize_surface(index.mesh(), id)?;
        self.fill_interior(index, id, OpenMeshPolicy::Reject)?;
        Ok(id)
    }

    /// Whether `id` counts as present in a cell: solid cells once filled, shell cells
    /// for surfaces that were never filled.
    fn occupancy(&self, index: usize) -> MeshIdSet {
        let shell_only = MeshIdSet(self.surfaced.0 & !self.filled.0);
        MeshIdSet(self.solid[index].0 | (self.shell[index].0 & shell_only.0))
    }

    fn query_set(&self, ids: &[MeshId]) -> Result<MeshIdSet, VoxelError> {
        if ids.is_empty() {
            return Err(VoxelError::EmptyQuery);
        }
        if let Some(id) = ids.iter().find(|id| !self.surfaced.contains(**id)) {
            return Err(VoxelError::UnknownId(id.0));
        }
        Ok(ids.iter().copied().collect())
    }

    pub fn overlap_indices(&self, ids: &[MeshId]) -> Result<Vec<usize>, VoxelError> {
        let want = self.query_set(ids)?;
        Ok((0..self.cell_count())
            .filter(|&i| self.occupancy(i).is_superset(want))
            .collect())
    }

    pub fn overlap_cell_count(&self, ids: &[MeshId]) -> Result<usize, VoxelError> {
        let want = self.query_set(ids)?;
        Ok((0..self.cell_count())
            .filter(|&i| self.occupancy(i).is_superset(want))
            .count())
    }

    /// Volume (litres) of the cells occupied by every mesh in `ids`.
    pub fn overlap_volume(&self, ids: &[MeshId]) -> Result<f64, VoxelError> {
        Ok(self.overlap_cell_count(ids)? as f64 * self.cell_volume_litres())
    }

    /// Centers of the overlap cells, x fastest then y then z.
    pub fn export_overlap_cells(&self, ids: &[MeshId]) -> Result<Vec<Point3<f64>>, VoxelError> {
        Ok(self
            .overlap_indices(ids)?
            .into_iter()
            .map(|i| {
                let [x, y, z] = self.coords(i);
                self.cell_center(x, y, z)
            })
            .collect())
    }

    /// Occupied cells of one mesh in global lattice coordinates, sorted by (z, y, x).
    pub fn occupied_lattice_cells(&self, id: MeshId) -> Result<Vec<LatticeCell>, VoxelError> {
        let cells = self.overlap_indices(&[id])?;
        Ok(cells.into_iter().map(|i| self.lattice_cell(i)).collect())
    }
}

/// Count of cells present in every list. Lists must be sorted by (z, y, x), as
/// returned by [`VoxelGrid::occupied_lattice_cells`].
pub fn count_common_cells(lists: &[&[LatticeCell]]) -> usize {
    let key = |c: &LatticeCell| (c[2], c[1], c[0]);
    let Some((first, rest)) = lists.split_first() else {
        return 0;
    };
    let mut cursors = vec![0usize; rest.len()];
    let mut count = 0;
    'outer: for cell in first.iter() {
        let k = key(cell);
        for (list, cur) in rest.iter().zip(cursors.iter_mut()) {
            while *cur < list.len() && key(&list[*cur]) < k {
                *cur += 1;
            }
            if *cur == list.len() {
                break 'outer;
            }
            if key(&list[*cur]) != k {
                continue 'outer;
            }
        }
        count += 1;
    }
    count
}

/// Occupied lattice cells of one closed mesh at `spacing`.
pub fn solid_cells(index: &SpatialIndex, spacing: f64) -> Result<Vec<LatticeCell>, VoxelError> {
    let mut grid = VoxelGrid::build(&[index.mesh()], spacing)?;
    let id = grid.add_solid(index)?;
    grid.occupied_lattice_cells(id)
}
