//! Coarse-to-fine evaluation of an unsigned distance field on a sparse
//! lattice and marching cubes on the `tau` level set.
//!
//! The grid covers the normalized cube `[-0.5, 0.5]^3` padded by one root
//! voxel on every side. All corner positions are computed from integer
//! coordinates on the finest lattice, so a corner has the same position
//! (and the same field value) no matter which level first touches it.

use std::collections::HashMap;

use thiserror::Error;

use crate::field::{Field, FieldError};
use crate::geometry::{Mesh, Point3};
use crate::mc_tables::{CORNERS, EDGES, EDGE_TABLE, TRIANGLE_TABLE};

/// Upper bound on voxels per axis at the finest level.
pub const MAX_CELLS_PER_AXIS: usize = 4096;

/// Triangles with area at or below this are dropped.
pub const MIN_TRIANGLE_AREA: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum MesherError {
    #[error("invalid mesher configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Sparse corner values of a hierarchically refined lattice.
#[derive(Debug, Clone)]
pub struct DistanceGrid {
    initial_res: usize,
    levels: u32,
    /// Voxels per axis at the finest level.
    cells: usize,
    origin: f64,
    root_spacing: f64,
    values: HashMap<u64, f64>,
    /// Retained voxels per level, as minimum corners on the finest lattice.
    retained: Vec<Vec<[u32; 3]>>,
}

fn validate(initial_res: usize, levels: u32) -> Result<usize, MesherError> {
    if initial_res < 2 {
        return Err(MesherError::Config("initial resolution must be at least 2".into()));
    }
    let cells = (initial_res + 2)
        .checked_mul(1usize.checked_shl(levels).unwrap_or(usize::MAX))
        .filter(|&c| levels < 16 && c <= MAX_CELLS_PER_AXIS)
        .ok_or_else(|| {
            MesherError::Config(format!(
                "({initial_res} + 2) * 2^{levels} voxels per axis exceeds {MAX_CELLS_PER_AXIS}"
            ))
        })?;
    Ok(cells)
}

impl DistanceGrid {
    fn empty(initial_res: usize, levels: u32) -> Result<Self, MesherError> {
        let cells = validate(initial_res, levels)?;
        let root_spacing = 1.0 / initial_res as f64;
        Ok(Self {
            initial_res,
            levels,
            cells,
            origin: -0.5 - root_spacing,
            root_spacing,
            values: HashMap::new(),
            retained: Vec::new(),
        })
    }

    /// Evaluates every corner of the finest lattice and retains every voxel
    /// at every level.
    pub fn dense<F: Field + ?Sized>(field: &F, initial_res: usize, levels: u32) -> Result<Self, MesherError> {
        let mut grid = Self::empty(initial_res, levels)?;
        let m = grid.cells as u32 + 1;
        let mut keys = Vec::with_capacity((m as usize).pow(3));
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    keys.push(grid.key([i, j, k]));
                }
            }
        }
        grid.evaluate(field, keys)?;
        for level in 0..=levels {
            let stride = grid.stride(level);
            let n = grid.cells as u32 / stride;
            let mut vox = Vec::with_capacity((n as usize).pow(3));
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        vox.push([i * stride, j * stride, k * stride]);
                    }
                }
            }
            grid.retained.push(vox);
        }
        Ok(grid)
    }

    pub fn initial_res(&self) -> usize {
        self.initial_res
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    /// Voxels per axis at the finest level.
    pub fn cells_per_axis(&self) -> usize {
        self.cells
    }

    /// Finest lattice spacing.
    pub fn spacing(&self) -> f64 {
        self.level_spacing(self.levels)
    }

    /// Voxel edge length at `level` (0 is the root level).
    pub fn level_spacing(&self, level: u32) -> f64 {
        self.root_spacing / (1u64 << level) as f64
    }

    /// Voxel edge length at `level` in finest-lattice units.
    pub fn stride(&self, level: u32) -> u32 {
        1 << (self.levels - level)
    }

    /// Number of distinct corners evaluated.
    pub fn evaluations(&self) -> usize {
        self.values.len()
    }

    /// Corner count of the full finest lattice.
    pub fn dense_corner_count(&self) -> usize {
        (self.cells + 1).pow(3)
    }

    /// Retained voxels at `level`, sorted, as minimum corners on the finest
    /// lattice.
    pub fn retained(&self, level: u32) -> &[[u32; 3]] {
        &self.retained[level as usize]
    }

    pub fn corner_position(&self, idx: [u32; 3]) -> Point3 {
        let h = self.spacing();
        Point3::new(
            self.origin + idx[0] as f64 * h,
            self.origin + idx[1] as f64 * h,
            self.origin + idx[2] as f64 * h,
        )
    }

    /// Field value at a finest-lattice corner, `None` if never evaluated.
    pub fn get(&self, idx: [u32; 3]) -> Option<f64> {
        self.values.get(&self.key(idx)).copied()
    }

    /// Field value at a corner with `+inf` for corners never evaluated.
    pub fn value(&self, idx: [u32; 3]) -> f64 {
        self.get(idx).unwrap_or(f64::INFINITY)
    }

    fn key(&self, idx: [u32; 3]) -> u64 {
        let m = self.cells as u64 + 1;
        (idx[0] as u64 * m + idx[1] as u64) * m + idx[2] as u64
    }

    fn unkey(&self, key: u64) -> [u32; 3] {
        let m = self.cells as u64 + 1;
        [(key / (m * m)) as u32, (key / m % m) as u32, (key % m) as u32]
    }

    /// Evaluates the given corners that are not yet known, in sorted order.
    fn evaluate<F: Field + ?Sized>(&mut self, field: &F, mut keys: Vec<u64>) -> Result<(), MesherError> {
        keys.retain(|k| !self.values.contains_key(k));
        keys.sort_unstable();
        keys.dedup();
        let pts: Vec<Point3> = keys.iter().map(|&k| self.corner_position(self.unkey(k))).collect();
        let vals = field.udf_batch(&pts)?;
        self.values.reserve(keys.len());
        for (k, v) in keys.into_iter().zip(vals) {
            self.values.insert(k, v);
        }
        Ok(())
    }

    fn min_corner(&self, voxel: [u32; 3], stride: u32) -> f64 {
        CORNERS
            .iter()
            .map(|o| self.value([voxel[0] + o[0] * stride, voxel[1] + o[1] * stride, voxel[2] + o[2] * stride]))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Coarse-to-fine evaluation: a voxel at level `i` is kept when its smallest
/// corner value is below the level spacing `h_i`, and only kept voxels are
/// split for the next level.
pub fn extract_grid<F: Field + ?Sized>(field: &F, initial_res: usize, levels: u32) -> Result<DistanceGrid, MesherError> {
    let mut grid = DistanceGrid::empty(initial_res, levels)?;
    let n0 = (initial_res + 2) as u32;
    let s0 = grid.stride(0);
    let mut candidates = Vec::with_capacity((n0 as usize).pow(3));
    for i in 0..n0 {
        for j in 0..n0 {
            for k in 0..n0 {
                candidates.push([i * s0, j * s0, k * s0]);
            }
        }
    }
    for level in 0..=levels {
        let stride = grid.stride(level);
        let h = grid.level_spacing(level);
        let mut keys = Vec::with_capacity(candidates.len() * 8);
        for v in &candidates {
            for o in CORNERS {
                keys.push(grid.key([v[0] + o[0] * stride, v[1] + o[1] * stride, v[2] + o[2] * stride]));
            }
        }
        grid.evaluate(field, keys)?;
        let kept: Vec<[u32; 3]> = candidates.into_iter().filter(|&v| grid.min_corner(v, stride) < h).collect();
        log::debug!("level {level}: kept {} voxels, {} corners evaluated", kept.len(), grid.evaluations());
        candidates = Vec::new();
        if level < levels {
            let half = stride / 2;
            candidates.reserve(kept.len() * 8);
            for v in &kept {
                for o in CORNERS {
                    candidates.push([v[0] + o[0] * half, v[1] + o[1] * half, v[2] + o[2] * half]);
                }
            }
            candidates.sort_unstable();
        }
        grid.retained.push(kept);
    }
    Ok(grid)
}

/// Marching cubes on `udf - tau` over the retained finest-level voxels.
/// A corner below `tau` is inside. Vertices on shared edges are merged.
pub fn marching_cubes(grid: &DistanceGrid, tau: f64) -> Mesh {
    let mut vertices: Vec<Point3> = Vec::new();
    let mut edge_vertex: HashMap<u64, u32> = HashMap::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    for &v in grid.retained(grid.levels) {
        let idx = CORNERS.map(|o| [v[0] + o[0], v[1] + o[1], v[2] + o[2]]);
        let vals = idx.map(|c| grid.get(c));
        // Unevaluated corners count as outside; such a cell contributes
        // nothing useful, so it is skipped.
        if vals.iter().any(|g| g.is_none()) {
            continue;
        }
        let g = vals.map(|g| g.unwrap_or(f64::INFINITY) - tau);
        let case = g.iter().enumerate().fold(0usize, |acc, (i, &gi)| acc | (((gi < 0.0) as usize) << i));
        if EDGE_TABLE[case] == 0 {
            continue;
        }
        let mut edge_ids = [u32::MAX; 12];
        for (e, &[a, b]) in EDGES.iter().enumerate() {
            if EDGE_TABLE[case] & (1 << e) == 0 {
                continue;
            }
            let lo = idx[a].min(idx[b]);
            let axis = (0..3).find(|&d| idx[a][d] != idx[b][d]).unwrap_or(0);
            let key = grid.key(lo) * 3 + axis as u64;
            edge_ids[e] = *edge_vertex.entry(key).or_insert_with(|| {
                let t = (g[a] / (g[a] - g[b])).clamp(0.0, 1.0);
                let pa = grid.corner_position(idx[a]);
                let pb = grid.corner_position(idx[b]);
                vertices.push(pa + (pb - pa) * t);
                (vertices.len() - 1) as u32
            });
        }
        for tri in TRIANGLE_TABLE[case].chunks(3) {
            if tri[0] < 0 {
                break;
            }
            let t = [edge_ids[tri[0] as usize], edge_ids[tri[1] as usize], edge_ids[tri[2] as usize]];
            let [a, b, c] = t.map(|i| vertices[i as usize]);
            if 0.5 * (b - a).cross(c - a).norm() > MIN_TRIANGLE_AREA {
                triangles.push(t);
            }
        }
    }
    compact(Mesh { vertices, triangles })
}

/// Drops vertices no triangle references.
fn compact(mesh: Mesh) -> Mesh {
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    let triangles = mesh
        .triangles
        .iter()
        .map(|t| {
            t.map(|i| {
                if remap[i as usize] == u32::MAX {
                    remap[i as usize] = vertices.len() as u32;
                    vertices.push(mesh.vertices[i as usize]);
                }
                remap[i as usize]
            })
        })
        .collect();
    Mesh { vertices, triangles }
}

/// Sparse grid extraction followed by marching cubes. `tau` defaults to half
/// the finest spacing.
pub fn extract_mesh<F: Field + ?Sized>(
    field: &F,
    initial_res: usize,
    levels: u32,
    tau: Option<f64>,
) -> Result<(Mesh, DistanceGrid), MesherError> {
    let grid = extract_grid(field, initial_res, levels)?;
    let tau = tau.unwrap_or(0.5 * grid.spacing());
    if !(tau.is_finite() && tau > 0.0) {
        return Err(MesherError::Config(format!("tau must be positive and finite, got {tau}")));
    }
    let mesh = marching_cubes(&grid, tau);
    Ok((mesh, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::AnalyticField;
    use crate::geometry::{Direction3, Vec3};

    fn sphere(r: f64) -> AnalyticField {
        AnalyticField::Sphere { center: Vec3::new(0.01, -0.013, 0.007), radius: r }
    }

    #[test]
    fn tables_agree_with_corner_signs() {
        for case in 0..256usize {
            let inside = |c: usize| case & (1 << c) != 0;
            let mut crossed = 0u16;
            for (e, &[a, b]) in EDGES.iter().enumerate() {
                if inside(a) != inside(b) {
                    crossed |= 1 << e;
                }
            }
            assert_eq!(crossed, EDGE_TABLE[case], "case {case}");
            let row = &TRIANGLE_TABLE[case];
            let n = row.iter().position(|&e| e < 0).unwrap_or(16);
            assert_eq!(n % 3, 0);
            assert!(row[n..].iter().all(|&e| e == -1));
            for &e in &row[..n] {
                assert!(crossed & (1 << e) != 0, "case {case} uses uncrossed edge {e}");
            }
        }
        for &[a, b] in &EDGES {
            let d: u32 = (0..3).map(|k| CORNERS[a][k].abs_diff(CORNERS[b][k])).sum();
            assert_eq!(d, 1);
        }
    }

    #[test]
    fn rejects_bad_configuration() {
        let f = sphere(0.3);
        assert!(matches!(extract_grid(&f, 1, 2), Err(MesherError::Config(_))));
        assert!(matches!(extract_grid(&f, 1024, 3), Err(MesherError::Config(_))));
        assert!(matches!(extract_mesh(&f, 4, 1, Some(-1.0)), Err(MesherError::Config(_))));
        assert!(matches!(extract_mesh(&f, 4, 1, Some(f64::NAN)), Err(MesherError::Config(_))));
    }

    #[test]
    fn constant_field_gives_empty_mesh() {
        let (mesh, grid) = extract_mesh(&AnalyticField::Constant(1.0), 8, 2, None).unwrap();
        assert!(mesh.is_empty());
        assert!(grid.retained(0).is_empty());
        assert_eq!(grid.evaluations(), 11usize.pow(3));
    }

    #[test]
    fn plane_gives_two_flat_sheets() {
        let f = AnalyticField::Plane { point: Vec3::ZERO, normal: Direction3::Z };
        let grid = DistanceGrid::dense(&f, 16, 0).unwrap();
        let h = grid.spacing();
        let tau = 0.5 * h;
        let mesh = marching_cubes(&grid, tau);
        assert!(!mesh.is_empty());
        let (mut above, mut below) = (0, 0);
        for v in &mesh.vertices {
            assert!((v.z.abs() - tau).abs() <= h * h / 8.0, "vertex {v:?}");
            if v.z > 0.0 {
                above += 1;
            } else {
                below += 1;
            }
        }
        assert_eq!(above, below);
    }

    #[test]
    fn sphere_vertices_lie_in_band() {
        let r = 0.3;
        let f = sphere(r);
        let (mesh, grid) = extract_mesh(&f, 8, 2, None).unwrap();
        let h = grid.spacing();
        let tau = 0.5 * h;
        assert!(!mesh.is_empty());
        for v in &mesh.vertices {
            let d = f.closest(*v).0;
            assert!(d >= tau - h && d <= tau + h, "vertex {v:?} at distance {d}");
        }
    }

    #[test]
    fn sphere_shells_are_watertight() {
        let (mesh, _) = extract_mesh(&sphere(0.3), 8, 2, None).unwrap();
        let mut edges: HashMap<(u32, u32), usize> = HashMap::new();
        for t in &mesh.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        assert!(edges.values().all(|&c| c == 2));
    }

    #[test]
    fn corners_shared_across_levels_are_evaluated_once() {
        let f = crate::field::CountingField::new(sphere(0.3));
        let grid = extract_grid(&f, 8, 2).unwrap();
        assert_eq!(f.udf_calls() as usize, grid.evaluations());
    }
}
