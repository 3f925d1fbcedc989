use std::collections::{BTreeSet, HashSet};

use udfkit::field::{AnalyticField, CountingField, Field};
use udfkit::geometry::{Direction3, Point3, Vec3};
use udfkit::mesher::{extract_grid, extract_mesh, DistanceGrid};

const CORNER_OFFSETS: [[u32; 3]; 8] =
    [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1], [1, 0, 1], [0, 1, 1], [1, 1, 1]];

fn sphere() -> AnalyticField {
    AnalyticField::Sphere { center: Vec3::ZERO, radius: 0.4 }
}

fn split_sphere() -> AnalyticField {
    AnalyticField::SplitSphere { center: Vec3::ZERO, radius: 0.4, gap: 0.1 }
}

fn oblique_plane() -> AnalyticField {
    AnalyticField::Plane {
        point: Vec3::new(0.03, -0.02, 0.05),
        normal: Direction3::new(Vec3::new(0.3, -0.5, 0.8)).unwrap(),
    }
}

/// Retained voxel sets per level, recomputed top-down from a dense lattice.
fn dense_oracle(dense: &DistanceGrid) -> Vec<BTreeSet<[u32; 3]>> {
    let levels = dense.levels();
    let mut out: Vec<BTreeSet<[u32; 3]>> = Vec::new();
    for level in 0..=levels {
        let s = dense.stride(level);
        let h = dense.level_spacing(level);
        let candidates: Vec<[u32; 3]> = if level == 0 {
            dense.retained(0).to_vec()
        } else {
            out[level as usize - 1]
                .iter()
                .flat_map(|v| CORNER_OFFSETS.map(|o| [v[0] + o[0] * s, v[1] + o[1] * s, v[2] + o[2] * s]))
                .collect()
        };
        let kept = candidates
            .into_iter()
            .filter(|v| {
                CORNER_OFFSETS
                    .iter()
                    .any(|o| dense.get([v[0] + o[0] * s, v[1] + o[1] * s, v[2] + o[2] * s]).unwrap() < h)
            })
            .collect();
        out.push(kept);
    }
    out
}

fn box_distance_range(c: Point3, lo: Point3, hi: Point3) -> (f64, f64) {
    let mut near = 0.0;
    let mut far = 0.0;
    for k in 0..3 {
        let n = c[k].clamp(lo[k], hi[k]) - c[k];
        let f = (lo[k] - c[k]).abs().max((hi[k] - c[k]).abs());
        near += n * n;
        far += f * f;
    }
    (near.sqrt(), far.sqrt())
}

/// Whether the closed box `[lo, hi]` meets the analytic surface.
fn box_meets_surface(f: &AnalyticField, lo: Point3, hi: Point3) -> bool {
    match f {
        AnalyticField::Sphere { center, radius } => {
            let (near, far) = box_distance_range(*center, lo, hi);
            near <= *radius && *radius <= far
        }
        AnalyticField::SplitSphere { center, radius, gap } => {
            let caps = [(center.z + gap, f64::INFINITY), (f64::NEG_INFINITY, center.z - gap)];
            caps.iter().any(|&(zlo, zhi)| {
                let (a, b) = (lo.z.max(zlo), hi.z.min(zhi));
                if a > b {
                    return false;
                }
                let (near, far) = box_distance_range(*center, Vec3::new(lo.x, lo.y, a), Vec3::new(hi.x, hi.y, b));
                near <= *radius && *radius <= far
            })
        }
        AnalyticField::Plane { point, normal } => {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for o in CORNER_OFFSETS {
                let p = Vec3::new(
                    if o[0] == 0 { lo.x } else { hi.x },
                    if o[1] == 0 { lo.y } else { hi.y },
                    if o[2] == 0 { lo.z } else { hi.z },
                );
                let s = normal.dot(p - *point);
                min = min.min(s);
                max = max.max(s);
            }
            min <= 0.0 && max >= 0.0
        }
        _ => unreachable!("no intersection test for this fixture"),
    }
}

fn voxel_box(grid: &DistanceGrid, v: [u32; 3], stride: u32) -> (Point3, Point3) {
    (grid.corner_position(v), grid.corner_position([v[0] + stride, v[1] + stride, v[2] + stride]))
}

#[test]
fn sparse_grid_matches_dense_oracle_within_budget() {
    for f in [sphere(), split_sphere()] {
        let counted = CountingField::new(&f);
        let sparse = extract_grid(&counted, 16, 3).unwrap();
        let dense = DistanceGrid::dense(&f, 16, 3).unwrap();
        let oracle = dense_oracle(&dense);
        for level in 0..=3 {
            let got: BTreeSet<[u32; 3]> = sparse.retained(level).iter().copied().collect();
            assert_eq!(got.len(), sparse.retained(level).len());
            assert_eq!(got, oracle[level as usize], "level {level} of {f:?}");
        }
        assert!(!sparse.retained(3).is_empty());
        assert_eq!(counted.udf_calls() as usize, sparse.evaluations());
        assert!(4 * sparse.evaluations() <= sparse.dense_corner_count(), "{} evaluations", sparse.evaluations());
        for v in sparse.retained(3) {
            for o in CORNER_OFFSETS {
                let c = [v[0] + o[0], v[1] + o[1], v[2] + o[2]];
                assert_eq!(sparse.get(c).unwrap().to_bits(), dense.get(c).unwrap().to_bits());
            }
        }
    }
}

#[test]
fn surface_voxels_are_never_culled() {
    for f in [sphere(), split_sphere(), oblique_plane()] {
        let grid = extract_grid(&f, 16, 3).unwrap();
        let kept: HashSet<[u32; 3]> = grid.retained(3).iter().copied().collect();
        let n = grid.cells_per_axis() as u32;
        let mut surface_voxels = 0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let v = [i, j, k];
                    let (lo, hi) = voxel_box(&grid, v, 1);
                    if box_meets_surface(&f, lo, hi) {
                        surface_voxels += 1;
                        assert!(kept.contains(&v), "culled surface voxel {v:?} of {f:?}");
                    }
                }
            }
        }
        assert!(surface_voxels > 0);
    }
}

/// Distance from the closed box `[lo, hi]` to the sphere surface.
fn box_sphere_gap(center: Point3, radius: f64, lo: Point3, hi: Point3) -> f64 {
    let (near, far) = box_distance_range(center, lo, hi);
    if near > radius {
        near - radius
    } else if far < radius {
        radius - far
    } else {
        0.0
    }
}

/// Off-surface voxels kept at level i do have kept children at level i + 1.
/// Two levels later only near misses survive: a kept descendant has a corner
/// closer than h_{i+2} to the surface, and off-surface voxels farther than
/// h_{i+2} from it leave no descendants at all.
#[test]
fn false_positive_voxels_thin_out_two_levels_later() {
    let (center, r) = (Vec3::ZERO, 0.4);
    let f = sphere();
    let grid = extract_grid(&f, 16, 3).unwrap();
    let mut kept_children = 0;
    let mut far_misses = 0;
    for level in 0..2u32 {
        let s = grid.stride(level);
        let q = grid.stride(level + 2);
        let h2 = grid.level_spacing(level + 2);
        let off_surface: HashSet<[u32; 3]> = grid
            .retained(level)
            .iter()
            .copied()
            .filter(|&v| {
                let (lo, hi) = voxel_box(&grid, v, s);
                !box_meets_surface(&f, lo, hi)
            })
            .collect();
        let ancestor = |v: [u32; 3]| v.map(|c| c / s * s);
        kept_children += grid.retained(level + 1).iter().filter(|&&v| off_surface.contains(&ancestor(v))).count();
        let survivors: HashSet<[u32; 3]> =
            grid.retained(level + 2).iter().copied().filter(|&v| off_surface.contains(&ancestor(v))).collect();
        for v in &survivors {
            let (lo, hi) = voxel_box(&grid, *v, q);
            assert!(box_sphere_gap(center, r, lo, hi) < h2, "far survivor {v:?}");
        }
        for v in &off_surface {
            let (lo, hi) = voxel_box(&grid, *v, s);
            if box_sphere_gap(center, r, lo, hi) >= h2 {
                far_misses += 1;
                assert!(!survivors.iter().any(|&c| ancestor(c) == *v), "descendant of far miss {v:?} kept");
            }
        }
    }
    assert!(kept_children > 0);
    assert!(far_misses > 0);
}

#[test]
fn sphere_mesh_stays_in_band() {
    let r = 0.4;
    let (mesh, grid) = extract_mesh(&sphere(), 16, 3, None).unwrap();
    let h = grid.spacing();
    let tau = h / 2.0;
    assert_eq!(grid.cells_per_axis(), 144);
    assert!(mesh.triangles.len() > 1000);
    for v in &mesh.vertices {
        let d = v.norm();
        assert!(d >= r - tau - h && d <= r + tau + h, "vertex at radius {d}");
    }
}

#[test]
fn extraction_is_deterministic() {
    let a = extract_mesh(&split_sphere(), 8, 2, None).unwrap().0;
    let b = extract_mesh(&split_sphere(), 8, 2, None).unwrap().0;
    assert_eq!(a, b);
    let empty = extract_mesh(&AnalyticField::Constant(2.0), 8, 2, None).unwrap().0;
    assert!(empty.is_empty());
}

#[test]
fn mesh_vertices_lie_inside_the_grid_box() {
    let f = oblique_plane();
    let (mesh, grid) = extract_mesh(&f, 8, 1, None).unwrap();
    let n = grid.cells_per_axis() as u32;
    let lo = grid.corner_position([0, 0, 0]);
    let hi = grid.corner_position([n, n, n]);
    assert!(!mesh.is_empty());
    for v in &mesh.vertices {
        for k in 0..3 {
            assert!(v[k] >= lo[k] && v[k] <= hi[k]);
        }
        assert!(f.udf(*v).unwrap() < grid.spacing());
    }
}
