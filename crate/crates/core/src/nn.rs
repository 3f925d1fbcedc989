//! Exact nearest-neighbour queries over a fixed point set.
//!
//! A static k-d tree with bucketed leaves. Queries return exactly what a
//! linear scan returns, including the tie-break: among points at the same
//! (bit-identical) squared distance, the lowest insertion index wins.

use crate::geometry::{Aabb, Point3};

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: u32,
        end: u32,
    },
    Split {
        axis: u8,
        value: f64,
        left: u32,
        right: u32,
    },
}

/// Immutable spatial index; `Sync`, so it can be queried from many threads.
#[derive(Debug, Clone)]
pub struct NnIndex {
    points: Vec<Point3>,
    /// Permutation of point ids, leaf ranges index into this.
    order: Vec<u32>,
    nodes: Vec<Node>,
}

/// Result of a nearest-neighbour query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_squared: f64,
}

impl Neighbor {
    pub fn dist(&self) -> f64 {
        self.dist_squared.sqrt()
    }
}

impl NnIndex {
    /// Builds the index. Construction is deterministic for a given input
    /// order.
    ///
    /// # Panics
    /// If `points` is empty or holds more than `u32::MAX` entries.
    pub fn new(points: Vec<Point3>) -> Self {
        assert!(!points.is_empty(), "cannot index an empty point set");
        assert!(points.len() < u32::MAX as usize);
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        build(&points, &mut order, 0, &mut nodes);
        Self { points, order, nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    /// Exact nearest neighbour of `q`.
    pub fn nearest(&self, q: Point3) -> Neighbor {
        let mut best = Neighbor {
            index: usize::MAX,
            dist_squared: f64::INFINITY,
        };
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: usize, q: Point3, best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start as usize..end as usize] {
                    let d = q.distance_squared(self.points[id as usize]);
                    let id = id as usize;
                    if d < best.dist_squared || (d == best.dist_squared && id < best.index) {
                        *best = Neighbor {
                            index: id,
                            dist_squared: d,
                        };
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis as usize] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near as usize, q, best);
                // Strict comparison: a far-side point at exactly the current
                // best distance may still win the index tie-break.
                if diff * diff <= best.dist_squared {
                    self.search(far as usize, q, best);
                }
            }
        }
    }
}

fn build(points: &[Point3], order: &mut [u32], offset: usize, nodes: &mut Vec<Node>) -> u32 {
    let id = nodes.len() as u32;
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + order.len()) as u32,
        });
        return id;
    }
    let bbox = Aabb::from_points(order.iter().map(|&i| &points[i as usize]));
    let ext = bbox.extent();
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    if ext[axis] == 0.0 {
        // All points coincide; no split can separate them.
        nodes.push(Node::Leaf {
            start: offset as u32,
            end: (offset + order.len()) as u32,
        });
        return id;
    }
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .total_cmp(&points[b as usize][axis])
            .then(a.cmp(&b))
    });
    let value = points[order[mid] as usize][axis];
    // Placeholder, patched once the children exist.
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let (lo, hi) = order.split_at_mut(mid);
    let left = build(points, lo, offset, nodes);
    let right = build(points, hi, offset + mid, nodes);
    nodes[id as usize] = Node::Split {
        axis: axis as u8,
        value,
        left,
        right,
    };
    id
}

/// Linear-scan nearest neighbour with the same tie-break as [`NnIndex`].
pub fn brute_force_nearest(points: &[Point3], q: Point3) -> Neighbor {
    let mut best = Neighbor {
        index: usize::MAX,
        dist_squared: f64::INFINITY,
    };
    for (i, p) in points.iter().enumerate() {
        let d = q.distance_squared(*p);
        if d < best.dist_squared {
            best = Neighbor {
                index: i,
                dist_squared: d,
            };
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Point3> {
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect()
    }

    #[test]
    fn single_point_index() {
        let idx = NnIndex::new(vec![Vec3::new(0.1, 0.2, 0.3)]);
        for q in [Vec3::ZERO, Vec3::splat(5.0), Vec3::new(0.1, 0.2, 0.3)] {
            assert_eq!(idx.nearest(q).index, 0);
        }
        assert_eq!(idx.nearest(Vec3::new(0.1, 0.2, 0.3)).dist(), 0.0);
    }

    #[test]
    fn duplicates_return_lowest_index() {
        let mut pts = vec![Vec3::new(0.3, 0.3, 0.3); 40];
        pts.insert(0, Vec3::new(-0.4, 0.0, 0.0));
        let idx = NnIndex::new(pts);
        assert_eq!(idx.nearest(Vec3::new(0.31, 0.3, 0.3)).index, 1);
    }

    #[test]
    fn equidistant_query_returns_lower_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pts = random_points(&mut rng, 100);
        pts[17] = Vec3::new(0.25, 0.0, 0.0);
        pts[63] = Vec3::new(-0.25, 0.0, 0.0);
        pts.retain(|p| p.norm() >= 0.25);
        let i = pts.iter().position(|p| *p == Vec3::new(0.25, 0.0, 0.0)).unwrap();
        let idx = NnIndex::new(pts);
        let n = idx.nearest(Vec3::ZERO);
        assert_eq!(n.index, i);
        assert_eq!(n.dist(), 0.25);
    }

    #[test]
    fn matches_linear_scan_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(&mut rng, 10_000);
        let idx = NnIndex::new(pts.clone());
        for _ in 0..1000 {
            let q = Vec3::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7));
            assert_eq!(idx.nearest(q), brute_force_nearest(&pts, q));
        }
    }

    #[test]
    fn matches_linear_scan_on_lattice_with_ties() {
        // Integer lattice points produce many exact distance ties.
        let mut pts = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..4 {
                    pts.push(Vec3::new(i as f64 * 0.125, j as f64 * 0.125, k as f64 * 0.125));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        pts.reverse();
        let idx = NnIndex::new(pts.clone());
        for _ in 0..2000 {
            let q = Vec3::new(
                rng.random_range(0..16) as f64 * 0.0625,
                rng.random_range(0..16) as f64 * 0.0625,
                rng.random_range(0..8) as f64 * 0.0625,
            );
            assert_eq!(idx.nearest(q), brute_force_nearest(&pts, q));
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = random_points(&mut rng, 3000);
        let a = NnIndex::new(pts.clone());
        let b = NnIndex::new(pts);
        assert_eq!(a.order, b.order);
    }
}
