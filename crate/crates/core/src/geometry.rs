//! Core geometric types: points, unit directions, triangles, soups and meshes.

use std::ops::{Add, AddAssign, Div, Index, Mul, Neg, Sub};

use thiserror::Error;

/// Triangles with area at or below this (in normalized units) are rejected.
pub const MIN_TRIANGLE_AREA: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("triangle soup is empty")]
    EmptySoup,
    #[error("triangle soup has zero extent")]
    ZeroExtent,
    #[error("non-finite coordinate")]
    NonFinite,
}

/// A 3-vector in scene units. Used both as a position and as a displacement.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// A position in normalized scene units.
pub type Point3 = Vec3;

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    #[inline]
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub const fn splat(v: f64) -> Self {
        Self { x: v, y: v, z: v }
    }

    #[inline]
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    #[inline]
    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    #[inline]
    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    #[inline]
    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    /// Squared distance, computed component-wise in a fixed order so that
    /// every caller (index, brute-force scan) gets bit-identical values.
    #[inline]
    pub fn distance_squared(self, o: Vec3) -> f64 {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        let dz = self.z - o.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    #[inline]
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    #[inline]
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    #[inline]
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    #[inline]
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    #[inline]
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// A unit-length direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction3(Vec3);

impl Direction3 {
    pub const X: Direction3 = Direction3(Vec3::new(1.0, 0.0, 0.0));
    pub const Y: Direction3 = Direction3(Vec3::new(0.0, 1.0, 0.0));
    pub const Z: Direction3 = Direction3(Vec3::new(0.0, 0.0, 1.0));

    /// Normalizes `v`; `None` when `v` is zero or non-finite.
    pub fn new(v: Vec3) -> Option<Self> {
        let n = v.norm();
        if n > 0.0 && n.is_finite() {
            Some(Direction3(v / n))
        } else {
            None
        }
    }

    /// Accepts `v` as-is when it is already unit length within 1e-6, so
    /// stored directions round-trip without rescaling.
    pub fn from_unit(v: Vec3) -> Option<Self> {
        ((v.norm() - 1.0).abs() <= 1e-6).then_some(Direction3(v))
    }

    #[inline]
    pub fn vec(self) -> Vec3 {
        self.0
    }

    #[inline]
    pub fn dot(self, v: Vec3) -> f64 {
        self.0.dot(v)
    }

    #[inline]
    pub fn flipped(self) -> Self {
        Direction3(-self.0)
    }
}

impl Neg for Direction3 {
    type Output = Direction3;
    fn neg(self) -> Direction3 {
        self.flipped()
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn empty() -> Self {
        Self {
            min: Vec3::splat(f64::INFINITY),
            max: Vec3::splat(f64::NEG_INFINITY),
        }
    }

    pub fn cube(half_extent: f64) -> Self {
        Self {
            min: Vec3::splat(-half_extent),
            max: Vec3::splat(half_extent),
        }
    }

    pub fn extend(&mut self, p: Point3) {
        self.min = self.min.min(p);
        self.max = self.max.max(p);
    }

    pub fn from_points<'a>(pts: impl IntoIterator<Item = &'a Point3>) -> Self {
        let mut b = Self::empty();
        for p in pts {
            b.extend(*p);
        }
        b
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Point3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: Point3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }
}

/// A non-degenerate triangle with its right-hand-rule face normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub v0: Point3,
    pub v1: Point3,
    pub v2: Point3,
    pub face_normal: Direction3,
}

impl Triangle {
    /// Returns `None` for degenerate (area ≤ [`MIN_TRIANGLE_AREA`]) or
    /// non-finite input.
    pub fn new(v0: Point3, v1: Point3, v2: Point3) -> Option<Self> {
        if !(v0.is_finite() && v1.is_finite() && v2.is_finite()) {
            return None;
        }
        let n = (v1 - v0).cross(v2 - v0);
        if 0.5 * n.norm() <= MIN_TRIANGLE_AREA {
            return None;
        }
        Some(Self {
            v0,
            v1,
            v2,
            face_normal: Direction3::new(n)?,
        })
    }

    pub fn area(&self) -> f64 {
        0.5 * (self.v1 - self.v0).cross(self.v2 - self.v0).norm()
    }

    pub fn vertices(&self) -> [Point3; 3] {
        [self.v0, self.v1, self.v2]
    }

    pub fn centroid(&self) -> Point3 {
        (self.v0 + self.v1 + self.v2) / 3.0
    }
}

/// An unstructured list of triangles. No manifoldness, closedness or
/// orientation consistency is assumed.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleSoup {
    triangles: Vec<Triangle>,
    bbox: Aabb,
}

impl TriangleSoup {
    pub fn new(triangles: Vec<Triangle>) -> Result<Self, GeometryError> {
        if triangles.is_empty() {
            return Err(GeometryError::EmptySoup);
        }
        let bbox = Aabb::from_points(triangles.iter().flat_map(|t| [&t.v0, &t.v1, &t.v2]));
        Ok(Self { triangles, bbox })
    }

    /// Builds a soup from raw vertex triples, dropping degenerate ones.
    /// Returns the soup and the number of dropped triangles.
    pub fn from_vertex_triples(
        tris: impl IntoIterator<Item = [Point3; 3]>,
    ) -> Result<(Self, usize), GeometryError> {
        let mut out = Vec::new();
        let mut dropped = 0;
        for [a, b, c] in tris {
            match Triangle::new(a, b, c) {
                Some(t) => out.push(t),
                None => dropped += 1,
            }
        }
        Ok((Self::new(out)?, dropped))
    }

    pub fn triangles(&self) -> &[Triangle] {
        &self.triangles
    }

    pub fn len(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn bbox(&self) -> Aabb {
        self.bbox
    }

    pub fn total_area(&self) -> f64 {
        self.triangles.iter().map(Triangle::area).sum()
    }
}

/// Affine map `x' = scale * x + offset` produced by [`normalize_soup`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub scale: f64,
    pub offset: Vec3,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        scale: 1.0,
        offset: Vec3::ZERO,
    };

    pub fn apply(&self, p: Point3) -> Point3 {
        p * self.scale + self.offset
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        (p - self.offset) / self.scale
    }
}

/// Centers the soup and scales it uniformly so its longest bbox axis spans
/// exactly [-0.5, 0.5].
pub fn normalize_soup(s: &TriangleSoup) -> Result<(TriangleSoup, Normalization), GeometryError> {
    let bbox = s.bbox();
    let ext = bbox.extent();
    let longest = ext.x.max(ext.y).max(ext.z);
    if !(longest > 0.0) || !longest.is_finite() {
        return Err(GeometryError::ZeroExtent);
    }
    let scale = 1.0 / longest;
    let offset = -(bbox.center() * scale);
    let norm = Normalization { scale, offset };
    let (soup, dropped) = TriangleSoup::from_vertex_triples(
        s.triangles()
            .iter()
            .map(|t| [norm.apply(t.v0), norm.apply(t.v1), norm.apply(t.v2)]),
    )?;
    if dropped > 0 {
        log::warn!("normalization dropped {dropped} triangles that became degenerate");
    }
    Ok((soup, norm))
}

/// Exact closest point on a triangle (region classification over the
/// Voronoi regions of vertices, edges and face).
pub fn point_triangle_distance(p: Point3, t: &Triangle) -> (f64, Point3) {
    let c = closest_point_on_triangle(p, t.v0, t.v1, t.v2);
    (p.distance(c), c)
}

fn closest_point_on_triangle(p: Point3, a: Point3, b: Point3, c: Point3) -> Point3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }

    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }

    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

/// Indexed triangle mesh.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, i: usize) -> [Point3; 3] {
        let [a, b, c] = self.triangles[i];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Converts to a soup, dropping degenerate faces.
    pub fn to_soup(&self) -> Result<(TriangleSoup, usize), GeometryError> {
        TriangleSoup::from_vertex_triples((0..self.triangles.len()).map(|i| self.triangle(i)))
    }

    pub fn from_soup(soup: &TriangleSoup) -> Self {
        let mut vertices = Vec::with_capacity(soup.len() * 3);
        let mut triangles = Vec::with_capacity(soup.len());
        for t in soup.triangles() {
            let base = vertices.len() as u32;
            vertices.extend_from_slice(&t.vertices());
            triangles.push([base, base + 1, base + 2]);
        }
        Self { vertices, triangles }
    }

    /// Maps every vertex through `f`.
    pub fn map_vertices(&self, f: impl Fn(Point3) -> Point3) -> Self {
        Self {
            vertices: self.vertices.iter().map(|&v| f(v)).collect(),
            triangles: self.triangles.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_right() -> Triangle {
        Triangle::new(
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        )
        .unwrap()
    }

    fn random_triangle(rng: &mut impl Rng) -> Triangle {
        loop {
            let mut v = || Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if let Some(t) = Triangle::new(v(), v(), v()) {
                return t;
            }
        }
    }

    #[test]
    fn apex_above_vertex() {
        let (d, c) = point_triangle_distance(Vec3::new(0.0, 0.0, 1.0), &unit_right());
        assert_eq!(d, 1.0);
        assert_eq!(c, Vec3::ZERO);
    }

    #[test]
    fn point_on_triangle_is_its_own_closest() {
        let p = Vec3::new(0.25, 0.25, 0.0);
        let (d, c) = point_triangle_distance(p, &unit_right());
        assert_eq!(d, 0.0);
        assert_eq!(c, p);
    }

    #[test]
    fn outside_point_matches_dense_sampling_oracle() {
        // Oracle: 10^6 rejection-sampled points in the unit square, keep those
        // inside the triangle, take the minimum distance.
        let t = unit_right();
        let p = Vec3::new(2.0, 2.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut best = f64::INFINITY;
        let mut best_q = Vec3::ZERO;
        for _ in 0..1_000_000 {
            let (u, v): (f64, f64) = (rng.random(), rng.random());
            if u + v <= 1.0 {
                let q = Vec3::new(u, v, 0.0);
                let d = p.distance(q);
                if d < best {
                    best = d;
                    best_q = q;
                }
            }
        }
        let (d, c) = point_triangle_distance(p, &t);
        // Closest point is the hypotenuse midpoint (0.5, 0.5, 0).
        assert!(d <= best + 1e-12);
        assert!((d - best).abs() < 2e-3, "{d} vs {best}");
        // Along the hypotenuse the distance is flat to first order, so the
        // sampled argmin can sit anywhere with |c - q|^2 <= best^2 - d^2 + (best - d)^2.
        let bound = (best * best - d * d + (best - d) * (best - d)).sqrt();
        assert!(c.distance(best_q) <= bound + 1e-12);
        assert!((d - 1.5 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn closest_point_lies_on_triangle_and_beats_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let t = random_triangle(&mut rng);
            let p = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let (d, c) = point_triangle_distance(p, &t);
            for v in t.vertices() {
                assert!(d <= p.distance(v) + 1e-12);
            }
            // barycentric coordinates of c
            let n = (t.v1 - t.v0).cross(t.v2 - t.v0);
            let area2 = n.norm_squared();
            let b0 = (t.v1 - c).cross(t.v2 - c).dot(n) / area2;
            let b1 = (t.v2 - c).cross(t.v0 - c).dot(n) / area2;
            let b2 = 1.0 - b0 - b1;
            for b in [b0, b1, b2] {
                assert!((-1e-9..=1.0 + 1e-9).contains(&b), "{b0} {b1} {b2}");
            }
            assert!(n.dot(c - t.v0).abs() / n.norm() < 1e-9);
            assert!((d - p.distance(c)).abs() == 0.0);
        }
    }

    #[test]
    fn distance_is_symmetric_under_vertex_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = random_triangle(&mut rng);
            let p = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let (d, c) = point_triangle_distance(p, &t);
            let [a, b, e] = t.vertices();
            for perm in [[a, e, b], [b, a, e], [b, e, a], [e, a, b], [e, b, a]] {
                let tp = Triangle::new(perm[0], perm[1], perm[2]).unwrap();
                let (dp, cp) = point_triangle_distance(p, &tp);
                assert!((d - dp).abs() < 1e-9);
                assert!(c.distance(cp) < 1e-9);
            }
        }
    }

    #[test]
    fn face_normal_is_orthogonal_to_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let t = random_triangle(&mut rng);
            let n = t.face_normal.vec();
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!(n.dot((t.v1 - t.v0) / (t.v1 - t.v0).norm()).abs() < 1e-6);
            assert!(n.dot((t.v2 - t.v0) / (t.v2 - t.v0).norm()).abs() < 1e-6);
        }
        assert_eq!(unit_right().face_normal, Direction3::Z);
    }

    #[test]
    fn degenerate_triangles_are_rejected() {
        let a = Vec3::ZERO;
        assert!(Triangle::new(a, a, Vec3::new(1.0, 0.0, 0.0)).is_none());
        assert!(Triangle::new(a, Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)).is_none());
        assert!(Triangle::new(a, Vec3::new(f64::NAN, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)).is_none());
    }

    fn box_soup(max: Vec3) -> TriangleSoup {
        TriangleSoup::new(vec![
            Triangle::new(Vec3::ZERO, Vec3::new(max.x, 0.0, 0.0), Vec3::new(0.0, max.y, 0.0)).unwrap(),
            Triangle::new(Vec3::new(0.0, 0.0, max.z), max, Vec3::new(max.x, 0.0, max.z)).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn normalize_unit_cube() {
        let (n, norm) = normalize_soup(&box_soup(Vec3::splat(1.0))).unwrap();
        assert_eq!(norm.scale, 1.0);
        assert_eq!(norm.offset, Vec3::splat(-0.5));
        assert_eq!(n.bbox(), Aabb::cube(0.5));
    }

    #[test]
    fn normalize_elongated_box() {
        let (n, norm) = normalize_soup(&box_soup(Vec3::new(2.0, 1.0, 1.0))).unwrap();
        assert_eq!(norm.scale, 0.5);
        let b = n.bbox();
        assert_eq!((b.min.x, b.max.x), (-0.5, 0.5));
        assert_eq!((b.min.y, b.max.y), (-0.25, 0.25));
        assert_eq!((b.min.z, b.max.z), (-0.25, 0.25));
    }

    #[test]
    fn normalize_round_trip_and_idempotence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tris: Vec<Triangle> = (0..50)
            .map(|_| {
                let t = random_triangle(&mut rng);
                let s = Vec3::new(3.0, -1.0, 7.5);
                Triangle::new(t.v0 * 4.0 + s, t.v1 * 4.0 + s, t.v2 * 4.0 + s).unwrap()
            })
            .collect();
        let soup = TriangleSoup::new(tris).unwrap();
        let (n, norm) = normalize_soup(&soup).unwrap();
        for (a, b) in soup.triangles().iter().zip(n.triangles()) {
            for (va, vb) in a.vertices().iter().zip(b.vertices()) {
                assert!(va.distance(norm.invert(vb)) < 1e-9);
            }
        }
        let (n2, _) = normalize_soup(&n).unwrap();
        for (a, b) in n.triangles().iter().zip(n2.triangles()) {
            for (va, vb) in a.vertices().iter().zip(b.vertices()) {
                assert!(va.distance(vb) < 1e-9);
            }
        }
    }

    #[test]
    fn all_degenerate_input_is_an_empty_soup() {
        assert_eq!(TriangleSoup::new(vec![]).unwrap_err(), GeometryError::EmptySoup);
        assert_eq!(
            TriangleSoup::from_vertex_triples([[Vec3::ZERO; 3]]).unwrap_err(),
            GeometryError::EmptySoup
        );
    }
}
