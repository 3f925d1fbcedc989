//! Depth, normal and pixel-coverage metrics for renders, and chamfer
//! distance for point sets.
//!
//! Chamfer uses squared nearest-neighbour distances and sums the two
//! directional means; its magnitude depends on that convention. All sums use
//! a fixed pairwise tree, so results do not depend on the thread count.

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Direction3, Mesh, Point3};
use crate::nn::NnIndex;
use crate::sampler::{barycentric_point, stream_rng, AreaTable, PURPOSE_MESH};
use crate::tracer::RenderProduct;

const PAIRWISE_BLOCK: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("map size mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("map of {width}x{height} has {len} values")]
    BadLength { width: usize, height: usize, len: usize },
    #[error("no pixel is finite in both depth maps")]
    NoValidPixels,
    #[error("valid pixel {0} has no normal")]
    MissingNormal(usize),
    #[error("point set is empty")]
    EmptySet,
    #[error("mesh has no surface area to sample")]
    EmptyMesh,
}

/// Borrowed row-major image with per-pixel values of type `T`.
#[derive(Debug, Clone, Copy)]
pub struct MapView<'a, T> {
    width: usize,
    height: usize,
    data: &'a [T],
}

impl<'a, T> MapView<'a, T> {
    pub fn new(width: usize, height: usize, data: &'a [T]) -> Result<Self, MetricsError> {
        if width.checked_mul(height) != Some(data.len()) {
            return Err(MetricsError::BadLength { width, height, len: data.len() });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &'a [T] {
        self.data
    }

    fn same_size<U>(&self, o: &MapView<'_, U>) -> Result<(), MetricsError> {
        if (self.width, self.height) != (o.width, o.height) {
            return Err(MetricsError::DimensionMismatch(self.width, self.height, o.width, o.height));
        }
        Ok(())
    }
}

pub type DepthMap<'a> = MapView<'a, f64>;
pub type NormalMap<'a> = MapView<'a, Option<Direction3>>;

impl RenderProduct {
    pub fn depth_map(&self) -> DepthMap<'_> {
        MapView { width: self.width, height: self.height, data: &self.depth }
    }

    pub fn normal_map(&self) -> NormalMap<'_> {
        MapView { width: self.width, height: self.height, data: &self.normal }
    }
}

/// Pixels with finite depth in both maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelValidity {
    pub width: usize,
    pub height: usize,
    pub valid: Vec<bool>,
}

impl PixelValidity {
    pub fn from_depths(gt: &DepthMap<'_>, est: &DepthMap<'_>) -> Result<Self, MetricsError> {
        gt.same_size(est)?;
        let valid = gt.data.iter().zip(est.data).map(|(a, b)| a.is_finite() && b.is_finite()).collect();
        Ok(Self { width: gt.width, height: gt.height, valid })
    }

    pub fn count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Sum in a fixed binary tree over blocks of 64.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_BLOCK {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Mean absolute depth difference over pixels finite in both maps.
pub fn depth_mae(gt: &DepthMap<'_>, est: &DepthMap<'_>) -> Result<f64, MetricsError> {
    gt.same_size(est)?;
    let diffs: Vec<f64> = gt
        .data
        .iter()
        .zip(est.data)
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|(a, b)| (a - b).abs())
        .collect();
    if diffs.is_empty() {
        return Err(MetricsError::NoValidPixels);
    }
    Ok(mean(&diffs))
}

/// Distance between two unoriented normals: `min(|a - b|, |a + b|)`.
pub fn normal_distance(a: Direction3, b: Direction3) -> f64 {
    let (a, b) = (a.vec(), b.vec());
    (a - b).norm().min((a + b).norm())
}

/// Mean sign-invariant normal distance over the valid pixels.
pub fn normal_error(gt: &NormalMap<'_>, est: &NormalMap<'_>, validity: &PixelValidity) -> Result<f64, MetricsError> {
    gt.same_size(est)?;
    if (validity.width, validity.height) != (gt.width, gt.height) {
        return Err(MetricsError::DimensionMismatch(gt.width, gt.height, validity.width, validity.height));
    }
    let mut errs = Vec::with_capacity(validity.count());
    for (i, _) in validity.valid.iter().enumerate().filter(|(_, &v)| v) {
        match (gt.data[i], est.data[i]) {
            (Some(a), Some(b)) => errs.push(normal_distance(a, b)),
            _ => return Err(MetricsError::MissingNormal(i)),
        }
    }
    if errs.is_empty() {
        return Err(MetricsError::NoValidPixels);
    }
    Ok(mean(&errs))
}

/// Pixels finite in both maps over pixels finite in at least one. Two
/// all-miss maps agree perfectly and give 1.
pub fn pixel_iou(gt: &DepthMap<'_>, est: &DepthMap<'_>) -> Result<f64, MetricsError> {
    gt.same_size(est)?;
    let (mut both, mut either) = (0usize, 0usize);
    for (a, b) in gt.data.iter().zip(est.data) {
        both += (a.is_finite() && b.is_finite()) as usize;
        either += (a.is_finite() || b.is_finite()) as usize;
    }
    Ok(if either == 0 { 1.0 } else { both as f64 / either as f64 })
}

/// Squared distance from each point of `from` to its nearest point in `to`.
pub fn nn_squared_distances(from: &[Point3], to: &[Point3]) -> Result<Vec<f64>, MetricsError> {
    if from.is_empty() || to.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let index = NnIndex::new(to.to_vec());
    Ok(from.par_iter().map(|&p| index.nearest(p).dist_squared).collect())
}

/// Mean squared nearest-neighbour distance from `a` to `b` plus the same
/// from `b` to `a`.
pub fn chamfer(a: &[Point3], b: &[Point3]) -> Result<f64, MetricsError> {
    let ab = mean(&nn_squared_distances(a, b)?);
    let ba = mean(&nn_squared_distances(b, a)?);
    Ok(ab + ba)
}

/// `n` area-weighted uniform points on the mesh surface.
pub fn sample_mesh_points(mesh: &Mesh, n: usize, seed: u64) -> Result<Vec<Point3>, MetricsError> {
    let tris: Vec<[Point3; 3]> = (0..mesh.triangles.len()).map(|i| mesh.triangle(i)).collect();
    let table = AreaTable::new(tris.iter().map(|[a, b, c]| 0.5 * (*b - *a).cross(*c - *a).norm()));
    if !(table.total() > 0.0) {
        return Err(MetricsError::EmptyMesh);
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, PURPOSE_MESH, i as u64);
            let [a, b, c] = tris[table.pick(rng.random())];
            barycentric_point(a, b, c, rng.random(), rng.random())
        })
        .collect())
}
