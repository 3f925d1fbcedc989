//! Parametric test soups: a sphere with an equatorial band removed, a fan of
//! intersecting quads, and an open tub with a rim. All are emitted already
//! normalized to the unit cube.

use std::f64::consts::PI;

use anyhow::{bail, Result};
use udfkit::geometry::{normalize_soup, Point3, TriangleSoup, Vec3};

use crate::config::SynthConfig;

/// Radius of the split sphere before normalization; its bbox is already the
/// unit cube, so this is also its radius afterwards.
pub const SPLIT_SPHERE_RADIUS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    SplitSphere,
    Planes,
    Bathtub,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::SplitSphere => "split-sphere",
            Shape::Planes => "planes",
            Shape::Bathtub => "bathtub",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Shape::SplitSphere, Shape::Planes, Shape::Bathtub].into_iter().find(|sh| sh.name() == s)
    }
}

fn finish(tris: Vec<[Point3; 3]>) -> Result<TriangleSoup> {
    let (soup, dropped) = TriangleSoup::from_vertex_triples(tris)?;
    if dropped > 0 {
        bail!("{dropped} generated triangles were degenerate");
    }
    Ok(normalize_soup(&soup)?.0)
}

fn quad(a: Point3, b: Point3, c: Point3, d: Point3) -> [[Point3; 3]; 2] {
    [[a, b, c], [a, c, d]]
}

/// Two spherical caps of radius 0.5 with `|z| < gap` removed. `gap = 0`
/// gives a closed sphere whose two halves share the equator ring exactly.
pub fn split_sphere(gap: f64, segments: usize, rings: usize) -> Result<TriangleSoup> {
    let r = SPLIT_SPHERE_RADIUS;
    if !(0.0..r).contains(&gap) || segments < 3 || rings < 1 {
        bail!("split sphere needs 0 <= gap < {r}, segments >= 3, rings >= 1");
    }
    let theta_gap = (gap / r).acos();
    let rim = (r * r - gap * gap).sqrt();
    let mut tris = Vec::with_capacity(2 * segments * (2 * rings - 1));
    for s in [1.0, -1.0] {
        // (radius in xy, z) of each latitude ring, pole first.
        let ring = |j: usize| -> (f64, f64) {
            if j == rings {
                (rim, s * gap)
            } else {
                let t = theta_gap * j as f64 / rings as f64;
                (r * t.sin(), s * r * t.cos())
            }
        };
        let at = |j: usize, k: usize| {
            let (rho, z) = ring(j);
            let phi = 2.0 * PI * (k % segments) as f64 / segments as f64;
            Vec3::new(rho * phi.cos(), rho * phi.sin(), z)
        };
        let pole = Vec3::new(0.0, 0.0, s * r);
        for k in 0..segments {
            tris.push([pole, at(1, k), at(1, k + 1)]);
            for j in 1..rings {
                tris.extend(quad(at(j, k), at(j + 1, k), at(j + 1, k + 1), at(j, k + 1)));
            }
        }
    }
    finish(tris)
}

/// `n` unit squares sharing the z axis, rotated by `pi / n` from each other.
pub fn intersecting_planes(n: usize) -> Result<TriangleSoup> {
    if n < 1 {
        bail!("at least one plane is required");
    }
    let w = Vec3::new(0.0, 0.0, 0.5);
    let mut tris = Vec::with_capacity(2 * n);
    for i in 0..n {
        let phi = PI * i as f64 / n as f64;
        let u = Vec3::new(0.5 * phi.cos(), 0.5 * phi.sin(), 0.0);
        tris.extend(quad(-u - w, u - w, u + w, -u + w));
    }
    finish(tris)
}

/// Open box on a unit square footprint with walls of height `wall` and a
/// flat outward rim of width `rim` along the top edge.
pub fn bathtub(wall: f64, rim: f64) -> Result<TriangleSoup> {
    if !(wall > 0.0 && wall.is_finite() && rim >= 0.0 && rim.is_finite()) {
        bail!("bathtub needs wall > 0 and rim >= 0");
    }
    let c = [(-0.5, -0.5), (0.5, -0.5), (0.5, 0.5), (-0.5, 0.5)];
    let p = |(x, y): (f64, f64), z: f64, grow: f64| Vec3::new(x * (1.0 + 2.0 * grow), y * (1.0 + 2.0 * grow), z);
    let mut tris = Vec::new();
    tris.extend(quad(p(c[0], 0.0, 0.0), p(c[1], 0.0, 0.0), p(c[2], 0.0, 0.0), p(c[3], 0.0, 0.0)));
    for i in 0..4 {
        let (a, b) = (c[i], c[(i + 1) % 4]);
        tris.extend(quad(p(a, 0.0, 0.0), p(b, 0.0, 0.0), p(b, wall, 0.0), p(a, wall, 0.0)));
        if rim > 0.0 {
            tris.extend(quad(p(a, wall, 0.0), p(b, wall, 0.0), p(b, wall, rim), p(a, wall, rim)));
        }
    }
    finish(tris)
}

pub fn generate(shape: Shape, cfg: &SynthConfig) -> Result<TriangleSoup> {
    match shape {
        Shape::SplitSphere => split_sphere(cfg.gap, cfg.segments, cfg.rings),
        Shape::Planes => intersecting_planes(cfg.planes),
        Shape::Bathtub => bathtub(cfg.wall, cfg.rim),
    }
}
