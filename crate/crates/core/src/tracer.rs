//! Sphere tracing of unsigned distance fields with three terminal
//! strategies, a pinhole camera, and depth/normal map output.
//!
//! Rays are traced as a wavefront: every iteration evaluates the field once
//! for all still-active rays. Batch composition depends only on the ray set,
//! so results are independent of the thread count.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::field::{Field, FieldError};
use crate::geometry::{Direction3, Point3, Vec3};

/// Rays leaving this cube are misses.
pub const TRACE_HALF_EXTENT: f64 = 0.7;

/// Rays per resample batch, bounding memory to `k` points per ray.
const RESAMPLE_RAYS_PER_BATCH: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3,
    pub dir: Direction3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Point3 {
        self.origin + self.dir.vec() * t
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("field of view must lie in (0, pi), got {0}")]
    Fov(f64),
    #[error("look_at coincides with position")]
    Degenerate,
    #[error("up vector is parallel to the viewing direction")]
    UpParallel,
    #[error("image must be at least 1x1")]
    Size,
}

/// Pinhole camera; `fov_y` is the full vertical field of view in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub position: Point3,
    pub look_at: Point3,
    pub up: Vec3,
    pub fov_y: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.fov_y > 0.0 && self.fov_y < std::f64::consts::PI) {
            return Err(CameraError::Fov(self.fov_y));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::Size);
        }
        self.basis().map(|_| ())
    }

    /// `(forward, right, up)` orthonormal frame.
    pub fn basis(&self) -> Result<(Vec3, Vec3, Vec3), CameraError> {
        let f = Direction3::new(self.look_at - self.position).ok_or(CameraError::Degenerate)?.vec();
        let r = Direction3::new(f.cross(self.up)).ok_or(CameraError::UpParallel)?.vec();
        if r.cross(f).norm() < 1e-9 || f.cross(self.up).norm() < 1e-9 * self.up.norm() {
            return Err(CameraError::UpParallel);
        }
        Ok((f, r, r.cross(f)))
    }
}

/// One ray per pixel, row-major from the top-left, through pixel centers.
pub fn make_rays(cam: &Camera) -> Result<Vec<Ray>, CameraError> {
    cam.validate()?;
    let (f, r, u) = cam.basis()?;
    let th = (cam.fov_y * 0.5).tan();
    let aspect = cam.width as f64 / cam.height as f64;
    let mut rays = Vec::with_capacity(cam.width * cam.height);
    for j in 0..cam.height {
        let sy = (1.0 - 2.0 * (j as f64 + 0.5) / cam.height as f64) * th;
        for i in 0..cam.width {
            let sx = (2.0 * (i as f64 + 0.5) / cam.width as f64 - 1.0) * th * aspect;
            let d = Direction3::new(f + r * sx + u * sy).expect("finite camera ray");
            rays.push(Ray {
                origin: cam.position,
                dir: d,
            });
        }
    }
    Ok(rays)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Standard,
    Resample,
    Projection,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::Resample => "resample",
            Strategy::Projection => "projection",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(Strategy::Standard),
            "resample" => Some(Strategy::Resample),
            "projection" => Some(Strategy::Projection),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConfig {
    pub strategy: Strategy,
    pub eps: f64,
    pub max_iters: usize,
    pub resample_k: usize,
    pub resample_window: f64,
    pub min_cos: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Standard,
            eps: 1e-3,
            max_iters: 200,
            resample_k: 100,
            resample_window: 0.01,
            min_cos: 0.1,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("invalid trace config: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

impl TraceConfig {
    pub fn validate(&self) -> Result<(), TraceError> {
        if !(self.eps > 0.0) {
            return Err(TraceError::Config("eps must be > 0"));
        }
        if !(self.resample_window > 0.0) {
            return Err(TraceError::Config("resample_window must be > 0"));
        }
        if self.resample_k == 0 {
            return Err(TraceError::Config("resample_k must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.min_cos) {
            return Err(TraceError::Config("min_cos must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn with_strategy(mut self, s: Strategy) -> Self {
        self.strategy = s;
        self
    }
}

/// Why a projection pixel kept the standard result.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fallback {
    /// `|r.n|` below `min_cos`.
    Grazing,
    /// The normal field could not produce a direction.
    DegenerateNormal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Distance along the ray from its origin.
    pub t: f64,
    pub point: Point3,
    /// Distance-field evaluations in the marching phase.
    pub iters: usize,
    /// Total field evaluations (distance and normal) spent on this ray.
    pub evals: usize,
    pub fallback: Option<Fallback>,
}

/// Outcome of tracing one ray. Misses still report their iteration count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceResult {
    pub hit: Option<Hit>,
    pub iters: usize,
}

/// Parametric interval of the ray inside the trace box, if any.
pub fn box_interval(ray: &Ray, half: f64) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let d = ray.dir.vec();
    for k in 0..3 {
        let (o, dk) = (ray.origin[k], d[k]);
        if dk == 0.0 {
            if o < -half || o > half {
                return None;
            }
        } else {
            let a = (-half - o) / dk;
            let b = (half - o) / dk;
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    let t0 = t0.max(0.0);
    (t0 <= t1).then_some((t0, t1))
}

#[derive(Debug, Clone, Copy)]
struct March {
    t: f64,
    t_min: f64,
    t_max: f64,
    iters: usize,
    last_d: f64,
    state: State,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum State {
    Active,
    Hit,
    Miss,
}

/// Traces a batch of rays with `cfg.strategy`.
pub fn trace_batch<F: Field + ?Sized>(field: &F, rays: &[Ray], cfg: &TraceConfig) -> Result<Vec<TraceResult>, TraceError> {
    cfg.validate()?;
    let mut st: Vec<March> = rays
        .iter()
        .map(|r| match box_interval(r, TRACE_HALF_EXTENT) {
            Some((t0, t1)) => March {
                t: t0,
                t_min: t0,
                t_max: t1,
                iters: 0,
                last_d: f64::INFINITY,
                state: State::Active,
            },
            None => March {
                t: 0.0,
                t_min: 0.0,
                t_max: 0.0,
                iters: 0,
                last_d: f64::INFINITY,
                state: State::Miss,
            },
        })
        .collect();

    // Marching phase.
    let mut active: Vec<usize> = (0..rays.len()).filter(|&i| st[i].state == State::Active).collect();
    while !active.is_empty() {
        active.retain(|&i| {
            if st[i].iters >= cfg.max_iters {
                st[i].state = State::Miss;
                false
            } else {
                true
            }
        });
        let pts: Vec<Point3> = active.iter().map(|&i| rays[i].at(st[i].t)).collect();
        let ds = field.udf_batch(&pts)?;
        for (&i, &d) in active.iter().zip(&ds) {
            let s = &mut st[i];
            s.iters += 1;
            s.last_d = d;
            if d <= cfg.eps {
                s.state = State::Hit;
            } else {
                s.t += d;
                if s.t > s.t_max {
                    s.state = State::Miss;
                }
            }
        }
        active.retain(|&i| st[i].state == State::Active);
    }

    let hits: Vec<usize> = (0..rays.len()).filter(|&i| st[i].state == State::Hit).collect();
    let mut t_final: Vec<f64> = st.iter().map(|s| s.t).collect();
    let mut extra = vec![0usize; rays.len()];
    let mut fallback: Vec<Option<Fallback>> = vec![None; rays.len()];

    match cfg.strategy {
        Strategy::Standard => {}
        Strategy::Resample => {
            let k = cfg.resample_k;
            let w = cfg.resample_window;
            let lambdas: Vec<f64> = if k == 1 {
                vec![0.0]
            } else {
                (0..k).map(|j| -w + 2.0 * w * j as f64 / (k - 1) as f64).collect()
            };
            for chunk in hits.chunks(RESAMPLE_RAYS_PER_BATCH) {
                let mut pts = Vec::with_capacity(chunk.len() * k);
                let mut cand = Vec::with_capacity(chunk.len() * k);
                for &i in chunk {
                    let s = &st[i];
                    for &l in &lambdas {
                        // Keep candidates inside the trace box.
                        let t = (s.t + l).clamp(s.t_min, s.t_max);
                        cand.push(t);
                        pts.push(rays[i].at(t));
                    }
                }
                let ds = field.udf_batch(&pts)?;
                for (c, &i) in chunk.iter().enumerate() {
                    let vals = &ds[c * k..(c + 1) * k];
                    let mut best = 0;
                    for (j, &v) in vals.iter().enumerate() {
                        if v < vals[best] {
                            best = j;
                        }
                    }
                    t_final[i] = cand[c * k + best];
                    extra[i] = k;
                }
            }
        }
        Strategy::Projection => {
            let pts: Vec<Point3> = hits.iter().map(|&i| rays[i].at(st[i].t)).collect();
            let ns = field.nvf_batch(&pts);
            for (&i, n) in hits.iter().zip(ns) {
                extra[i] = 1;
                match n {
                    Ok(n) => {
                        let c = n.dot(rays[i].dir.vec()).abs();
                        if c >= cfg.min_cos {
                            t_final[i] = st[i].t + st[i].last_d / c;
                        } else {
                            fallback[i] = Some(Fallback::Grazing);
                        }
                    }
                    Err(FieldError::DegenerateNormal(_)) => fallback[i] = Some(Fallback::DegenerateNormal),
                    Err(e) => return Err(e.into()),
                }
            }
        }
    }

    Ok(st
        .iter()
        .enumerate()
        .map(|(i, s)| TraceResult {
            iters: s.iters,
            hit: (s.state == State::Hit).then(|| Hit {
                t: t_final[i],
                point: rays[i].at(t_final[i]),
                iters: s.iters,
                evals: s.iters + extra[i],
                fallback: fallback[i],
            }),
        })
        .collect())
}

/// Traces a single ray with `cfg.strategy`.
pub fn trace<F: Field + ?Sized>(field: &F, ray: &Ray, cfg: &TraceConfig) -> Result<TraceResult, TraceError> {
    Ok(trace_batch(field, std::slice::from_ref(ray), cfg)?.remove(0))
}

pub fn trace_standard<F: Field + ?Sized>(field: &F, ray: &Ray, cfg: &TraceConfig) -> Result<Option<Hit>, TraceError> {
    Ok(trace(field, ray, &cfg.with_strategy(Strategy::Standard))?.hit)
}

pub fn trace_resample<F: Field + ?Sized>(field: &F, ray: &Ray, cfg: &TraceConfig) -> Result<Option<Hit>, TraceError> {
    Ok(trace(field, ray, &cfg.with_strategy(Strategy::Resample))?.hit)
}

pub fn trace_projection<F: Field + ?Sized>(field: &F, ray: &Ray, cfg: &TraceConfig) -> Result<Option<Hit>, TraceError> {
    Ok(trace(field, ray, &cfg.with_strategy(Strategy::Projection))?.hit)
}

/// Depth, normal and iteration maps from one camera. Depth is the ray
/// parameter `t` (distance from the camera), `+inf` at misses.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderProduct {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    /// Unit normal facing the camera at hits; `None` at misses or where the
    /// normal field was degenerate.
    pub normal: Vec<Option<Direction3>>,
    pub iterations: Vec<u32>,
    pub fallback: Vec<Option<Fallback>>,
}

impl RenderProduct {
    pub fn hit_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }
}

/// Renders `field` through `cam`. Normals come from the field's normal
/// output at the final hit points, flipped to face the camera.
pub fn render<F: Field + ?Sized>(field: &F, cam: &Camera, cfg: &TraceConfig) -> Result<RenderProduct, TraceError> {
    let rays = make_rays(cam)?;
    let res = trace_batch(field, &rays, cfg)?;
    let hit_idx: Vec<usize> = (0..rays.len()).filter(|&i| res[i].hit.is_some()).collect();
    let pts: Vec<Point3> = hit_idx.iter().map(|&i| res[i].hit.unwrap().point).collect();
    let ns = field.nvf_batch(&pts);
    let mut normal = vec![None; rays.len()];
    for (&i, n) in hit_idx.iter().zip(ns) {
        match n {
            Ok(n) => normal[i] = Some(if n.dot(rays[i].dir.vec()) > 0.0 { -n } else { n }),
            Err(FieldError::DegenerateNormal(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(RenderProduct {
        width: cam.width,
        height: cam.height,
        depth: res.iter().map(|r| r.hit.map_or(f64::INFINITY, |h| h.t)).collect(),
        normal,
        iterations: res.iter().map(|r| r.iters as u32).collect(),
        fallback: res.iter().map(|r| r.hit.and_then(|h| h.fallback)).collect(),
    })
}

pub const DEPTH_MAGIC: &[u8; 12] = b"DUDEDEPTHv1\0";
pub const NORMAL_MAGIC: &[u8; 12] = b"DUDENORMLv1\0";

#[derive(Debug, Error)]
pub enum RenderIoError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic, expected {0}")]
    BadMagic(&'static str),
    #[error("payload size does not match header")]
    Size,
    #[error("png encoding: {0}")]
    Png(#[from] image::ImageError),
}

fn write_header(w: &mut impl Write, magic: &[u8; 12], width: usize, height: usize) -> io::Result<()> {
    w.write_all(magic)?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(height as u32).to_le_bytes())
}

/// Raw depth grid: magic, `u32` width, `u32` height, then `f32` per pixel
/// (row-major, `+inf` at misses).
pub fn write_depth(w: &mut impl Write, width: usize, height: usize, depth: &[f64]) -> io::Result<()> {
    write_header(w, DEPTH_MAGIC, width, height)?;
    let mut buf = Vec::with_capacity(depth.len() * 4);
    for &d in depth {
        buf.extend_from_slice(&(d as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Raw normal grid: same header layout, three `f32` per pixel, NaN where
/// there is no normal.
pub fn write_normals(w: &mut impl Write, width: usize, height: usize, normals: &[Option<Direction3>]) -> io::Result<()> {
    write_header(w, NORMAL_MAGIC, width, height)?;
    let mut buf = Vec::with_capacity(normals.len() * 12);
    for n in normals {
        let v = n.map_or([f32::NAN; 3], |n| {
            let v = n.vec();
            [v.x as f32, v.y as f32, v.z as f32]
        });
        for c in v {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    w.write_all(&buf)
}

fn read_grid(r: &mut impl Read, magic: &'static [u8; 12], per_pixel: usize) -> Result<(usize, usize, Vec<f32>), RenderIoError> {
    let mut m = [0u8; 12];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(RenderIoError::BadMagic(std::str::from_utf8(&magic[..11]).unwrap_or("?")));
    }
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    let w = u32::from_le_bytes(b) as usize;
    r.read_exact(&mut b)?;
    let h = u32::from_le_bytes(b) as usize;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let expect = w.checked_mul(h).and_then(|n| n.checked_mul(4 * per_pixel)).ok_or(RenderIoError::Size)?;
    if rest.len() != expect {
        return Err(RenderIoError::Size);
    }
    let vals = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((w, h, vals))
}

pub fn read_depth(r: &mut impl Read) -> Result<(usize, usize, Vec<f64>), RenderIoError> {
    let (w, h, v) = read_grid(r, DEPTH_MAGIC, 1)?;
    Ok((w, h, v.into_iter().map(|d| d as f64).collect()))
}

pub fn read_normals(r: &mut impl Read) -> Result<(usize, usize, Vec<Option<Direction3>>), RenderIoError> {
    let (w, h, v) = read_grid(r, NORMAL_MAGIC, 3)?;
    let ns = v
        .chunks_exact(3)
        .map(|c| Direction3::new(Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64)))
        .collect();
    Ok((w, h, ns))
}

/// 8-bit grayscale preview: nearest hit white, farthest hit dark, misses
/// black.
pub fn depth_preview(width: usize, height: usize, depth: &[f64]) -> image::GrayImage {
    let finite = depth.iter().copied().filter(|d| d.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), d| (a.min(d), b.max(d)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = depth
        .iter()
        .map(|&d| {
            if d.is_finite() {
                1 + (254.0 * (1.0 - (d - lo) / span)).round() as u8
            } else {
                0
            }
        })
        .collect();
    image::GrayImage::from_raw(width as u32, height as u32, px).expect("buffer matches size")
}

/// RGB preview with `n * 0.5 + 0.5` channel mapping, misses black.
pub fn normal_preview(width: usize, height: usize, normals: &[Option<Direction3>]) -> image::RgbImage {
    let px = normals
        .iter()
        .flat_map(|n| match n {
            Some(n) => n.vec().to_array().map(|c| ((c * 0.5 + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8),
            None => [0; 3],
        })
        .collect();
    image::RgbImage::from_raw(width as u32, height as u32, px).expect("buffer matches size")
}

/// Writes `<stem>.depth`, `<stem>.normals`, `<stem>.depth.png` and
/// `<stem>.normals.png`.
pub fn save_render(product: &RenderProduct, stem: &Path) -> Result<(), RenderIoError> {
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        std::path::PathBuf::from(s)
    };
    let (w, h) = (product.width, product.height);
    let mut buf = Vec::new();
    write_depth(&mut buf, w, h, &product.depth)?;
    fs::write(with(".depth"), &buf)?;
    buf.clear();
    write_normals(&mut buf, w, h, &product.normal)?;
    fs::write(with(".normals"), &buf)?;
    depth_preview(w, h, &product.depth).save_with_format(with(".depth.png"), image::ImageFormat::Png)?;
    normal_preview(w, h, &product.normal).save_with_format(with(".normals.png"), image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AnalyticField, CountingField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane() -> AnalyticField {
        AnalyticField::Plane {
            point: Vec3::ZERO,
            normal: Direction3::Z,
        }
    }

    fn sphere(r: f64) -> AnalyticField {
        AnalyticField::Sphere {
            center: Vec3::ZERO,
            radius: r,
        }
    }

    fn ray(o: Vec3, d: Vec3) -> Ray {
        Ray {
            origin: o,
            dir: Direction3::new(d).unwrap(),
        }
    }

    fn cfg(strategy: Strategy, eps: f64) -> TraceConfig {
        TraceConfig {
            strategy,
            eps,
            ..Default::default()
        }
    }

    #[test]
    fn plane_straight_down() {
        let h = trace_standard(&plane(), &ray(Vec3::new(0.0, 0.0, 0.5), Vec3::new(0.0, 0.0, -1.0)), &TraceConfig::default())
            .unwrap()
            .unwrap();
        assert_eq!(h.t, 0.5);
        assert_eq!(h.iters, 2);
    }

    #[test]
    fn sphere_axial_ray() {
        let h = trace_standard(&sphere(0.4), &ray(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0)), &TraceConfig::default())
            .unwrap()
            .unwrap();
        assert!((h.t - 0.6).abs() <= 1e-3);
    }

    #[test]
    fn grazing_ray_never_penetrates() {
        let eps = 1e-3;
        let s = sphere(0.4);
        for off in [0.4 + eps / 2.0, 0.4 + eps / 4.0, 0.4 - eps / 4.0, 0.4 + 2.0 * eps] {
            let r = ray(Vec3::new(-1.0, off, 0.0), Vec3::new(1.0, 0.0, 0.0));
            if let Some(h) = trace_standard(&s, &r, &cfg(Strategy::Standard, eps)).unwrap() {
                assert!(h.point.norm() >= 0.4, "{off}: {:?}", h.point);
            }
        }
    }

    #[test]
    fn marching_is_monotone_and_nonpenetrating() {
        // Replays the marching loop by hand, recording every step.
        let s = sphere(0.35);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let o = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
            let r = ray(o, Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), -1.0) - o * 0.5);
            let Some((t0, t1)) = box_interval(&r, TRACE_HALF_EXTENT) else { continue };
            let mut t = t0;
            let mut prev = f64::NEG_INFINITY;
            for _ in 0..200 {
                assert!(t > prev);
                prev = t;
                let d = s.udf(r.at(t)).unwrap();
                assert!(d >= 0.0);
                assert!(r.at(t).norm() >= 0.35 - 1e-12);
                if d <= 1e-3 || t > t1 {
                    break;
                }
                t += d;
            }
            let res = trace(&s, &r, &TraceConfig::default()).unwrap();
            if let Some(h) = res.hit {
                assert!(h.point.norm() >= 0.35 - 1e-12);
            }
        }
    }

    #[test]
    fn box_exit_and_empty_scene_miss() {
        let c = AnalyticField::Constant(5.0);
        assert!(trace_standard(&c, &ray(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0)), &TraceConfig::default())
            .unwrap()
            .is_none());
        // ray that never enters the box
        let r = ray(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 1.0));
        let res = trace(&sphere(0.3), &r, &TraceConfig::default()).unwrap();
        assert!(res.hit.is_none());
        assert_eq!(res.iters, 0);
        let cam = Camera {
            position: Vec3::new(0.0, 0.0, 2.0),
            look_at: Vec3::ZERO,
            up: Vec3::new(0.0, 1.0, 0.0),
            fov_y: 0.8,
            width: 8,
            height: 6,
        };
        let p = render(&c, &cam, &TraceConfig::default()).unwrap();
        assert_eq!(p.hit_count(), 0);
    }

    #[test]
    fn max_iters_is_a_miss() {
        let c = AnalyticField::Constant(1e-4 + 1e-3);
        let r = ray(Vec3::new(0.0, 0.0, 0.6), Vec3::new(0.0, 0.0, -1.0));
        let res = trace(&c, &r, &TraceConfig { max_iters: 7, ..Default::default() }).unwrap();
        assert!(res.hit.is_none());
        assert_eq!(res.iters, 7);
    }

    #[test]
    fn resample_recovers_crossing_within_grid_spacing() {
        let s = sphere(0.4);
        // eps small enough that the crossing, at most eps / cos ahead of the
        // marching stop, lies inside the window for these rays.
        let c = TraceConfig {
            strategy: Strategy::Resample,
            eps: 5e-3,
            ..Default::default()
        };
        let spacing = 2.0 * c.resample_window / (c.resample_k - 1) as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let o = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 1.0);
            let r = ray(o, Vec3::new(0.0, 0.0, -1.0));
            let h = trace_resample(&s, &r, &c).unwrap().unwrap();
            let rho2 = o.x * o.x + o.y * o.y;
            let t_true = 1.0 - (0.16 - rho2).sqrt();
            assert!((h.t - t_true).abs() <= spacing, "{} vs {}", h.t, t_true);
            assert_eq!(h.evals, h.iters + c.resample_k);
        }
    }

    #[test]
    fn resample_single_candidate_is_standard() {
        let s = sphere(0.4);
        let r = ray(Vec3::new(0.05, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0));
        let c = TraceConfig {
            resample_k: 1,
            eps: 1e-2,
            ..Default::default()
        };
        let a = trace_standard(&s, &r, &c).unwrap().unwrap();
        let b = trace_resample(&s, &r, &c).unwrap().unwrap();
        assert_eq!(a.t, b.t);
        assert_eq!(b.evals, a.iters + 1);
    }

    #[test]
    fn resample_on_monotone_segment_picks_window_end() {
        // Plane far below: the distance decreases along the whole window.
        let p = AnalyticField::Plane {
            point: Vec3::new(0.0, 0.0, -10.0),
            normal: Direction3::Z,
        };
        // eps above the first evaluation, so marching stops at the origin.
        let c = TraceConfig {
            strategy: Strategy::Resample,
            eps: 20.0,
            ..Default::default()
        };
        let r = ray(Vec3::new(0.0, 0.0, 0.5), Vec3::new(0.0, 0.0, -1.0));
        let h = trace_resample(&p, &r, &c).unwrap().unwrap();
        assert!((h.t - (0.0 + c.resample_window)).abs() < 1e-12);
    }

    #[test]
    fn projection_is_exact_on_oblique_plane_rays() {
        let f = plane();
        let c = cfg(Strategy::Projection, 1e-3);
        let r = ray(Vec3::new(-0.3, 0.0, 0.3), Vec3::new(1.0, 0.0, -1.0));
        let h = trace_projection(&f, &r, &c).unwrap().unwrap();
        assert!(f.udf(h.point).unwrap() < 1e-9);
        assert!((h.t - 0.3 * 2f64.sqrt()).abs() < 1e-9);
        assert_eq!(h.evals, h.iters + 1);
    }

    #[test]
    fn projection_falls_back_at_grazing_incidence() {
        // A ray nearly parallel to the plane, started just above it.
        let f = plane();
        let c = cfg(Strategy::Projection, 1e-3);
        let r = ray(Vec3::new(-0.5, 0.0, 5e-4), Vec3::new(1.0, 0.0, -0.01));
        let std = trace_standard(&f, &r, &c).unwrap().unwrap();
        let proj = trace_projection(&f, &r, &c).unwrap().unwrap();
        assert_eq!(std.t, proj.t);
        assert_eq!(proj.fallback, Some(Fallback::Grazing));
    }

    #[test]
    fn projection_beats_standard_on_sphere() {
        let s = sphere(0.4);
        let c = cfg(Strategy::Projection, 1e-2);
        for x in [0.0, 0.05, 0.1, -0.07] {
            let r = ray(Vec3::new(x, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0));
            let t_true = 1.0 - (0.16 - x * x).sqrt();
            let a = trace_standard(&s, &r, &c).unwrap().unwrap();
            let b = trace_projection(&s, &r, &c).unwrap().unwrap();
            let (ea, eb) = ((a.t - t_true).abs(), (b.t - t_true).abs());
            assert!(eb * 5.0 <= ea, "x {x}: standard {ea}, projection {eb}");
        }
    }

    #[test]
    fn resample_budget_is_exact() {
        let f = CountingField::new(sphere(0.3));
        let rays: Vec<Ray> = (0..50)
            .map(|i| ray(Vec3::new(i as f64 * 0.01 - 0.25, 0.0, 1.0), Vec3::new(0.0, 0.0, -1.0)))
            .collect();
        let c = cfg(Strategy::Resample, 1e-2);
        let res = trace_batch(&f, &rays, &c).unwrap();
        let expect: usize = res.iter().map(|r| r.iters + r.hit.map_or(0, |_| 100)).sum();
        assert_eq!(f.udf_calls() as usize, expect);
        assert_eq!(f.nvf_calls(), 0);
    }

    #[test]
    fn camera_rays() {
        let cam = Camera {
            position: Vec3::new(1.0, 0.5, 0.3),
            look_at: Vec3::new(0.0, 0.1, 0.0),
            up: Vec3::new(0.0, 0.0, 1.0),
            fov_y: 0.9,
            width: 7,
            height: 5,
        };
        let rays = make_rays(&cam).unwrap();
        let f = Direction3::new(cam.look_at - cam.position).unwrap().vec();
        let center = rays[2 * 7 + 3].dir.vec();
        assert!(center.distance(f) < 1e-12);
        for r in &rays {
            assert!((r.dir.vec().norm() - 1.0).abs() < 1e-12);
        }
        // top-center pixel sits (1 - 1/H) of the way to the half-angle
        let top = rays[3].dir.vec();
        let ang = top.dot(f).acos();
        let expect = ((1.0 - 1.0 / 5.0) * (0.45f64).tan()).atan();
        assert!((ang - expect).abs() < 1e-12);
        assert!(top.z > center.z);
        let bad = Camera { up: f, ..cam };
        assert_eq!(make_rays(&bad).unwrap_err(), CameraError::UpParallel);
        assert!(make_rays(&Camera { fov_y: 3.2, ..cam }).is_err());
        assert!(make_rays(&Camera { look_at: cam.position, ..cam }).is_err());
    }

    #[test]
    fn sphere_silhouette_matches_projected_disc() {
        let r = 0.3;
        let dist = 1.5;
        let cam = Camera {
            position: Vec3::new(0.0, 0.0, dist),
            look_at: Vec3::ZERO,
            up: Vec3::new(0.0, 1.0, 0.0),
            fov_y: 0.6,
            width: 256,
            height: 256,
        };
        let p = render(&sphere(r), &cam, &TraceConfig::default()).unwrap();
        // The silhouette cone has half-angle asin(r / dist); on the image
        // plane at unit distance its radius is tan of that.
        let rad = (r / dist).asin().tan();
        let px = 2.0 * (0.3f64).tan() / 256.0;
        let expect = std::f64::consts::PI * rad * rad / (px * px);
        let got = p.hit_count() as f64;
        assert!((got / expect - 1.0).abs() < 0.01, "{got} vs {expect}");
        let q = render(&sphere(r), &cam, &TraceConfig::default()).unwrap();
        assert_eq!(p, q);
        // normals face the camera
        let rays = make_rays(&cam).unwrap();
        for (n, ray) in p.normal.iter().zip(&rays) {
            if let Some(n) = n {
                assert!(n.dot(ray.dir.vec()) <= 0.0);
            }
        }
    }

    #[test]
    fn depth_and_normal_files_round_trip() {
        let depth = vec![0.5, f64::INFINITY, 1.25, 0.75, 2.0, f64::INFINITY];
        let normals = vec![Some(Direction3::Z), None, Some(Direction3::X), Some(Direction3::Y), None, None];
        let mut b = Vec::new();
        write_depth(&mut b, 3, 2, &depth).unwrap();
        assert_eq!(b.len(), 20 + 24);
        assert_eq!(read_depth(&mut b.as_slice()).unwrap(), (3, 2, depth.clone()));
        let mut n = Vec::new();
        write_normals(&mut n, 3, 2, &normals).unwrap();
        assert_eq!(read_normals(&mut n.as_slice()).unwrap(), (3, 2, normals.clone()));
        assert!(matches!(read_depth(&mut n.as_slice()), Err(RenderIoError::BadMagic(_))));
        assert!(matches!(read_depth(&mut &b[..b.len() - 1]), Err(RenderIoError::Size)));
        let img = depth_preview(3, 2, &depth);
        assert_eq!(img.as_raw(), &vec![255, 0, 128, 213, 1, 0]);
    }
}
