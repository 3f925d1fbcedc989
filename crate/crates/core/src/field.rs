//! Distance and normal fields behind one interface: the trained network
//! pair, and exact analytic fields used as oracles.

use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{point_triangle_distance, Direction3, Normalization, Point3, TriangleSoup, Vec3};
use crate::mlp::{forward, read_params, write_params, CheckpointError, MlpError, MlpParams};

/// Raw normal-net outputs at or below this norm cannot be normalized.
pub const MIN_NORMAL_NORM: f64 = 1e-6;

/// Points per network batch during field evaluation.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("normal field output has near-zero norm {0:e}")]
    DegenerateNormal(f64),
    #[error("non-finite query point")]
    NonFiniteInput,
    #[error("non-finite network output")]
    NonFiniteOutput,
    #[error("at batch index {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<FieldError>,
    },
}

/// A distance field with an associated unoriented normal field. All
/// implementations are immutable and may be evaluated concurrently.
pub trait Field: Sync {
    fn udf(&self, x: Point3) -> Result<f64, FieldError>;
    fn nvf(&self, x: Point3) -> Result<Direction3, FieldError>;

    /// Elementwise [`Field::udf`]; the first failing index is reported.
    fn udf_batch(&self, xs: &[Point3]) -> Result<Vec<f64>, FieldError> {
        xs.par_iter()
            .enumerate()
            .map(|(i, &x)| self.udf(x).map_err(|e| at(i, e)))
            .collect()
    }

    /// Elementwise [`Field::nvf`], keeping per-element failures.
    fn nvf_batch(&self, xs: &[Point3]) -> Vec<Result<Direction3, FieldError>> {
        xs.par_iter().map(|&x| self.nvf(x)).collect()
    }
}

fn at(index: usize, e: FieldError) -> FieldError {
    FieldError::AtIndex {
        index,
        source: Box::new(e),
    }
}

/// Distance and normal for every point; fails on the first bad element.
pub fn eval_batch<F: Field + ?Sized>(field: &F, xs: &[Point3]) -> Result<Vec<(f64, Direction3)>, FieldError> {
    let d = field.udf_batch(xs)?;
    let n = field.nvf_batch(xs);
    d.into_iter()
        .zip(n)
        .enumerate()
        .map(|(i, (d, n))| n.map(|n| (d, n)).map_err(|e| at(i, e)))
        .collect()
}

impl<F: Field + ?Sized> Field for &F {
    fn udf(&self, x: Point3) -> Result<f64, FieldError> {
        (**self).udf(x)
    }
    fn nvf(&self, x: Point3) -> Result<Direction3, FieldError> {
        (**self).nvf(x)
    }
    fn udf_batch(&self, xs: &[Point3]) -> Result<Vec<f64>, FieldError> {
        (**self).udf_batch(xs)
    }
    fn nvf_batch(&self, xs: &[Point3]) -> Vec<Result<Direction3, FieldError>> {
        (**self).nvf_batch(xs)
    }
}

/// The trained pair. Inputs are in normalized scene units; `normalization`
/// maps the original soup into that frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    pub udf: MlpParams<f32>,
    pub nvf: MlpParams<f32>,
    pub normalization: Normalization,
    pub source_digest: [u8; 32],
}

impl FieldModel {
    pub fn new(
        udf: MlpParams<f32>,
        nvf: MlpParams<f32>,
        normalization: Normalization,
        source_digest: [u8; 32],
    ) -> Result<Self, MlpError> {
        if udf.arch.in_dim != 3 || udf.arch.out_dim != 1 {
            return Err(MlpError::InvalidArch("distance net must map 3 -> 1".into()));
        }
        if nvf.arch.in_dim != 3 || nvf.arch.out_dim != 3 {
            return Err(MlpError::InvalidArch("normal net must map 3 -> 3".into()));
        }
        Ok(Self {
            udf,
            nvf,
            normalization,
            source_digest,
        })
    }

    /// Raw (unclamped) distance-net outputs.
    pub fn raw_udf_batch(&self, xs: &[Point3]) -> Result<Vec<f32>, FieldError> {
        run_net(&self.udf, xs)
    }

    /// Raw (unnormalized) normal-net outputs, three per point.
    pub fn raw_nvf_batch(&self, xs: &[Point3]) -> Result<Vec<f32>, FieldError> {
        run_net(&self.nvf, xs)
    }
}

fn run_net(net: &MlpParams<f32>, xs: &[Point3]) -> Result<Vec<f32>, FieldError> {
    if let Some(i) = xs.iter().position(|x| !x.is_finite()) {
        return Err(at(i, FieldError::NonFiniteInput));
    }
    let parts: Vec<Vec<f32>> = xs
        .par_chunks(EVAL_CHUNK)
        .map(|c| {
            let flat: Vec<f32> = c.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
            let tape = forward(net, &flat, c.len()).map_err(|_| FieldError::NonFiniteInput)?;
            Ok(tape.acts.into_iter().next_back().expect("output layer"))
        })
        .collect::<Result<_, FieldError>>()?;
    Ok(parts.concat())
}

fn unit_from_raw(o: &[f32]) -> Result<Direction3, FieldError> {
    let v = Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64);
    if !v.is_finite() {
        return Err(FieldError::NonFiniteOutput);
    }
    let n = v.norm();
    if n <= MIN_NORMAL_NORM {
        return Err(FieldError::DegenerateNormal(n));
    }
    Direction3::new(v).ok_or(FieldError::DegenerateNormal(n))
}

impl Field for FieldModel {
    fn udf(&self, x: Point3) -> Result<f64, FieldError> {
        self.udf_batch(&[x]).map(|v| v[0]).map_err(strip_index)
    }

    fn nvf(&self, x: Point3) -> Result<Direction3, FieldError> {
        self.nvf_batch(&[x]).pop().expect("one result")
    }

    fn udf_batch(&self, xs: &[Point3]) -> Result<Vec<f64>, FieldError> {
        let raw = self.raw_udf_batch(xs)?;
        raw.iter()
            .enumerate()
            .map(|(i, &v)| {
                if v.is_finite() {
                    Ok((v as f64).max(0.0))
                } else {
                    Err(at(i, FieldError::NonFiniteOutput))
                }
            })
            .collect()
    }

    fn nvf_batch(&self, xs: &[Point3]) -> Vec<Result<Direction3, FieldError>> {
        match self.raw_nvf_batch(xs) {
            Ok(raw) => raw.chunks_exact(3).map(unit_from_raw).collect(),
            Err(FieldError::AtIndex { index, source }) => (0..xs.len())
                .map(|i| {
                    if i == index {
                        Err(*source.clone())
                    } else {
                        self.nvf_batch(&[xs[i]]).pop().expect("one result")
                    }
                })
                .collect(),
            Err(e) => vec![Err(e); xs.len()],
        }
    }
}

fn strip_index(e: FieldError) -> FieldError {
    match e {
        FieldError::AtIndex { source, .. } => *source,
        e => e,
    }
}

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("model manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Arch(#[from] MlpError),
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

fn net_paths(manifest: &Path) -> (PathBuf, PathBuf) {
    let name = manifest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    (
        manifest.with_file_name(format!("{name}.udf.bin")),
        manifest.with_file_name(format!("{name}.nvf.bin")),
    )
}

/// Saves the pair as `<path>.udf.bin`, `<path>.nvf.bin` and a key=value
/// manifest at `path` holding the normalization and source digest.
pub fn save_model(model: &FieldModel, path: &Path) -> Result<(), ModelIoError> {
    let io_err = |p: &Path| {
        let p = p.to_path_buf();
        move |source| ModelIoError::Io { path: p, source }
    };
    let (pu, pn) = net_paths(path);
    for (p, net) in [(&pu, &model.udf), (&pn, &model.nvf)] {
        let f = fs::File::create(p).map_err(io_err(p))?;
        let mut w = BufWriter::new(f);
        write_params(&mut w, net).and_then(|_| w.flush()).map_err(io_err(p))?;
    }
    let n = &model.normalization;
    let text = format!(
        "format=DUDEMODELv1\nudf={}\nnvf={}\nscale={:?}\noffset={:?},{:?},{:?}\nsource_digest={}\n",
        pu.file_name().unwrap().to_string_lossy(),
        pn.file_name().unwrap().to_string_lossy(),
        n.scale,
        n.offset.x,
        n.offset.y,
        n.offset.z,
        hex(&model.source_digest)
    );
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_model(path: &Path) -> Result<FieldModel, ModelIoError> {
    let text = fs::read_to_string(path).map_err(|source| ModelIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ModelIoError::Manifest(format!("malformed line {line:?}")))?;
        kv.insert(k.trim(), v.trim());
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| ModelIoError::Manifest(format!("missing key {k}")));
    if get("format")? != "DUDEMODELv1" {
        return Err(ModelIoError::Manifest("unsupported format".into()));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|_| ModelIoError::Manifest(format!("bad number {s:?}")));
    let scale = num(get("scale")?)?;
    let off: Vec<f64> = get("offset")?.split(',').map(num).collect::<Result<_, _>>()?;
    if off.len() != 3 || !(scale > 0.0) {
        return Err(ModelIoError::Manifest("bad normalization".into()));
    }
    let digest = unhex32(get("source_digest")?).ok_or_else(|| ModelIoError::Manifest("bad digest".into()))?;
    let read = |name: &str| {
        let p = path.with_file_name(name);
        let f = fs::File::open(&p).map_err(|source| ModelIoError::Io { path: p.clone(), source })?;
        read_params(&mut BufReader::new(f)).map_err(|source| ModelIoError::Checkpoint { path: p, source })
    };
    let udf = read(get("udf")?)?;
    let nvf = read(get("nvf")?)?;
    Ok(FieldModel::new(
        udf,
        nvf,
        Normalization {
            scale,
            offset: Vec3::new(off[0], off[1], off[2]),
        },
        digest,
    )?)
}

/// Exact distance fields with closed-form nearest-surface normals.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticField {
    Sphere { center: Point3, radius: f64 },
    Plane { point: Point3, normal: Direction3 },
    /// Sphere with the band `|z - center.z| < gap` removed, leaving two caps.
    SplitSphere { center: Point3, radius: f64, gap: f64 },
    /// Exact distance to every triangle of a soup (linear scan).
    SoupBrute(TriangleSoup),
    /// Constant value everywhere; not a distance field, used for empty scenes.
    Constant(f64),
}

impl AnalyticField {
    /// Distance and nearest surface point.
    pub fn closest(&self, x: Point3) -> (f64, Direction3) {
        match self {
            AnalyticField::Sphere { center, radius } => {
                let q = x - *center;
                let r = q.norm();
                ((r - radius).abs(), Direction3::new(q).unwrap_or(Direction3::Z))
            }
            AnalyticField::Plane { point, normal } => (normal.dot(x - *point).abs(), *normal),
            AnalyticField::SplitSphere { center, radius, gap } => {
                let q = x - *center;
                let Some(dir) = Direction3::new(q) else {
                    return (*radius, Direction3::Z);
                };
                if (dir.vec().z * radius).abs() >= *gap {
                    return ((q.norm() - radius).abs(), dir);
                }
                // The projection falls in the removed band: the nearest point
                // is on the rim circle of the cap on the same side.
                let s = if q.z >= 0.0 { 1.0 } else { -1.0 };
                let a = (radius * radius - gap * gap).sqrt();
                let rho = (q.x * q.x + q.y * q.y).sqrt();
                let (ux, uy) = if rho > 0.0 { (q.x / rho, q.y / rho) } else { (1.0, 0.0) };
                let rim = Vec3::new(a * ux, a * uy, s * gap);
                let n = Direction3::new(rim).expect("rim point is off-center");
                (q.distance(rim), n)
            }
            AnalyticField::SoupBrute(soup) => {
                let mut best = (f64::INFINITY, Direction3::Z);
                for t in soup.triangles() {
                    let (d, _) = point_triangle_distance(x, t);
                    if d < best.0 {
                        best = (d, t.face_normal);
                    }
                }
                best
            }
            AnalyticField::Constant(c) => (*c, Direction3::Z),
        }
    }
}

impl Field for AnalyticField {
    fn udf(&self, x: Point3) -> Result<f64, FieldError> {
        if !x.is_finite() {
            return Err(FieldError::NonFiniteInput);
        }
        Ok(self.closest(x).0)
    }

    fn nvf(&self, x: Point3) -> Result<Direction3, FieldError> {
        if !x.is_finite() {
            return Err(FieldError::NonFiniteInput);
        }
        Ok(self.closest(x).1)
    }
}

/// Wraps a field and counts evaluations.
#[derive(Debug)]
pub struct CountingField<F> {
    pub inner: F,
    udf_calls: AtomicU64,
    nvf_calls: AtomicU64,
}

impl<F> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            udf_calls: AtomicU64::new(0),
            nvf_calls: AtomicU64::new(0),
        }
    }

    pub fn udf_calls(&self) -> u64 {
        self.udf_calls.load(Ordering::Relaxed)
    }

    pub fn nvf_calls(&self) -> u64 {
        self.nvf_calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.udf_calls.store(0, Ordering::Relaxed);
        self.nvf_calls.store(0, Ordering::Relaxed);
    }
}

impl<F: Field> Field for CountingField<F> {
    fn udf(&self, x: Point3) -> Result<f64, FieldError> {
        self.udf_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.udf(x)
    }

    fn nvf(&self, x: Point3) -> Result<Direction3, FieldError> {
        self.nvf_calls.fetch_add(1, Ordering::Relaxed);
        self.inner.nvf(x)
    }

    fn udf_batch(&self, xs: &[Point3]) -> Result<Vec<f64>, FieldError> {
        self.udf_calls.fetch_add(xs.len() as u64, Ordering::Relaxed);
        self.inner.udf_batch(xs)
    }

    fn nvf_batch(&self, xs: &[Point3]) -> Vec<Result<Direction3, FieldError>> {
        self.nvf_calls.fetch_add(xs.len() as u64, Ordering::Relaxed);
        self.inner.nvf_batch(xs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Triangle;
    use crate::mlp::{init_mlp, MlpArch};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_point(rng: &mut impl Rng, h: f64) -> Point3 {
        Vec3::new(rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h))
    }

    fn sphere(r: f64) -> AnalyticField {
        AnalyticField::Sphere {
            center: Vec3::ZERO,
            radius: r,
        }
    }

    fn quad() -> TriangleSoup {
        let a = Vec3::new(-0.3, -0.3, 0.0);
        let b = Vec3::new(0.3, -0.3, 0.05);
        let c = Vec3::new(0.3, 0.3, 0.0);
        let d = Vec3::new(-0.3, 0.3, -0.05);
        TriangleSoup::new(vec![Triangle::new(a, b, c).unwrap(), Triangle::new(a, c, d).unwrap()]).unwrap()
    }

    #[test]
    fn sphere_examples() {
        let s = sphere(0.4);
        assert_eq!(s.udf(Vec3::ZERO).unwrap(), 0.4);
        assert_eq!(s.udf(Vec3::new(0.4, 0.0, 0.0)).unwrap(), 0.0);
        assert_eq!(s.nvf(Vec3::new(0.7, 0.0, 0.0)).unwrap(), Direction3::X);
    }

    #[test]
    fn plane_normal_is_constant() {
        let p = AnalyticField::Plane {
            point: Vec3::ZERO,
            normal: Direction3::Z,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let mut x = rand_point(&mut rng, 0.5);
            x.z = x.z.abs() + 1e-3;
            assert_eq!(p.nvf(x).unwrap(), Direction3::Z);
            assert_eq!(p.udf(x).unwrap(), x.z);
        }
    }

    #[test]
    fn soup_brute_matches_per_triangle_oracle() {
        let soup = quad();
        let f = AnalyticField::SoupBrute(soup.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = rand_point(&mut rng, 0.6);
            let ds: Vec<f64> = soup.triangles().iter().map(|t| point_triangle_distance(x, t).0).collect();
            let best = ds.iter().cloned().fold(f64::INFINITY, f64::min);
            let arg = ds.iter().position(|&d| d == best).unwrap();
            assert_eq!(f.udf(x).unwrap(), best);
            assert_eq!(f.nvf(x).unwrap(), soup.triangles()[arg].face_normal);
        }
    }

    #[test]
    fn analytic_fields_are_one_lipschitz() {
        let zoo = [
            sphere(0.3),
            AnalyticField::Plane {
                point: Vec3::new(0.0, 0.1, 0.0),
                normal: Direction3::new(Vec3::new(1.0, 2.0, -0.5)).unwrap(),
            },
            AnalyticField::SplitSphere {
                center: Vec3::new(0.05, 0.0, 0.0),
                radius: 0.4,
                gap: 0.1,
            },
            AnalyticField::SoupBrute(quad()),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for f in &zoo {
            for _ in 0..2000 {
                let x = rand_point(&mut rng, 0.7);
                let y = x + rand_point(&mut rng, 0.05);
                let (a, b) = (f.udf(x).unwrap(), f.udf(y).unwrap());
                assert!((a - b).abs() <= x.distance(y) * (1.0 + 1e-12) + 1e-15, "{f:?}");
            }
        }
    }

    #[test]
    fn split_sphere_mid_plane_matches_rejection_sampling() {
        let (r, gap) = (0.5, 0.1);
        let f = AnalyticField::SplitSphere {
            center: Vec3::ZERO,
            radius: r,
            gap,
        };
        // Oracle: dense uniform samples of the remaining caps.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts = Vec::new();
        while pts.len() < 200_000 {
            let v = rand_point(&mut rng, 1.0);
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                let p = v * (r / n);
                if p.z.abs() >= gap {
                    pts.push(p);
                }
            }
        }
        for rho in [0.0, 0.2, 0.45, 0.6] {
            let x = Vec3::new(rho, 0.0, 0.0);
            let oracle = pts.iter().map(|p| p.distance(x)).fold(f64::INFINITY, f64::min);
            let a = (r * r - gap * gap).sqrt();
            let closed = ((rho - a).powi(2) + gap * gap).sqrt();
            let got = f.udf(x).unwrap();
            assert!((got - closed).abs() < 1e-12);
            assert!(got <= oracle + 1e-12 && oracle - got < 5e-3, "rho {rho}: {got} vs {oracle}");
        }
    }

    #[test]
    fn split_sphere_outside_band_is_a_sphere() {
        let f = AnalyticField::SplitSphere {
            center: Vec3::ZERO,
            radius: 0.5,
            gap: 0.1,
        };
        let x = Vec3::new(0.1, 0.2, 0.6);
        assert_eq!(f.udf(x).unwrap(), (x.norm() - 0.5).abs());
        assert_eq!(f.udf(Vec3::ZERO).unwrap(), 0.5);
    }

    fn tiny_model() -> FieldModel {
        let u = init_mlp(MlpArch::new(3, 32, 3, 1).unwrap(), 1);
        let n = init_mlp(MlpArch::new(3, 32, 3, 3).unwrap(), 2);
        FieldModel::new(u, n, Normalization::IDENTITY, [0; 32]).unwrap()
    }

    #[test]
    fn neural_batch_equals_scalar_and_is_pure() {
        let m = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<Point3> = (0..1000).map(|_| rand_point(&mut rng, 0.6)).collect();
        let batch = eval_batch(&m, &xs).unwrap();
        for (x, (d, n)) in xs.iter().zip(&batch) {
            assert_eq!(m.udf(*x).unwrap(), *d);
            assert_eq!(m.nvf(*x).unwrap(), *n);
            assert!(*d >= 0.0);
        }
        assert_eq!(eval_batch(&m, &xs).unwrap(), batch);
        let mut rev = xs.clone();
        rev.reverse();
        let rb = eval_batch(&m, &rev).unwrap();
        assert!(rb.iter().rev().eq(batch.iter()));
    }

    #[test]
    fn neural_errors() {
        let mut m = tiny_model();
        assert!(matches!(m.udf(Vec3::new(f64::NAN, 0.0, 0.0)), Err(FieldError::NonFiniteInput)));
        // zero output layer: degenerate normals everywhere
        let last = m.nvf.arch.depth - 1;
        m.nvf.weights_mut(last).fill(0.0);
        assert_eq!(m.nvf(Vec3::ZERO), Err(FieldError::DegenerateNormal(0.0)));
        let r = eval_batch(&m, &[Vec3::ZERO, Vec3::new(1.0, 0.0, 0.0)]);
        assert!(matches!(r, Err(FieldError::AtIndex { index: 0, .. })));
        // negative raw outputs are clamped, not reflected
        m.udf.bias_mut(m.udf.arch.depth - 1)[0] = -100.0;
        assert_eq!(m.udf(Vec3::ZERO).unwrap(), 0.0);
    }

    #[test]
    fn model_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_model();
        m.normalization = Normalization {
            scale: 0.123456789,
            offset: Vec3::new(0.1, -0.2, 1.0 / 3.0),
        };
        m.source_digest = [0xab; 32];
        let p = dir.path().join("model");
        save_model(&m, &p).unwrap();
        assert_eq!(load_model(&p).unwrap(), m);
    }

    #[test]
    fn counting_wrapper_counts() {
        let f = CountingField::new(sphere(0.3));
        f.udf(Vec3::ZERO).unwrap();
        f.udf_batch(&[Vec3::ZERO; 5]).unwrap();
        f.nvf(Vec3::ZERO).unwrap();
        assert_eq!((f.udf_calls(), f.nvf_calls()), (6, 1));
    }
}
