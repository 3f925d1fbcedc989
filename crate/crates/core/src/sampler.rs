//! Training-set construction: surface samples with face normals, Gaussian
//! perturbations at two scales, uniform box samples, and nearest-sample
//! labelling.
//!
//! Every random draw comes from a ChaCha stream keyed by (seed, purpose,
//! index), so results do not depend on how work is split across threads.

use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{Direction3, Point3, TriangleSoup, Vec3};
use crate::nn::NnIndex;

/// Standard deviations of the two perturbation scales (variances 0.0025 and
/// 0.00025).
pub const PERTURB_SIGMAS: [f64; 2] = [0.05, 0.015_811_388_300_841_896];
/// Half-width of the uniform sampling box.
pub const UNIFORM_HALF_EXTENT: f64 = 0.6;
/// Queries closer than this to their nearest surface sample are dropped.
pub const MIN_QUERY_DIST: f64 = 1e-7;
/// Fraction of the labelled pool held out for validation.
pub const VAL_FRACTION: f64 = 0.1;

const PURPOSE_SURFACE: u64 = 1;
const PURPOSE_PERTURB: u64 = 2;
const PURPOSE_UNIFORM: u64 = 3;
pub(crate) const PURPOSE_MESH: u64 = 4;

/// RNG for item `index` of a given purpose. Independent of thread count.
pub(crate) fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceSample {
    pub position: Point3,
    pub normal: Direction3,
    /// Index of the soup triangle the sample was drawn from.
    pub triangle: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSample {
    pub query: Point3,
    pub dist: f64,
    pub normal: Direction3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub train: Vec<TrainingSample>,
    pub val: Vec<TrainingSample>,
    pub rng_seed: u64,
    pub source_digest: [u8; 32],
}

/// Area-weighted triangle picker shared with mesh-point sampling.
pub(crate) struct AreaTable {
    cumulative: Vec<f64>,
}

impl AreaTable {
    pub(crate) fn new(areas: impl IntoIterator<Item = f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = areas
            .into_iter()
            .map(|a| {
                acc += a;
                acc
            })
            .collect();
        Self { cumulative }
    }

    pub(crate) fn total(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Triangle whose cumulative-area interval contains `u * total`.
    pub(crate) fn pick(&self, u: f64) -> usize {
        let target = u * self.total();
        let i = self.cumulative.partition_point(|&c| c <= target);
        i.min(self.cumulative.len() - 1)
    }
}

/// Uniform point on a triangle from two uniforms in [0, 1).
pub(crate) fn barycentric_point(a: Point3, b: Point3, c: Point3, u: f64, v: f64) -> Point3 {
    let su = u.sqrt();
    a * (1.0 - su) + b * (su * (1.0 - v)) + c * (su * v)
}

/// Draws `n` area-weighted uniform points on the soup, each carrying the
/// face normal of its triangle.
pub fn sample_surface(soup: &TriangleSoup, n: usize, seed: u64) -> Vec<SurfaceSample> {
    let tris = soup.triangles();
    let table = AreaTable::new(tris.iter().map(|t| t.area()));
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, PURPOSE_SURFACE, i as u64);
            let ti = table.pick(rng.random());
            let t = &tris[ti];
            let position = barycentric_point(t.v0, t.v1, t.v2, rng.random(), rng.random());
            SurfaceSample {
                position,
                normal: t.face_normal,
                triangle: ti as u32,
            }
        })
        .collect()
}

/// Two perturbed queries per surface sample, at the default scales.
pub fn perturb_queries(xs: &[SurfaceSample], seed: u64) -> Vec<Point3> {
    perturb_queries_with(xs, seed, PERTURB_SIGMAS)
}

/// Like [`perturb_queries`] with explicit standard deviations. Output order
/// is (sample 0 scale 0, sample 0 scale 1, sample 1 scale 0, ...).
pub fn perturb_queries_with(xs: &[SurfaceSample], seed: u64, sigmas: [f64; 2]) -> Vec<Point3> {
    xs.par_iter()
        .enumerate()
        .flat_map_iter(|(i, s)| {
            let mut rng = stream_rng(seed, PURPOSE_PERTURB, i as u64);
            sigmas.map(|sigma| {
                let e = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                s.position + e * sigma
            })
        })
        .collect()
}

/// `n` i.i.d. uniform points in the padded box [-0.6, 0.6]^3.
pub fn sample_uniform_box(n: usize, seed: u64) -> Vec<Point3> {
    let h = UNIFORM_HALF_EXTENT;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, PURPOSE_UNIFORM, i as u64);
            Vec3::new(rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h))
        })
        .collect()
}

/// Labels each query with the distance and normal of its exact nearest
/// surface sample, drops near-zero distances, shuffles and splits 90/10.
///
/// # Panics
/// If `xs` is empty.
pub fn build_training_set(queries: &[Point3], xs: &[SurfaceSample], split_seed: u64) -> SampleSet {
    let index = NnIndex::new(xs.iter().map(|s| s.position).collect());
    build_training_set_with_index(queries, xs, &index, split_seed)
}

pub fn build_training_set_with_index(
    queries: &[Point3],
    xs: &[SurfaceSample],
    index: &NnIndex,
    split_seed: u64,
) -> SampleSet {
    let labelled: Vec<Option<TrainingSample>> = queries
        .par_iter()
        .map(|&q| {
            let nb = index.nearest(q);
            let dist = nb.dist();
            (dist >= MIN_QUERY_DIST).then(|| TrainingSample {
                query: q,
                dist,
                normal: xs[nb.index].normal,
            })
        })
        .collect();
    let mut pool: Vec<TrainingSample> = labelled.into_iter().flatten().collect();
    let dropped = queries.len() - pool.len();
    if dropped > 0 {
        log::info!("dropped {dropped} queries lying on the sampled surface");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    pool.shuffle(&mut rng);
    let n_val = (pool.len() as f64 * VAL_FRACTION).round() as usize;
    let train = pool.split_off(n_val);
    SampleSet {
        train,
        val: pool,
        rng_seed: split_seed,
        source_digest: [0; 32],
    }
}

/// Sampling counts and seed for the full recipe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub n_surface: usize,
    pub n_uniform: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_surface: 250_000,
            n_uniform: 25_000,
            seed: 0x5EED,
        }
    }
}

/// The full recipe: surface samples, two perturbations each, uniform box
/// points, labelling and split. Sub-seeds derive from `cfg.seed`.
pub fn generate_sample_set(soup: &TriangleSoup, cfg: &SamplerConfig) -> SampleSet {
    let xs = sample_surface(soup, cfg.n_surface, cfg.seed);
    let mut queries = perturb_queries(&xs, cfg.seed);
    queries.extend(sample_uniform_box(cfg.n_uniform, cfg.seed));
    let mut set = build_training_set(&queries, &xs, cfg.seed);
    set.source_digest = soup_digest(soup);
    set
}

/// SHA-256 over the soup's vertex coordinates (little-endian f64, triangle
/// order).
pub fn soup_digest(soup: &TriangleSoup) -> [u8; 32] {
    let mut h = Sha256::new();
    for t in soup.triangles() {
        for v in t.vertices() {
            for c in v.to_array() {
                h.update(c.to_le_bytes());
            }
        }
    }
    h.finalize().into()
}

pub const SAMPLE_SET_MAGIC: &[u8; 16] = b"DUDESAMPLESETv1\0";

#[derive(Debug, Error)]
pub enum SampleSetIoError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a sample set file (bad magic)")]
    BadMagic,
    #[error("record {0} has a non-unit normal or invalid distance")]
    BadRecord(usize),
}

fn write_record(w: &mut impl Write, s: &TrainingSample) -> io::Result<()> {
    let n = s.normal.vec();
    for v in [s.query.x, s.query.y, s.query.z, s.dist, n.x, n.y, n.z] {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_sample_set(w: &mut impl Write, set: &SampleSet) -> io::Result<()> {
    w.write_all(SAMPLE_SET_MAGIC)?;
    w.write_all(&(set.train.len() as u64).to_le_bytes())?;
    w.write_all(&(set.val.len() as u64).to_le_bytes())?;
    for s in set.train.iter().chain(&set.val) {
        write_record(w, s)?;
    }
    w.write_all(&set.rng_seed.to_le_bytes())?;
    w.write_all(&set.source_digest)?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_sample_set(r: &mut impl Read) -> Result<SampleSet, SampleSetIoError> {
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic)?;
    if &magic != SAMPLE_SET_MAGIC {
        return Err(SampleSetIoError::BadMagic);
    }
    let n_train = read_u64(r)? as usize;
    let n_val = read_u64(r)? as usize;
    let total = n_train.checked_add(n_val).ok_or(SampleSetIoError::BadRecord(0))?;
    let mut records = Vec::new();
    let mut buf = [0u8; 28];
    for i in 0..total {
        r.read_exact(&mut buf)?;
        let f: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let query = Vec3::new(f[0], f[1], f[2]);
        let normal = Direction3::from_unit(Vec3::new(f[4], f[5], f[6]));
        match normal {
            Some(normal) if f[3] >= 0.0 && query.is_finite() => records.push(TrainingSample {
                query,
                dist: f[3],
                normal,
            }),
            _ => return Err(SampleSetIoError::BadRecord(i)),
        }
    }
    let rng_seed = read_u64(r)?;
    let mut source_digest = [0u8; 32];
    r.read_exact(&mut source_digest)?;
    let val = records.split_off(n_train);
    Ok(SampleSet {
        train: records,
        val,
        rng_seed,
        source_digest,
    })
}
