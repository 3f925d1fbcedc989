//! A small multilayer perceptron with hand-written reverse mode, the two
//! field losses, Adam, and the training loop for the distance/normal pair.
//!
//! Parameters are stored flat, layer by layer: the weight matrix (row-major,
//! `out x in`) followed by the bias. The same code runs in `f32` for training
//! and in `f64` for gradient checking.

use std::fmt::Debug;
use std::io::{self, Read, Write};
use std::ops::{Add, AddAssign, Mul, Sub};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::field::FieldModel;
use crate::geometry::Normalization;
use crate::sampler::{SampleSet, TrainingSample};

/// Rows per gradient chunk. Fixed so results do not depend on thread count.
const CHUNK_ROWS: usize = 256;

pub trait Real:
    Copy
    + Send
    + Sync
    + Default
    + PartialOrd
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `C <- alpha * A * B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-aliasing `m x k`,
    /// `k x n` and `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `out[rows x n] = x[rows x k] * w^T` where `w` is `n x k` row-major,
/// accumulated on top of what `out` holds.
fn matmul_xwt<T: Real>(x: &[T], w: &[T], out: &mut [T], rows: usize, k: usize, n: usize) {
    assert!(x.len() >= rows * k && w.len() >= n * k && out.len() >= rows * n);
    // SAFETY: bounds asserted above; the three slices are distinct borrows.
    unsafe {
        T::gemm(
            rows,
            k,
            n,
            T::ONE,
            x.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            T::ONE,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("input shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite input value at index {0}")]
    NonFiniteInput(usize),
}

/// Layer sizes. `depth` counts affine layers: `depth - 1` hidden ReLU
/// layers of width `hidden_dim`, then a linear output layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpArch {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub out_dim: usize,
}

impl MlpArch {
    pub fn new(in_dim: usize, hidden_dim: usize, depth: usize, out_dim: usize) -> Result<Self, MlpError> {
        let a = Self {
            in_dim,
            hidden_dim,
            depth,
            out_dim,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        if self.depth < 2 {
            return Err(MlpError::InvalidArch(format!("depth {} < 2", self.depth)));
        }
        if self.in_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(MlpError::InvalidArch("dimensions must be >= 1".into()));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` per layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let fan_in = if l == 0 { self.in_dim } else { self.hidden_dim };
                let fan_out = if l + 1 == self.depth { self.out_dim } else { self.hidden_dim };
                (fan_out, fan_in)
            })
            .collect()
    }

    /// `(weight_offset, bias_offset)` per layer in the flat parameter vector.
    pub fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.layer_shapes()
            .into_iter()
            .map(|(o, i)| {
                let w = off;
                off += o * i;
                let b = off;
                off += o;
                (w, b)
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    /// Multiply-adds for one forward pass of one input.
    pub fn forward_flops(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| 2 * o * i).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T = f32> {
    pub arch: MlpArch,
    pub data: Vec<T>,
}

impl<T: Real> MlpParams<T> {
    pub fn zeros(arch: MlpArch) -> Self {
        Self {
            arch,
            data: vec![T::ZERO; arch.num_params()],
        }
    }

    pub fn weights(&self, layer: usize) -> &[T] {
        let (o, i) = self.arch.layer_shapes()[layer];
        let (w, _) = self.arch.layer_offsets()[layer];
        &self.data[w..w + o * i]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [T] {
        let (o, i) = self.arch.layer_shapes()[layer];
        let (w, _) = self.arch.layer_offsets()[layer];
        &mut self.data[w..w + o * i]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        let (o, _) = self.arch.layer_shapes()[layer];
        let (_, b) = self.arch.layer_offsets()[layer];
        &self.data[b..b + o]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [T] {
        let (o, _) = self.arch.layer_shapes()[layer];
        let (_, b) = self.arch.layer_offsets()[layer];
        &mut self.data[b..b + o]
    }

    pub fn cast<U: Real>(&self) -> MlpParams<U> {
        MlpParams {
            arch: self.arch,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
pub fn init_mlp(arch: MlpArch, seed: u64) -> MlpParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = MlpParams::zeros(arch);
    for (l, (_, fan_in)) in arch.layer_shapes().into_iter().enumerate() {
        let bound = (6.0 / fan_in as f64).sqrt();
        for w in p.weights_mut(l) {
            *w = rng.random_range(-bound..bound) as f32;
        }
    }
    p
}

/// Activations kept for the backward pass: the input, every hidden ReLU
/// output, and the raw network output.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    pub rows: usize,
    pub acts: Vec<Vec<T>>,
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("tape has layers")
    }
}

/// Forward pass over `rows` inputs stored row-major in `xs`.
pub fn forward<T: Real>(params: &MlpParams<T>, xs: &[T], rows: usize) -> Result<Tape<T>, MlpError> {
    let arch = params.arch;
    if xs.len() != rows * arch.in_dim {
        return Err(MlpError::Shape {
            expected: rows * arch.in_dim,
            got: xs.len(),
        });
    }
    if let Some(i) = xs.iter().position(|v| !v.to_f64().is_finite()) {
        return Err(MlpError::NonFiniteInput(i));
    }
    let shapes = arch.layer_shapes();
    let mut acts = Vec::with_capacity(arch.depth + 1);
    acts.push(xs.to_vec());
    for (l, &(o, i)) in shapes.iter().enumerate() {
        let b = params.bias(l);
        let mut y: Vec<T> = Vec::with_capacity(rows * o);
        for _ in 0..rows {
            y.extend_from_slice(b);
        }
        matmul_xwt(&acts[l], params.weights(l), &mut y, rows, i, o);
        if l + 1 < arch.depth {
            for v in &mut y {
                if !(*v > T::ZERO) {
                    *v = T::ZERO;
                }
            }
        }
        acts.push(y);
    }
    Ok(Tape { rows, acts })
}

/// Reverse pass: gradients of `sum(upstream * output)` with respect to every
/// parameter, in the flat parameter layout. ReLU'(0) is taken as 0.
pub fn backward<T: Real>(params: &MlpParams<T>, tape: &Tape<T>, upstream: &[T]) -> Vec<T> {
    let arch = params.arch;
    let rows = tape.rows;
    assert_eq!(upstream.len(), rows * arch.out_dim);
    let shapes = arch.layer_shapes();
    let offsets = arch.layer_offsets();
    let mut grad = vec![T::ZERO; arch.num_params()];
    let mut delta = upstream.to_vec();
    for l in (0..arch.depth).rev() {
        let (o, i) = shapes[l];
        let (w_off, b_off) = offsets[l];
        let x = &tape.acts[l];
        {
            let gw = &mut grad[w_off..w_off + o * i];
            // gW = delta^T x
            // SAFETY: delta is rows x o, x is rows x i, gw is o x i.
            unsafe {
                T::gemm(
                    o,
                    rows,
                    i,
                    T::ONE,
                    delta.as_ptr(),
                    1,
                    o as isize,
                    x.as_ptr(),
                    i as isize,
                    1,
                    T::ZERO,
                    gw.as_mut_ptr(),
                    i as isize,
                    1,
                )
            }
        }
        let gb = &mut grad[b_off..b_off + o];
        for r in 0..rows {
            for (g, &d) in gb.iter_mut().zip(&delta[r * o..(r + 1) * o]) {
                *g += d;
            }
        }
        if l > 0 {
            let w = params.weights(l);
            let mut dx = vec![T::ZERO; rows * i];
            // dx = delta W
            // SAFETY: delta is rows x o, w is o x i, dx is rows x i.
            unsafe {
                T::gemm(
                    rows,
                    o,
                    i,
                    T::ONE,
                    delta.as_ptr(),
                    o as isize,
                    1,
                    w.as_ptr(),
                    i as isize,
                    1,
                    T::ZERO,
                    dx.as_mut_ptr(),
                    i as isize,
                    1,
                )
            }
            for (d, &a) in dx.iter_mut().zip(x) {
                if !(a > T::ZERO) {
                    *d = T::ZERO;
                }
            }
            delta = dx;
        }
    }
    grad
}

/// Distance loss for one sample: absolute residual.
pub fn loss_udf(pred: f64, d: f64) -> f64 {
    (pred - d).abs()
}

fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Normal loss, invariant to the sign of the target:
/// `min(|pred - v|, |pred + v|)`.
pub fn loss_nvf(pred: [f64; 3], v: [f64; 3]) -> f64 {
    let minus = norm3([pred[0] - v[0], pred[1] - v[1], pred[2] - v[2]]);
    let plus = norm3([pred[0] + v[0], pred[1] + v[1], pred[2] + v[2]]);
    minus.min(plus)
}

/// Subgradient of [`loss_nvf`] with respect to `pred`; ties take the
/// `pred - v` branch, a zero residual gives zero.
pub fn loss_nvf_grad(pred: [f64; 3], v: [f64; 3]) -> [f64; 3] {
    let minus = [pred[0] - v[0], pred[1] - v[1], pred[2] - v[2]];
    let plus = [pred[0] + v[0], pred[1] + v[1], pred[2] + v[2]];
    let (r, n) = if norm3(minus) <= norm3(plus) {
        (minus, norm3(minus))
    } else {
        (plus, norm3(plus))
    };
    if n > 0.0 {
        [r[0] / n, r[1] / n, r[2] / n]
    } else {
        [0.0; 3]
    }
}

/// Subgradient of [`loss_udf`]; zero at an exact fit.
pub fn loss_udf_grad(pred: f64, d: f64) -> f64 {
    let r = pred - d;
    if r > 0.0 {
        1.0
    } else if r < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Batch mean of the distance loss.
pub fn batch_loss_udf(preds: &[f64], targets: &[f64]) -> f64 {
    preds.iter().zip(targets).map(|(&p, &d)| loss_udf(p, d)).sum::<f64>() / preds.len() as f64
}

/// Batch mean of the normal loss.
pub fn batch_loss_nvf(preds: &[[f64; 3]], targets: &[[f64; 3]]) -> f64 {
    preds.iter().zip(targets).map(|(&p, &v)| loss_nvf(p, v)).sum::<f64>() / preds.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f32], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        let upd = cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        *p = (*p as f64 - upd) as f32;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub hidden_dim: usize,
    pub depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 4096,
            epochs: 200,
            seed: 0x7EA1,
            checkpoint_every: 0,
            hidden_dim: 512,
            depth: 6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(TrainError::Config("need lr > 0, 0 <= beta < 1, eps > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        self.udf_arch()?;
        Ok(())
    }

    pub fn udf_arch(&self) -> Result<MlpArch, TrainError> {
        Ok(MlpArch::new(3, self.hidden_dim, self.depth, 1)?)
    }

    pub fn nvf_arch(&self) -> Result<MlpArch, TrainError> {
        Ok(MlpArch::new(3, self.hidden_dim, self.depth, 3)?)
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error("training set has no training samples")]
    EmptyTrainSplit,
    #[error("non-finite {net} loss or gradient at epoch {epoch}, step {step}")]
    NonFinite { net: &'static str, epoch: usize, step: usize },
}

/// Losses for one epoch. Train losses are means over the epoch's batches
/// (measured before each update); val losses are measured after the epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_udf: f64,
    pub train_nvf: f64,
    pub val_udf: f64,
    pub val_nvf: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Per-step batch losses, in step order.
    pub step_udf: Vec<f64>,
    pub step_nvf: Vec<f64>,
    /// Epochs (1-based) whose parameters were retained; 0 means the
    /// initialization.
    pub best_epoch_udf: usize,
    pub best_epoch_nvf: usize,
}

fn gather(samples: &[TrainingSample], idx: &[usize]) -> (Vec<f32>, Vec<f64>, Vec<[f64; 3]>) {
    let mut xs = Vec::with_capacity(idx.len() * 3);
    let mut ds = Vec::with_capacity(idx.len());
    let mut ns = Vec::with_capacity(idx.len());
    for &i in idx {
        let s = &samples[i];
        xs.extend([s.query.x as f32, s.query.y as f32, s.query.z as f32]);
        ds.push(s.dist as f32 as f64);
        let n = s.normal.vec();
        ns.push([n.x as f32 as f64, n.y as f32 as f64, n.z as f32 as f64]);
    }
    (xs, ds, ns)
}

struct ChunkGrad {
    udf_loss: f64,
    nvf_loss: f64,
    udf_grad: Vec<f32>,
    nvf_grad: Vec<f32>,
}

/// Loss sums and gradients of the batch-mean losses over one chunk.
fn chunk_grad(
    udf: &MlpParams<f32>,
    nvf: &MlpParams<f32>,
    xs: &[f32],
    ds: &[f64],
    ns: &[[f64; 3]],
    batch_len: usize,
) -> ChunkGrad {
    let rows = ds.len();
    let inv = 1.0 / batch_len as f64;
    let tu = forward(udf, xs, rows).expect("finite training inputs");
    let pu: Vec<f64> = tu.output().iter().map(|&v| v as f64).collect();
    let udf_loss: f64 = pu.iter().zip(ds).map(|(&p, &d)| loss_udf(p, d)).sum();
    let up: Vec<f32> = pu.iter().zip(ds).map(|(&p, &d)| (loss_udf_grad(p, d) * inv) as f32).collect();
    let udf_grad = backward(udf, &tu, &up);

    let tn = forward(nvf, xs, rows).expect("finite training inputs");
    let out = tn.output();
    let mut nvf_loss = 0.0;
    let mut upn = Vec::with_capacity(rows * 3);
    for (r, v) in ns.iter().enumerate() {
        let p = [out[3 * r] as f64, out[3 * r + 1] as f64, out[3 * r + 2] as f64];
        nvf_loss += loss_nvf(p, *v);
        upn.extend(loss_nvf_grad(p, *v).map(|g| (g * inv) as f32));
    }
    let nvf_grad = backward(nvf, &tn, &upn);
    ChunkGrad {
        udf_loss,
        nvf_loss,
        udf_grad,
        nvf_grad,
    }
}

/// Mean distance and normal losses of both nets over `samples`.
pub fn evaluate_losses(udf: &MlpParams<f32>, nvf: &MlpParams<f32>, samples: &[TrainingSample]) -> (f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let sums: Vec<(f64, f64)> = idx
        .par_chunks(1024)
        .map(|c| {
            let (xs, ds, ns) = gather(samples, c);
            let pu = forward(udf, &xs, c.len()).expect("finite inputs");
            let pn = forward(nvf, &xs, c.len()).expect("finite inputs");
            let lu: f64 = pu.output().iter().zip(&ds).map(|(&p, &d)| loss_udf(p as f64, d)).sum();
            let o = pn.output();
            let ln: f64 = ns
                .iter()
                .enumerate()
                .map(|(r, v)| loss_nvf([o[3 * r] as f64, o[3 * r + 1] as f64, o[3 * r + 2] as f64], *v))
                .sum();
            (lu, ln)
        })
        .collect();
    let (lu, ln) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = samples.len() as f64;
    (lu / n, ln / n)
}

/// Trains the distance net (3 -> 1) and the normal net (3 -> 3) on the same
/// batches but with independent parameters and optimizer states. For each
/// net the parameters with the lowest validation loss are returned.
pub fn train_fields(samples: &SampleSet, cfg: &TrainConfig) -> Result<(FieldModel, TrainLog), TrainError> {
    train_fields_with(samples, cfg, |_, _| {})
}

/// As [`train_fields`], calling `on_epoch` after every epoch with the log
/// entry and the current (not best) parameters.
pub fn train_fields_with(
    samples: &SampleSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &FieldModel),
) -> Result<(FieldModel, TrainLog), TrainError> {
    cfg.validate()?;
    if samples.train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let mut udf = init_mlp(cfg.udf_arch()?, cfg.seed);
    let mut nvf = init_mlp(cfg.nvf_arch()?, cfg.seed.wrapping_add(1));
    let mut su = AdamState::new(udf.data.len());
    let mut sn = AdamState::new(nvf.data.len());
    let mut best_udf = (f64::INFINITY, udf.clone(), 0);
    let mut best_nvf = (f64::INFINITY, nvf.clone(), 0);
    let mut log = TrainLog {
        epochs: Vec::new(),
        step_udf: Vec::new(),
        step_nvf: Vec::new(),
        best_epoch_udf: 0,
        best_epoch_nvf: 0,
    };
    let mut order: Vec<usize> = (0..samples.train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5_4FF1E);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum_u, mut sum_n, mut seen) = (0.0, 0.0, 0usize);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (xs, ds, ns) = gather(&samples.train, batch);
            let parts: Vec<ChunkGrad> = (0..batch.len().div_ceil(CHUNK_ROWS))
                .into_par_iter()
                .map(|c| {
                    let r0 = c * CHUNK_ROWS;
                    let r1 = (r0 + CHUNK_ROWS).min(batch.len());
                    chunk_grad(&udf, &nvf, &xs[3 * r0..3 * r1], &ds[r0..r1], &ns[r0..r1], batch.len())
                })
                .collect();
            let mut gu = vec![0.0f64; udf.data.len()];
            let mut gn = vec![0.0f64; nvf.data.len()];
            let (mut lu, mut ln) = (0.0, 0.0);
            for p in &parts {
                lu += p.udf_loss;
                ln += p.nvf_loss;
                for (a, &b) in gu.iter_mut().zip(&p.udf_grad) {
                    *a += b as f64;
                }
                for (a, &b) in gn.iter_mut().zip(&p.nvf_grad) {
                    *a += b as f64;
                }
            }
            let global_step = log.step_udf.len();
            if !lu.is_finite() || gu.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    net: "distance",
                    epoch,
                    step: global_step,
                });
            }
            if !ln.is_finite() || gn.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFinite {
                    net: "normal",
                    epoch,
                    step: global_step,
                });
            }
            let _ = step;
            log.step_udf.push(lu / batch.len() as f64);
            log.step_nvf.push(ln / batch.len() as f64);
            sum_u += lu;
            sum_n += ln;
            seen += batch.len();
            adam_step(&mut udf.data, &gu, &mut su, &cfg.adam);
            adam_step(&mut nvf.data, &gn, &mut sn, &cfg.adam);
        }
        let (val_udf, val_nvf) = if samples.val.is_empty() {
            (sum_u / seen as f64, sum_n / seen as f64)
        } else {
            evaluate_losses(&udf, &nvf, &samples.val)
        };
        let entry = EpochLog {
            epoch,
            train_udf: sum_u / seen as f64,
            train_nvf: sum_n / seen as f64,
            val_udf,
            val_nvf,
        };
        log::info!(
            "epoch {epoch}: train udf {:.6} nvf {:.6}, val udf {:.6} nvf {:.6}",
            entry.train_udf,
            entry.train_nvf,
            entry.val_udf,
            entry.val_nvf
        );
        if val_udf < best_udf.0 {
            best_udf = (val_udf, udf.clone(), epoch);
        }
        if val_nvf < best_nvf.0 {
            best_nvf = (val_nvf, nvf.clone(), epoch);
        }
        log.epochs.push(entry);
        on_epoch(
            &entry,
            &FieldModel::new(udf.clone(), nvf.clone(), Normalization::IDENTITY, samples.source_digest)?,
        );
    }
    log.best_epoch_udf = best_udf.2;
    log.best_epoch_nvf = best_nvf.2;
    let model = FieldModel::new(best_udf.1, best_nvf.1, Normalization::IDENTITY, samples.source_digest)?;
    Ok((model, log))
}

pub const MODEL_MAGIC: &[u8; 12] = b"DUDEMODELv1\0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a model checkpoint (bad magic)")]
    BadMagic,
    #[error(transparent)]
    Arch(#[from] MlpError),
    #[error("checkpoint holds non-finite parameters")]
    NonFinite,
    #[error("trailing bytes after parameters")]
    Trailing,
}

/// Writes one net: magic, `u32` in/hidden/depth/out, then `f32` parameters
/// in the flat layout.
pub fn write_params(w: &mut impl Write, p: &MlpParams<f32>) -> io::Result<()> {
    w.write_all(MODEL_MAGIC)?;
    let a = p.arch;
    for v in [a.in_dim, a.hidden_dim, a.depth, a.out_dim] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(p.data.len() * 4);
    for v in &p.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_params(r: &mut impl Read) -> Result<MlpParams<f32>, CheckpointError> {
    let mut magic = [0u8; 12];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let arch = MlpArch::new(dims[0], dims[1], dims[2], dims[3])?;
    if arch.hidden_dim > 1 << 16 || arch.depth > 1 << 10 {
        return Err(MlpError::InvalidArch("implausibly large architecture".into()).into());
    }
    let n = arch.num_params();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Trailing);
    }
    let p = MlpParams { arch, data };
    if !p.is_finite() {
        return Err(CheckpointError::NonFinite);
    }
    Ok(p)
}
