//! Score-ascent samplers over a denoiser prior.
//!
//! Unconditional sampling iterates partial denoiser steps with controlled
//! noise injection; its noise level is estimated from the residual magnitude
//! and anneals geometrically toward the stop level. Measurement-constrained
//! sampling replaces the residual with a conditional direction that splits
//! orthogonally: the prior residual projected onto the null space of the
//! measurement matrix, plus the exact measurement correction on its range.
//!
//! The same loop runs in three guises with bit-identical forward values:
//! single-chain with a full trace, batched/eager for evaluation, and batched
//! while recording for differentiation through the unrolled iteration. In
//! recorded runs the realized step count and per-chain stopping masks are
//! frozen from the forward pass, and injected noise is treated as constant.

use std::sync::Arc;

use rayon::prelude::*;

use crate::denoiser::{Denoiser, DenoiserModel, GaussianOracle};
use crate::error::{OlmError, Result};
use crate::ndgrad::graph::{Cx, Eager, GraphBuilder, NodeId};
use crate::ndgrad::tensor;
use crate::ndgrad::Tensor;
use crate::rng::{self, tag};

/// Step size, injected-noise fraction, stop level, initial level, unroll cap,
/// and the mean level used to center unmeasured directions (0 for point
/// data, 0.5 for images).
#[derive(Clone, Copy, Debug)]
pub struct SamplerConfig {
    pub h: f64,
    pub beta: f64,
    pub sigma_end: f64,
    pub sigma0: f64,
    pub t_max: usize,
    pub mean_level: f64,
    pub seed: u64,
}

impl SamplerConfig {
    /// Defaults for zero-mean point data.
    pub fn for_points(seed: u64) -> Self {
        Self {
            h: 0.1,
            beta: 0.1,
            sigma_end: 0.01,
            sigma0: 1.0,
            t_max: 400,
            mean_level: 0.0,
            seed,
        }
    }

    /// Defaults for image data in `[0, 1]`: unmeasured directions start at
    /// mid-gray.
    pub fn for_images(seed: u64) -> Self {
        Self { mean_level: 0.5, ..Self::for_points(seed) }
    }

    /// Rejects non-positive or out-of-range parameters. A stop level at or
    /// above the initial level is allowed and simply terminates immediately.
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h <= 1.0) {
            return Err(OlmError::Config("step size h must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(OlmError::Config("beta must be in [0, 1]".into()));
        }
        if self.sigma_end <= 0.0 || self.sigma0 <= 0.0 {
            return Err(OlmError::Config("noise levels must be positive".into()));
        }
        if self.t_max < 1 {
            return Err(OlmError::Config("t_max must be at least 1".into()));
        }
        Ok(())
    }

    /// Scale of injected noise relative to the current level:
    /// `((1 - beta h)^2 - (1 - h)^2)^(1/2)`. Zero at `beta = 1`.
    pub fn gamma_coeff(&self) -> f64 {
        let a = (1.0 - self.beta * self.h).powi(2) - (1.0 - self.h).powi(2);
        debug_assert!(a >= -1e-15);
        a.max(0.0).sqrt()
    }
}

/// Orthonormal-column measurement matrix `[d, k]`, `k <= d`.
#[derive(Clone, Debug)]
pub struct MeasurementMatrix {
    m: Tensor,
}

impl MeasurementMatrix {
    pub const ORTHO_TOL: f64 = 1e-8;

    pub fn new(m: Tensor) -> Result<Self> {
        if m.rank() != 2 || m.shape()[1] > m.shape()[0] {
            return Err(OlmError::ShapeMismatch(format!(
                "measurement matrix must be d x k with k <= d, got {:?}",
                m.shape()
            )));
        }
        let defect = orthonormality_defect(&m);
        if defect >= Self::ORTHO_TOL {
            return Err(OlmError::Invalid(format!(
                "columns not orthonormal: defect {:.3e}",
                defect
            )));
        }
        Ok(Self { m })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.m
    }

    pub fn d(&self) -> usize {
        self.m.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.m.shape()[1]
    }

    /// `M^T x` for a single vector or batch of rows.
    pub fn measure(&self, x: &Tensor) -> Tensor {
        if x.rank() == 1 {
            let row = x.clone().reshaped(vec![1, x.len()]).expect("vector");
            tensor::matmul(&row, &self.m)
                .reshaped(vec![self.k()])
                .expect("k vector")
        } else {
            tensor::matmul(x, &self.m)
        }
    }
}

/// `max |M^T M - I|`.
pub fn orthonormality_defect(m: &Tensor) -> f64 {
    let gram = tensor::matmul(&tensor::transpose(m), m);
    let k = m.shape()[1];
    let mut worst = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.data()[i * k + j] - target).abs());
        }
    }
    worst
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub sigma: f64,
    pub direction_norm: f64,
    pub meas_residual: f64,
}

/// Per-step history of a single chain: states, injected noise, noise-level
/// estimates, and whether the unroll cap was hit before the stop level.
#[derive(Default)]
pub struct SampleTrace {
    pub states: Vec<Tensor>,
    pub noise: Vec<Tensor>,
    pub steps: Vec<StepRecord>,
    pub hit_cap: bool,
}

impl SampleTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// CSV with columns `t, sigma, direction_norm, meas_residual`.
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "t,sigma,direction_norm,meas_residual")?;
        for (t, s) in self.steps.iter().enumerate() {
            writeln!(w, "{},{},{},{}", t + 1, s.sigma, s.direction_norm, s.meas_residual)?;
        }
        Ok(())
    }
}

/// Batched denoiser application inside an execution context, with per-row
/// noise-level hints for level-aware oracles.
pub trait BatchDenoise<C: Cx>: Send + Sync {
    fn dim(&self) -> usize;
    fn apply(&self, cx: &mut C, y: &C::Id, sigma_hints: &[f64]) -> C::Id;
}

impl<C: Cx> BatchDenoise<C> for DenoiserModel {
    fn dim(&self) -> usize {
        Denoiser::dim(self)
    }

    fn apply(&self, cx: &mut C, y: &C::Id, _sigma_hints: &[f64]) -> C::Id {
        self.forward_cx(cx, y)
    }
}

impl BatchDenoise<Eager> for GaussianOracle {
    fn dim(&self) -> usize {
        Denoiser::dim(self)
    }

    fn apply(&self, cx: &mut Eager, y: &Arc<Tensor>, sigma_hints: &[f64]) -> Arc<Tensor> {
        let d = Denoiser::dim(self);
        let rows = y.shape()[0];
        debug_assert_eq!(sigma_hints.len(), rows);
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = Tensor::from_raw(vec![d], y.row(r).to_vec());
            let xhat = self.denoise_with_level(&row, sigma_hints[r]);
            out.extend_from_slice(xhat.data());
        }
        cx.constant(Tensor::from_raw(vec![rows, d], out))
    }
}

/// Outcome of a batched run inside context `C`.
pub struct BatchRun<Id> {
    /// `[rows, d]` final chain states.
    pub y: Id,
    pub realized_steps: usize,
    pub hit_cap: bool,
}

fn draw_noise_rows(
    cfg: &SamplerConfig,
    chain_ids: &[u64],
    noise_streams: &mut [rand_chacha::ChaCha12Rng],
    active: &[bool],
    d: usize,
) -> Tensor {
    let _ = chain_ids;
    let rows = active.len();
    let mut z = vec![0.0; rows * d];
    for (r, &is_active) in active.iter().enumerate() {
        if is_active {
            let v = rng::normal_vec(&mut noise_streams[r], d);
            z[r * d..(r + 1) * d].copy_from_slice(&v);
        }
    }
    let _ = cfg;
    Tensor::from_raw(vec![rows, d], z)
}

fn mask_tensor(active: &[bool]) -> Tensor {
    Tensor::from_raw(
        vec![active.len()],
        active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
    )
}

/// Unconditional sampling: ascend the denoiser residual with annealed noise
/// injection until the residual-estimated level drops below the stop level.
///
/// One loop iteration per chain and step: residual `s = f(y) - y`, level
/// `sigma^2 = |s|^2 / d`, noise scale `gamma = gamma_coeff * sigma`, update
/// `y <- y + h s + gamma z`. Rows stop independently; stopped rows freeze.
pub fn prior_batch_cx<C: Cx, M: BatchDenoise<C> + ?Sized>(
    cx: &mut C,
    model: &M,
    cfg: &SamplerConfig,
    chain_ids: &[u64],
    mut trace: Option<&mut SampleTrace>,
) -> Result<BatchRun<C::Id>> {
    cfg.validate()?;
    let d = model.dim();
    let rows = chain_ids.len();
    let gamma_c = cfg.gamma_coeff();

    let mut init_noise = Vec::with_capacity(rows * d);
    for &cid in chain_ids {
        let mut s = rng::stream(cfg.seed, tag::CHAIN_INIT, cid);
        init_noise.extend(rng::normal_vec(&mut s, d));
    }
    let mut noise_streams: Vec<_> = chain_ids
        .iter()
        .map(|&cid| rng::stream(cfg.seed, tag::CHAIN, cid))
        .collect();

    let z0 = cx.constant(Tensor::from_raw(vec![rows, d], init_noise));
    let z0s = cx.scale(&z0, cfg.sigma0);
    let mut y = cx.add_scalar(&z0s, cfg.mean_level);

    // Entry level is the configured initial level; if it is already below
    // the stop level the loop never runs and y0 is returned.
    let mut sigma_host = vec![cfg.sigma0; rows];
    let mut active: Vec<bool> = sigma_host.iter().map(|&s| s >= cfg.sigma_end).collect();
    let mut t = 0usize;
    let inv_d = 1.0 / d as f64;

    while active.iter().any(|&a| a) && t < cfg.t_max {
        t += 1;
        let f = model.apply(cx, &y, &sigma_host);
        let s = cx.sub(&f, &y);
        let sq = cx.square(&s);
        let rss = cx.row_sum(&sq);
        let var = cx.scale(&rss, inv_d);
        let sigma_vec = cx.sqrt(&var);
        {
            let sv = cx.value(&sigma_vec).data().to_vec();
            for (r, &is_active) in active.iter().enumerate() {
                if is_active {
                    if !sv[r].is_finite() {
                        return Err(OlmError::NonFinite(format!("sampler state, step {}", t)));
                    }
                    sigma_host[r] = sv[r];
                }
            }
        }
        let gamma_vec = cx.scale(&sigma_vec, gamma_c);
        let z = draw_noise_rows(cfg, chain_ids, &mut noise_streams, &active, d);
        if let Some(tr) = trace.as_deref_mut() {
            tr.states.push(cx.value(&y).clone());
            tr.noise.push(z.clone());
            tr.steps.push(StepRecord {
                sigma: sigma_host[0],
                direction_norm: cx.value(&rss).data()[0].sqrt(),
                meas_residual: 0.0,
            });
        }
        let zc = cx.constant(z);
        let noise_part = cx.row_scale(&zc, &gamma_vec);
        let step_part = cx.scale(&s, cfg.h);
        let update = cx.add(&step_part, &noise_part);
        let mask = cx.constant(mask_tensor(&active));
        let masked = cx.row_scale(&update, &mask);
        y = cx.add(&y, &masked);
        for (r, a) in active.iter_mut().enumerate() {
            if *a && sigma_host[r] < cfg.sigma_end {
                *a = false;
            }
        }
    }

    let hit_cap = active.iter().any(|&a| a);
    if let Some(tr) = trace {
        tr.hit_cap = hit_cap;
    }
    Ok(BatchRun { y, realized_steps: t, hit_cap })
}

/// Measurement-constrained sampling. Initialization centers unmeasured
/// directions at the mean level and the measured ones at the back-projected
/// measurement; the conditional direction is
/// `l = (I - M M^T) g(y) + M (m - M^T y)`.
///
/// The first level estimate comes from the prior residual alone; subsequent
/// levels come from the conditional direction, and the noise scale at each
/// step uses the previous level.
pub fn conditional_batch_cx<C: Cx, M: BatchDenoise<C> + ?Sized>(
    cx: &mut C,
    model: &M,
    q: &C::Id,
    meas: &C::Id,
    cfg: &SamplerConfig,
    chain_ids: &[u64],
    mut trace: Option<&mut SampleTrace>,
) -> Result<BatchRun<C::Id>> {
    cfg.validate()?;
    let d = model.dim();
    let rows = chain_ids.len();
    let k = cx.value(q).shape()[1];
    debug_assert_eq!(cx.value(q).shape(), [d, k]);
    debug_assert_eq!(cx.value(meas).shape(), [rows, k]);
    if !cx.value(meas).all_finite() {
        return Err(OlmError::NonFinite("measurements".into()));
    }
    let gamma_c = cfg.gamma_coeff();
    let inv_d = 1.0 / d as f64;

    let qt = cx.transpose(q);

    // mu = mean_level (1 - M M^T 1) + M m, per row.
    let ones = cx.constant(Tensor::filled(&[1, d], 1.0));
    let oq = cx.matmul(&ones, q);
    let oqq = cx.matmul(&oq, &qt);
    let dc = cx.sub(&ones, &oqq);
    let base = cx.scale(&dc, cfg.mean_level);
    let base_v = cx.reshape(&base, vec![d]);
    let back = cx.matmul(meas, &qt);
    let mu = cx.add(&back, &base_v);

    let mut init_noise = Vec::with_capacity(rows * d);
    for &cid in chain_ids {
        let mut s = rng::stream(cfg.seed, tag::CHAIN_INIT, cid);
        init_noise.extend(rng::normal_vec(&mut s, d));
    }
    let mut noise_streams: Vec<_> = chain_ids
        .iter()
        .map(|&cid| rng::stream(cfg.seed, tag::CHAIN, cid))
        .collect();
    let z0 = cx.constant(Tensor::from_raw(vec![rows, d], init_noise));
    let z0s = cx.scale(&z0, cfg.sigma0);
    let mut y = cx.add(&mu, &z0s);

    // sigma_1 from the prior residual at y_1.
    let mut sigma_host = vec![cfg.sigma0; rows];
    let f1 = model.apply(cx, &y, &sigma_host);
    let mut g = cx.sub(&f1, &y);
    {
        let sq = cx.square(&g);
        let rss = cx.row_sum(&sq);
        let var = cx.scale(&rss, inv_d);
        let s1 = cx.sqrt(&var);
        let sv = cx.value(&s1).data();
        for (r, h) in sigma_host.iter_mut().enumerate() {
            *h = sv[r];
        }
    }

    let mut active: Vec<bool> = sigma_host.iter().map(|&s| s > cfg.sigma_end).collect();
    let mut t = 0usize;

    while active.iter().any(|&a| a) && t < cfg.t_max {
        t += 1;
        if t > 1 {
            let f = model.apply(cx, &y, &sigma_host);
            g = cx.sub(&f, &y);
        }
        // Null-space prior term.
        let gq = cx.matmul(&g, q);
        let gqq = cx.matmul(&gq, &qt);
        let prior = cx.sub(&g, &gqq);
        // Exact measurement correction.
        let yq = cx.matmul(&y, q);
        let r = cx.sub(meas, &yq);
        let rq = cx.matmul(&r, &qt);
        let l = cx.add(&prior, &rq);

        // Noise scale from the current (previous-step) level.
        let gamma_host: Vec<f64> = sigma_host.iter().map(|&s| s * gamma_c).collect();
        let gamma_vec = cx.constant(Tensor::from_raw(vec![rows], gamma_host));
        let z = draw_noise_rows(cfg, chain_ids, &mut noise_streams, &active, d);
        if let Some(tr) = trace.as_deref_mut() {
            let rv = cx.value(&r);
            tr.states.push(cx.value(&y).clone());
            tr.noise.push(z.clone());
            tr.steps.push(StepRecord {
                sigma: sigma_host[0],
                direction_norm: row_norm(cx.value(&l), 0),
                meas_residual: rv.data().iter().fold(0.0f64, |m, &x| m.max(x.abs())),
            });
        }
        let zc = cx.constant(z);
        let noise_part = cx.row_scale(&zc, &gamma_vec);
        let step_part = cx.scale(&l, cfg.h);
        let update = cx.add(&step_part, &noise_part);
        let mask = cx.constant(mask_tensor(&active));
        let masked = cx.row_scale(&update, &mask);
        y = cx.add(&y, &masked);

        // Next level from the conditional direction just used.
        let sq = cx.square(&l);
        let rss = cx.row_sum(&sq);
        let var = cx.scale(&rss, inv_d);
        let sigma_vec = cx.sqrt(&var);
        let sv = cx.value(&sigma_vec).data().to_vec();
        for (row, &is_active) in active.iter().enumerate() {
            if is_active {
                if !sv[row].is_finite() {
                    return Err(OlmError::NonFinite(format!("sampler state, step {}", t)));
                }
                sigma_host[row] = sv[row];
            }
        }
        for (row, a) in active.iter_mut().enumerate() {
            if *a && sigma_host[row] <= cfg.sigma_end {
                *a = false;
            }
        }
    }

    let hit_cap = active.iter().any(|&a| a);
    if let Some(tr) = trace {
        tr.hit_cap = hit_cap;
    }
    // The noise-scale distinction between gamma-from-previous-level here and
    // gamma-from-current-level in the unconditional loop follows the two
    // published step rules.
    Ok(BatchRun { y, realized_steps: t, hit_cap })
}

fn row_norm(t: &Tensor, row: usize) -> f64 {
    t.row(row).iter().map(|&x| x * x).sum::<f64>().sqrt()
}

/// Draws one sample from the prior embedded in the denoiser, with a full
/// per-step trace.
pub fn sample_prior(
    model: &dyn BatchDenoise<Eager>,
    cfg: &SamplerConfig,
) -> Result<(Tensor, SampleTrace)> {
    let mut cx = Eager::new();
    let mut trace = SampleTrace::default();
    let run = prior_batch_cx(&mut cx, model, cfg, &[0], Some(&mut trace))?;
    let d = model.dim();
    let sample = (*run.y).clone().reshaped(vec![d])?;
    if !sample.all_finite() {
        return Err(OlmError::NonFinite("final sample".into()));
    }
    Ok((sample, trace))
}

/// Draws one conditional sample consistent with `m = M^T x`, with a full
/// per-step trace.
pub fn sample_conditional(
    model: &dyn BatchDenoise<Eager>,
    mat: &MeasurementMatrix,
    m: &Tensor,
    cfg: &SamplerConfig,
) -> Result<(Tensor, SampleTrace)> {
    sample_conditional_chain(model, mat, m, cfg, 0)
}

/// As [`sample_conditional`] with an explicit chain index selecting the
/// noise streams.
pub fn sample_conditional_chain(
    model: &dyn BatchDenoise<Eager>,
    mat: &MeasurementMatrix,
    m: &Tensor,
    cfg: &SamplerConfig,
    chain: u64,
) -> Result<(Tensor, SampleTrace)> {
    if m.len() != mat.k() {
        return Err(OlmError::ShapeMismatch(format!(
            "measurement length {} vs k {}",
            m.len(),
            mat.k()
        )));
    }
    let mut cx = Eager::new();
    let q = cx.constant(mat.tensor().clone());
    let meas = cx.constant(m.clone().reshaped(vec![1, mat.k()])?);
    let mut trace = SampleTrace::default();
    let run = conditional_batch_cx(&mut cx, model, &q, &meas, cfg, &[chain], Some(&mut trace))?;
    let sample = (*run.y).clone().reshaped(vec![mat.d()])?;
    if !sample.all_finite() {
        return Err(OlmError::NonFinite("final sample".into()));
    }
    Ok((sample, trace))
}

/// Posterior-mean estimate: the average of `n_samples` independent
/// conditional samples (chains `0..n`, each with its own noise streams).
pub fn mmse_estimate(
    model: &dyn BatchDenoise<Eager>,
    mat: &MeasurementMatrix,
    m: &Tensor,
    n_samples: usize,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    if n_samples < 1 {
        return Err(OlmError::Invalid("n_samples must be at least 1".into()));
    }
    let mut cx = Eager::new();
    let q = cx.constant(mat.tensor().clone());
    let k = mat.k();
    let mut meas_rows = Vec::with_capacity(n_samples * k);
    for _ in 0..n_samples {
        meas_rows.extend_from_slice(m.data());
    }
    let meas = cx.constant(Tensor::from_raw(vec![n_samples, k], meas_rows));
    let chain_ids: Vec<u64> = (0..n_samples as u64).collect();
    let run = conditional_batch_cx(&mut cx, model, &q, &meas, cfg, &chain_ids, None)?;
    Ok(mean_of_rows(&run.y))
}

fn mean_of_rows(y: &Tensor) -> Tensor {
    let (n, d) = (y.shape()[0], y.shape()[1]);
    let mut out = vec![0.0; d];
    for r in 0..n {
        for (o, &v) in out.iter_mut().zip(y.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / n as f64;
    Tensor::from_raw(vec![d], out.into_iter().map(|x| x * inv).collect())
}

/// Differentiable unrolled reconstruction of a single signal from its own
/// measurements `m = M^T x`, recorded against the measurement-matrix leaf
/// `"m_mat"`. Forward values equal [`mmse_estimate`] bit-for-bit under the
/// same seeds. The caller appends a loss and runs the backward pass.
pub struct Unrolled {
    pub builder: GraphBuilder,
    /// `[d]` reconstruction node.
    pub x_hat: NodeId,
    pub realized_steps: usize,
    pub hit_cap: bool,
}

pub const MEASUREMENT_LEAF: &str = "m_mat";

/// Budget on recorded forward elements; exceeding it aborts the unroll.
pub const TRACE_BUDGET_ELEMS: usize = 300_000_000;

pub fn unrolled_reconstruct(
    model: &DenoiserModel,
    mat: &MeasurementMatrix,
    x: &Tensor,
    n_samples: usize,
    cfg: &SamplerConfig,
) -> Result<Unrolled> {
    if n_samples < 1 {
        return Err(OlmError::Invalid("n_samples must be at least 1".into()));
    }
    let d = mat.d();
    if x.len() != d {
        return Err(OlmError::ShapeMismatch("signal length vs measurement rows".into()));
    }
    let k = mat.k();
    let mut b = GraphBuilder::new();
    let q = b.leaf(MEASUREMENT_LEAF, mat.tensor().clone());
    let qt_for_meas = b.transpose(&q);
    let x_row = b.constant(x.clone().reshaped(vec![1, d])?);
    let m_row = b.matmul(&x_row, &q); // [1, k]
    let _ = qt_for_meas;
    // Replicate the measurement for each chain.
    let mut meas = m_row;
    for _ in 1..n_samples {
        meas = b.concat(&meas, &m_row, 0);
    }
    debug_assert_eq!(b.value(&meas).shape(), [n_samples, k]);
    let chain_ids: Vec<u64> = (0..n_samples as u64).collect();
    let run = conditional_batch_cx(&mut b, model, &q, &meas, cfg, &chain_ids, None)?;
    if b.recorded_elements() > TRACE_BUDGET_ELEMS {
        return Err(OlmError::Invalid(format!(
            "unrolled trace exceeds budget: {} elements",
            b.recorded_elements()
        )));
    }
    let summed = sum_sample_blocks(&mut b, &run.y, n_samples, 1);
    let x_hat_row = b.scale(&summed, 1.0 / n_samples as f64);
    let x_hat = b.reshape(&x_hat_row, vec![d]);
    Ok(Unrolled {
        builder: b,
        x_hat,
        realized_steps: run.realized_steps,
        hit_cap: run.hit_cap,
    })
}

/// Sums the `n_samples` blocks of `n_imgs` rows each: `[n*B, d] -> [B, d]`,
/// in fixed block order.
pub(crate) fn sum_sample_blocks<C: Cx>(
    cx: &mut C,
    y: &C::Id,
    n_samples: usize,
    n_imgs: usize,
) -> C::Id {
    let mut acc = cx.slice(y, 0, 0, n_imgs);
    for s in 1..n_samples {
        let block = cx.slice(y, 0, s * n_imgs, (s + 1) * n_imgs);
        acc = cx.add(&acc, &block);
    }
    acc
}

/// Batch posterior-mean reconstruction of many signals from their own
/// measurements, evaluated eagerly with deterministic chunking. Chain ids
/// are `chain_base + image_index * n_samples + sample_index`, so results do
/// not depend on the chunk layout. Optional measurement noise is added to
/// `M^T x` before reconstruction (the reconstruction still treats the noisy
/// measurement as exact).
pub fn reconstruct_batch(
    model: &(dyn BatchDenoise<Eager>),
    mat: &MeasurementMatrix,
    xs: &Tensor,
    n_samples: usize,
    cfg: &SamplerConfig,
    chain_base: u64,
    meas_noise: Option<(f64, u64)>,
) -> Result<Tensor> {
    let n = xs.shape()[0];
    let d = mat.d();
    let k = mat.k();
    if xs.shape()[1] != d {
        return Err(OlmError::ShapeMismatch("signal width vs measurement rows".into()));
    }
    let meas_all = {
        let mut m = tensor::matmul(xs, mat.tensor());
        if let Some((sigma_n, noise_seed)) = meas_noise {
            if sigma_n > 0.0 {
                for i in 0..n {
                    let mut s = rng::stream(noise_seed, tag::MEAS_NOISE, i as u64);
                    let z = rng::normal_vec(&mut s, k);
                    for j in 0..k {
                        m.data_mut()[i * k + j] += sigma_n * z[j];
                    }
                }
            }
        }
        m
    };

    // Fixed chunk geometry (independent of thread count) keeps results
    // bit-identical for any OLM_THREADS setting.
    let target_rows = 32usize;
    let imgs_per_chunk = (target_rows / n_samples).max(1);
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(imgs_per_chunk)
        .map(|start| (start, (start + imgs_per_chunk).min(n)))
        .collect();

    let results: Vec<Result<Vec<f64>>> = chunks
        .par_iter()
        .map(|&(start, end)| {
            let b = end - start;
            let mut cx = Eager::new();
            let q = cx.constant(mat.tensor().clone());
            // Rows laid out sample-major: all images' sample 0, then 1, ...
            let mut rows = Vec::with_capacity(n_samples * b * k);
            for _ in 0..n_samples {
                for i in start..end {
                    rows.extend_from_slice(&meas_all.data()[i * k..(i + 1) * k]);
                }
            }
            let meas = cx.constant(Tensor::from_raw(vec![n_samples * b, k], rows));
            let chain_ids: Vec<u64> = (0..n_samples)
                .flat_map(|s| {
                    (start..end).map(move |i| chain_base + (i as u64) * n_samples as u64 + s as u64)
                })
                .collect();
            let run = conditional_batch_cx(&mut cx, model, &q, &meas, cfg, &chain_ids, None)?;
            let mut acc = vec![0.0; b * d];
            let yv = run.y;
            for s in 0..n_samples {
                for i in 0..b {
                    let row = yv.row(s * b + i);
                    for j in 0..d {
                        acc[i * d + j] += row[j];
                    }
                }
            }
            let inv = 1.0 / n_samples as f64;
            Ok(acc.into_iter().map(|x| x * inv).collect())
        })
        .collect();

    let mut out = Vec::with_capacity(n * d);
    for r in results {
        out.extend(r?);
    }
    Ok(Tensor::from_raw(vec![n, d], out))
}
