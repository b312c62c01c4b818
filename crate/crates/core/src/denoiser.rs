//! Bias-free least-squares denoisers and the analytic Gaussian-prior oracle.
//!
//! A denoiser trained to minimize mean squared error approximates the
//! posterior mean of the clean signal given its noisy observation, and its
//! residual `f(y) - y` is the (sigma^2-scaled) gradient of the log of the
//! noise-smoothed data density. That residual is what the samplers ascend.
//!
//! Networks here carry no additive constants anywhere, which makes them
//! positively homogeneous (`f(a y) = a f(y)` for `a > 0`) and able to operate
//! blind across noise levels.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{OlmError, Result};
use crate::linalg;
use crate::ndgrad::graph::{Cx, Eager, GraphBuilder};
use crate::ndgrad::{adam_step, AdamState, Tensor};
use crate::rng::{self, tag};

/// Something the samplers can use as a denoiser. `sigma_hint` is the
/// sampler's current noise-level estimate: trained blind models ignore it,
/// the analytic oracle needs it.
pub trait Denoiser: Send + Sync {
    fn dim(&self) -> usize;
    fn denoise_with_level(&self, y: &Tensor, sigma_hint: f64) -> Tensor;
}

/// Fully connected bias-free network: relu on hidden layers, linear output,
/// equal input and output width.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    widths: Vec<usize>,
    weights: Vec<Arc<Tensor>>,
}

impl DenoiserModel {
    /// Fresh model with symmetric fan-in-scaled uniform weights.
    pub fn init(widths: &[usize], seed: u64) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        assert_eq!(
            widths.first(),
            widths.last(),
            "denoiser input and output widths must agree"
        );
        let mut weights = Vec::new();
        for layer in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[layer], widths[layer + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = rng::stream(seed, tag::WEIGHT_INIT, layer as u64);
            let data = (0..fan_in * fan_out)
                .map(|_| (rng::uniform(&mut rng) * 2.0 - 1.0) * bound)
                .collect();
            weights.push(Arc::new(Tensor::from_raw(vec![fan_in, fan_out], data)));
        }
        Self { widths: widths.to_vec(), weights }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn weights(&self) -> &[Arc<Tensor>] {
        &self.weights
    }

    pub fn from_weights(widths: Vec<usize>, weights: Vec<Tensor>) -> Result<Self> {
        if widths.len() < 2 || widths.first() != widths.last() {
            return Err(OlmError::Invalid("bad layer widths".into()));
        }
        if weights.len() != widths.len() - 1 {
            return Err(OlmError::Invalid("weight count does not match widths".into()));
        }
        for (i, w) in weights.iter().enumerate() {
            if w.shape() != [widths[i], widths[i + 1]] {
                return Err(OlmError::ShapeMismatch(format!(
                    "layer {} expects {:?}, got {:?}",
                    i,
                    [widths[i], widths[i + 1]],
                    w.shape()
                )));
            }
        }
        Ok(Self { widths, weights: weights.into_iter().map(Arc::new).collect() })
    }

    /// Forward pass in any execution context; `y` is `[n, d]`.
    pub fn forward_cx<C: Cx>(&self, cx: &mut C, y: &C::Id) -> C::Id {
        let mut h = y.clone();
        for (i, w) in self.weights.iter().enumerate() {
            let wid = cx.shared(w);
            h = cx.matmul(&h, &wid);
            if i + 1 < self.weights.len() {
                h = cx.relu(&h);
            }
        }
        h
    }

    fn as_batch(&self, y: &Tensor) -> Result<(Tensor, bool)> {
        let d = self.dim();
        match y.rank() {
            1 if y.len() == d => Ok((y.clone().reshaped(vec![1, d])?, true)),
            2 if y.shape()[1] == d => Ok((y.clone(), false)),
            _ => Err(OlmError::ShapeMismatch(format!(
                "denoiser of width {} got input shape {:?}",
                d,
                y.shape()
            ))),
        }
    }

    /// `x_hat(y)` for a `[n, d]` batch or single `[d]` vector.
    pub fn denoise(&self, y: &Tensor) -> Result<Tensor> {
        let (batch, was_vector) = self.as_batch(y)?;
        let mut cx = Eager::new();
        let yid = cx.constant(batch);
        let out = self.forward_cx(&mut cx, &yid);
        let out = (*out).clone();
        if was_vector {
            out.reshaped(vec![self.dim()])
        } else {
            Ok(out)
        }
    }

    /// Denoiser residual `f(y) - y`: the unnormalized score of the
    /// noise-smoothed density.
    pub fn score(&self, y: &Tensor) -> Result<Tensor> {
        let f = self.denoise(y)?;
        Ok(Tensor::from_raw(
            f.shape().to_vec(),
            f.data().iter().zip(y.data()).map(|(a, b)| a - b).collect(),
        ))
    }
}

impl Denoiser for DenoiserModel {
    fn dim(&self) -> usize {
        self.widths[0]
    }

    fn denoise_with_level(&self, y: &Tensor, _sigma_hint: f64) -> Tensor {
        self.denoise(y).expect("shape checked by caller")
    }
}

/// Exact posterior mean for a Gaussian prior under isotropic Gaussian noise:
/// `x_hat(y) = mu + S (S + s^2 I)^-1 (y - mu)`.
pub fn analytic_gaussian_denoiser(
    mu: &Tensor,
    cov: &Tensor,
    sigma: f64,
    y: &Tensor,
) -> Result<Tensor> {
    assert!(sigma >= 0.0);
    let d = mu.len();
    if cov.shape() != [d, d] {
        return Err(OlmError::ShapeMismatch("covariance shape".into()));
    }
    if sigma == 0.0 {
        return Ok(y.clone());
    }
    let (batch, was_vector) = if y.rank() == 1 {
        (y.clone().reshaped(vec![1, d])?, true)
    } else {
        (y.clone(), false)
    };
    if batch.shape()[1] != d {
        return Err(OlmError::ShapeMismatch("observation width".into()));
    }
    let mut reg = cov.clone();
    for i in 0..d {
        reg.data_mut()[i * d + i] += sigma * sigma;
    }
    let n = batch.shape()[0];
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        let centered: Vec<f64> = (0..d).map(|j| batch.row(r)[j] - mu.data()[j]).collect();
        let t = linalg::solve(&reg, &centered)?;
        for j in 0..d {
            let mut acc = mu.data()[j];
            for k in 0..d {
                acc += cov.data()[j * d + k] * t[k];
            }
            out.push(acc);
        }
    }
    let result = Tensor::from_raw(vec![n, d], out);
    if was_vector {
        result.reshaped(vec![d])
    } else {
        Ok(result)
    }
}

/// The oracle as a sampler-compatible denoiser: applies the closed form at
/// the sampler's current noise estimate.
#[derive(Clone, Debug)]
pub struct GaussianOracle {
    pub mu: Tensor,
    pub cov: Tensor,
}

impl GaussianOracle {
    pub fn new(mu: Tensor, cov: Tensor) -> Self {
        assert_eq!(cov.shape(), [mu.len(), mu.len()]);
        Self { mu, cov }
    }

    /// Mean-element denoising MSE of the oracle at noise level `sigma`:
    /// `tr(S (S + s^2 I)^-1 s^2 I) / d`.
    pub fn mse_at(&self, sigma: f64) -> f64 {
        let d = self.mu.len();
        let (vals, _) = linalg::sym_eig_desc(&self.cov);
        let s2 = sigma * sigma;
        vals.iter().map(|&l| l * s2 / (l + s2)).sum::<f64>() / d as f64
    }
}

impl Denoiser for GaussianOracle {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn denoise_with_level(&self, y: &Tensor, sigma_hint: f64) -> Tensor {
        analytic_gaussian_denoiser(&self.mu, &self.cov, sigma_hint, y)
            .expect("well-formed oracle")
    }
}

/// Conditional mean `E[x | M^T x = m]` for a zero-mean Gaussian prior:
/// `S M (M^T S M)^-1 m`. Oracle for conditional-sampling tests.
pub fn gaussian_conditional_mean(cov: &Tensor, m_mat: &Tensor, m: &[f64]) -> Result<Vec<f64>> {
    use crate::ndgrad::tensor::{matmul, transpose};
    let k = m_mat.shape()[1];
    assert_eq!(m.len(), k);
    let sm = matmul(cov, m_mat); // [d, k]
    let gram = matmul(&transpose(m_mat), &sm); // [k, k]
    let t = linalg::solve(&gram, m)?;
    let d = cov.shape()[0];
    let mut out = vec![0.0; d];
    for j in 0..d {
        for l in 0..k {
            out[j] += sm.data()[j * k + l] * t[l];
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Noise level drawn uniformly from this range, per training example.
    pub sigma_range: (f64, f64),
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sigma_range: (0.0, 1.0),
            batch: 128,
            epochs: 200,
            lr: 1e-3,
            lr_decay: 0.995,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.sigma_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return Err(OlmError::Config("sigma_range must be within [0, 1]".into()));
        }
        if self.batch < 1 {
            return Err(OlmError::Config("batch must be at least 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(OlmError::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

pub struct TrainReport {
    /// Mean per-element training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a bias-free denoiser on clean rows of `train` (`[n, d]`), blind
/// over the configured noise range. Deterministic for a fixed config.
pub fn train_denoiser(
    train: &Tensor,
    widths: &[usize],
    cfg: &TrainConfig,
) -> Result<(DenoiserModel, TrainReport)> {
    cfg.validate()?;
    if train.rank() != 2 || train.shape()[0] == 0 {
        return Err(OlmError::Invalid("training set must be a non-empty [n, d]".into()));
    }
    let n = train.shape()[0];
    let d = train.shape()[1];
    assert_eq!(widths[0], d, "widths must match data dimension");

    let mut model = DenoiserModel::init(widths, cfg.seed);
    let names: Vec<String> = (0..model.weights.len()).map(|i| format!("w{}", i)).collect();
    let mut params: BTreeMap<String, Tensor> = names
        .iter()
        .zip(&model.weights)
        .map(|(k, w)| (k.clone(), (**w).clone()))
        .collect();
    let mut state = AdamState::new(&params, cfg.lr, cfg.lr_decay);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(n, cfg.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (batch_no, chunk) in order.chunks(cfg.batch).enumerate() {
            let (ys, xs) = noisy_batch(train, chunk, cfg, epoch as u64);
            let mut b = GraphBuilder::new();
            let mut leaf_ids = Vec::new();
            for (name, w) in names.iter().zip(params.values()) {
                leaf_ids.push(b.leaf(name, w.clone()));
            }
            let y_id = b.constant(ys);
            let x_id = b.constant(xs);
            let mut h = y_id;
            for (i, &w) in leaf_ids.iter().enumerate() {
                h = b.matmul(&h, &w);
                if i + 1 < leaf_ids.len() {
                    h = b.relu(&h);
                }
            }
            let diff = b.sub(&h, &x_id);
            let sq = b.square(&diff);
            b.mean(&sq);
            let (graph, fwd) = b.finish();
            let loss = fwd.root_value().item();
            if !loss.is_finite() {
                return Err(OlmError::Diverged(format!(
                    "non-finite loss at epoch {}, batch {}",
                    epoch, batch_no
                )));
            }
            epoch_loss += loss;
            batches += 1;
            let wrt: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            let grads = graph.backward(fwd, &wrt)?;
            let (new_params, new_state) = adam_step(&params, &grads, &state)?;
            params = new_params;
            state = new_state;
        }
        state.end_epoch();
        epoch_losses.push(epoch_loss / batches.max(1) as f64);
    }

    model.weights = names
        .iter()
        .map(|k| Arc::new(params.remove(k).expect("param present")))
        .collect();
    Ok((model, TrainReport { epoch_losses }))
}

fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng::stream(seed, tag::SHUFFLE, epoch);
    for i in (1..n).rev() {
        let j = (rng::uniform(&mut rng) * (i + 1) as f64) as usize;
        idx.swap(i, j.min(i));
    }
    idx
}

/// Builds `(noisy, clean)` batches. Noise for example `i` in epoch `e` comes
/// from stream `(seed, TRAIN_NOISE, mix(e, i))`, independent of batch layout.
fn noisy_batch(
    train: &Tensor,
    indices: &[usize],
    cfg: &TrainConfig,
    epoch: u64,
) -> (Tensor, Tensor) {
    let d = train.shape()[1];
    let mut ys = Vec::with_capacity(indices.len() * d);
    let mut xs = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        let mut rng = rng::stream(cfg.seed, tag::TRAIN_NOISE, rng::index2(epoch, i as u64));
        let (lo, hi) = cfg.sigma_range;
        let sigma = lo + rng::uniform(&mut rng) * (hi - lo);
        let row = train.row(i);
        for &x in row {
            xs.push(x);
        }
        for &x in row {
            ys.push(x + sigma * rng::normal(&mut rng));
        }
    }
    (
        Tensor::from_raw(vec![indices.len(), d], ys),
        Tensor::from_raw(vec![indices.len(), d], xs),
    )
}

// ---- checkpoint io ----

/// Saves layer tensors in the flat container plus a `key=value` sidecar with
/// the widths and activation tag.
pub fn save_model(model: &DenoiserModel, dir: impl AsRef<std::path::Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, w) in model.weights.iter().enumerate() {
        w.save(dir.join(format!("layer{}.olmt", i)))?;
    }
    let widths: Vec<String> = model.widths.iter().map(|w| w.to_string()).collect();
    let sidecar = format!("widths={}\nactivation=relu\n", widths.join(","));
    std::fs::write(dir.join("model.txt"), sidecar)?;
    Ok(())
}

pub fn load_model(dir: impl AsRef<std::path::Path>) -> Result<DenoiserModel> {
    let dir = dir.as_ref();
    let sidecar = std::fs::read_to_string(dir.join("model.txt"))?;
    let mut widths: Option<Vec<usize>> = None;
    let mut activation_ok = false;
    for line in sidecar.lines() {
        match line.split_once('=') {
            Some(("widths", v)) => {
                widths = Some(
                    v.split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| OlmError::Format("bad widths in sidecar".into()))?,
                );
            }
            Some(("activation", v)) => activation_ok = v.trim() == "relu",
            _ => {}
        }
    }
    let widths = widths.ok_or_else(|| OlmError::Format("sidecar missing widths".into()))?;
    if !activation_ok {
        return Err(OlmError::Format("unsupported activation".into()));
    }
    let mut weights = Vec::new();
    for i in 0..widths.len() - 1 {
        weights.push(Tensor::load(dir.join(format!("layer{}.olmt", i)))?);
    }
    DenoiserModel::from_weights(widths, weights)
}
