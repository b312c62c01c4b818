//! Bias-corrected Adam over named parameter collections.

use std::collections::BTreeMap;

use crate::error::{OlmError, Result};
use crate::ndgrad::tensor::Tensor;

/// Optimizer state. `m`/`v` shapes mirror the parameter shapes; `t` counts
/// completed steps. `decay` is a per-epoch multiplicative factor applied by
/// [`AdamState::end_epoch`].
#[derive(Clone, Debug)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
    pub decay: f64,
}

impl AdamState {
    pub fn new(params: &BTreeMap<String, Tensor>, lr: f64, decay: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
            decay,
        }
    }

    /// Applies the per-epoch learning-rate decay.
    pub fn end_epoch(&mut self) {
        self.lr *= self.decay;
    }
}

/// One bias-corrected Adam update. Functional: returns the new parameters
/// and state, leaving the inputs untouched.
pub fn adam_step(
    params: &BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &AdamState,
) -> Result<(BTreeMap<String, Tensor>, AdamState)> {
    let mut next = state.clone();
    next.t = state.t + 1;
    let t = next.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    let mut out = BTreeMap::new();
    for (name, p) in params {
        let g = grads
            .get(name)
            .ok_or_else(|| OlmError::Invalid(format!("missing gradient for '{}'", name)))?;
        if g.shape() != p.shape() {
            return Err(OlmError::ShapeMismatch(format!(
                "param '{}' {:?} vs grad {:?}",
                name,
                p.shape(),
                g.shape()
            )));
        }
        let m = next.m.get_mut(name).expect("state matches params");
        let v = next.v.get_mut(name).expect("state matches params");
        let mut new_p = p.clone();
        for i in 0..p.len() {
            let gi = g.data()[i];
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * gi;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            new_p.data_mut()[i] = p.data()[i] - state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        out.insert(name.clone(), new_p);
    }
    Ok((out, next))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: Vec<f64>) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert("p".to_string(), Tensor::vector(x));
        m
    }

    #[test]
    fn zero_gradient_is_identity() {
        let params = single(vec![1.0, -2.0, 3.0]);
        let grads = single(vec![0.0, 0.0, 0.0]);
        let mut state = AdamState::new(&params, 0.1, 1.0);
        let mut p = params.clone();
        for step in 1..=5 {
            let (np, ns) = adam_step(&p, &grads, &state).unwrap();
            assert_eq!(np["p"], params["p"]);
            assert_eq!(ns.t, step);
            p = np;
            state = ns;
        }
    }

    #[test]
    fn first_step_is_signed_learning_rate() {
        // With fresh state the bias corrections cancel:
        // step = lr * g / (|g| + eps).
        let params = single(vec![1.0, 1.0]);
        let grads = single(vec![0.5, -2.0]);
        let state = AdamState::new(&params, 0.1, 1.0);
        let (np, _) = adam_step(&params, &grads, &state).unwrap();
        for i in 0..2 {
            let g: f64 = grads["p"].data()[i];
            let expected = 1.0 - 0.1 * g / (g.abs() + 1e-8);
            assert!((np["p"].data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        // 100 steps of f(x) = x^2 from x = 1 at lr 0.1 ends within 0.05 of 0.
        let mut p = single(vec![1.0]);
        let mut state = AdamState::new(&p, 0.1, 1.0);
        for _ in 0..100 {
            let g = single(vec![2.0 * p["p"].data()[0]]);
            let (np, ns) = adam_step(&p, &g, &state).unwrap();
            p = np;
            state = ns;
        }
        assert!(p["p"].data()[0].abs() < 0.05, "ended at {}", p["p"].data()[0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let params = single(vec![1.0, 2.0]);
        let grads = single(vec![1.0]);
        let state = AdamState::new(&params, 0.1, 1.0);
        assert!(adam_step(&params, &grads, &state).is_err());
    }

    #[test]
    fn epoch_decay_scales_lr() {
        let params = single(vec![1.0]);
        let mut state = AdamState::new(&params, 1e-4, 0.9);
        state.end_epoch();
        assert!((state.lr - 9e-5).abs() < 1e-18);
    }
}
