//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Applies one Adam update using the gradients stored on each parameter.
///
/// A parameter without a gradient buffer is treated as having a zero gradient.
/// Nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::shape("adam_step", "parameter count", store.len(), state.m.len()));
    }
    for ((_, p), m) in store.iter().zip(&state.m) {
        if m.len() != p.tensor.numel() {
            return Err(Error::shape("adam_step", format!("moments of {}", p.name), p.tensor.numel(), m.len()));
        }
        if let Some(g) = p.tensor.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.tensor.numel()]);
        let data = p.tensor.data_mut();
        for (((x, gi), mi), vi) in data.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            *x -= cfg.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .filter_map(|(_, p)| p.tensor.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            if let Some(g) = p.tensor.grad().map(<[f64]>::to_vec) {
                p.tensor.zero_grad();
                let scaled: Vec<f64> = g.iter().map(|v| v * s).collect();
                p.tensor.accumulate_grad(&scaled);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[1], vec![p]).unwrap()).unwrap();
        s
    }

    /// Straight-line Adam recurrence for a scalar parameter.
    fn reference_trace(mut p: f64, grads: &[f64], c: &AdamConfig) -> Vec<f64> {
        let (mut m, mut v) = (0.0, 0.0);
        let mut out = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t));
            let vh = v / (1.0 - c.beta2.powi(t));
            p -= c.lr * mh / (vh.sqrt() + c.eps);
            out.push(p);
        }
        out
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_counts_step() {
        let mut s = scalar_store(0.7);
        s.get_mut(crate::ParamId(0)).tensor.accumulate_grad(&[0.0]);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(st.step, 1);
        assert_eq!(s.get(crate::ParamId(0)).tensor.data(), &[0.7]);
    }

    #[test]
    fn one_step_matches_hand_computation() {
        // m = 0.1, v = 0.001; m̂ = 1, v̂ = 1 ⇒ p' = 1 − 0.1·1/(1 + 1e-8)
        let c = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut s = scalar_store(1.0);
        s.get_mut(crate::ParamId(0)).tensor.accumulate_grad(&[1.0]);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, &c).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((s.get(crate::ParamId(0)).tensor.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_reference_trace() {
        let c = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut s = scalar_store(2.0);
        let mut st = AdamState::new(&s);
        let mut got = Vec::new();
        for _ in 0..2 {
            s.zero_grad();
            s.get_mut(crate::ParamId(0)).tensor.accumulate_grad(&[0.3]);
            adam_step(&mut s, &mut st, &c).unwrap();
            got.push(s.get(crate::ParamId(0)).tensor.data()[0]);
        }
        let want = reference_trace(2.0, &[0.3, 0.3], &c);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        s.get_mut(crate::ParamId(0)).tensor.accumulate_grad(&[f64::NAN]);
        let mut st = AdamState::new(&s);
        let err = adam_step(&mut s, &mut st, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("gradient of p"), "{err}");
        assert_eq!(st.step, 0);
    }
}
