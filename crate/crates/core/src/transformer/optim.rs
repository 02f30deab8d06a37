//! AdamW with decoupled weight decay and bias correction.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<F> {
    pub step: u64,
    pub m: Vec<F>,
    pub v: Vec<F>,
}

impl<F: Scalar> AdamWState<F> {
    pub fn new(n: usize) -> Self {
        Self { step: 0, m: vec![F::zero(); n], v: vec![F::zero(); n] }
    }
}

/// One AdamW update. `decay_mask[i] == false` exempts parameter `i` from
/// weight decay; `None` decays everything. `lr` overrides `cfg.lr` so
/// schedules can be applied by the caller.
pub fn adamw_step<F: Scalar>(
    params: &mut [F],
    grads: &[F],
    state: &mut AdamWState<F>,
    cfg: &AdamWConfig,
    lr: f64,
    decay_mask: Option<&[bool]>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::LengthMismatch { expected: params.len(), got: grads.len() });
    }
    if let Some(mask) = decay_mask {
        if mask.len() != params.len() {
            return Err(Error::LengthMismatch { expected: params.len(), got: mask.len() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::of(cfg.beta1), F::of(cfg.beta2));
    let (one_b1, one_b2) = (F::of(1.0 - cfg.beta1), F::of(1.0 - cfg.beta2));
    let step_size = F::of(lr / bc1);
    let inv_sqrt_bc2 = F::of(1.0 / bc2.sqrt());
    let eps = F::of(cfg.eps);
    let shrink = F::of(1.0 - lr * cfg.weight_decay);
    for i in 0..params.len() {
        let g = grads[i];
        let m = b1 * state.m[i] + one_b1 * g;
        let v = b2 * state.v[i] + one_b2 * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let mut p = params[i];
        if decay_mask.is_none_or(|mask| mask[i]) {
            p *= shrink;
        }
        p -= step_size * m / (v.sqrt() * inv_sqrt_bc2 + eps);
        if !p.is_finite() {
            return Err(Error::Numeric(format!("non-finite parameter after AdamW step {}", state.step)));
        }
        params[i] = p;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_quadratic_matches_hand_trace() {
        // f(x) = (x - 3)^2 at x = 1: g = -4.
        // m = 0.1 * -4 = -0.4, v = 0.001 * 16 = 0.016
        // m_hat = -4, v_hat = 16, update = lr * -4 / (4 + eps)
        let cfg = AdamWConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut x = vec![1.0f64];
        let mut st = AdamWState::new(1);
        adamw_step(&mut x, &[-4.0], &mut st, &cfg, cfg.lr, None).unwrap();
        let expected = 1.0 - 0.1 * (-4.0 / (4.0 + 1e-8));
        assert!((x[0] - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
        assert!((st.m[0] + 0.4).abs() < 1e-15);
        assert!((st.v[0] - 0.016).abs() < 1e-15);

        // second step from x = 1.1: g = -3.8
        let g2 = 2.0 * (x[0] - 3.0);
        let m2 = 0.9 * -0.4 + 0.1 * g2;
        let v2 = 0.999 * 0.016 + 0.001 * g2 * g2;
        let mhat = m2 / (1.0 - 0.81);
        let vhat = v2 / (1.0 - 0.999f64.powi(2));
        let expected2 = x[0] - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        adamw_step(&mut x, &[g2], &mut st, &cfg, cfg.lr, None).unwrap();
        assert!((x[0] - expected2).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = vec![0.5f32, -2.0, 3.0];
        let before = p.clone();
        let mut st = AdamWState::new(3);
        adamw_step(&mut p, &[0.0; 3], &mut st, &cfg, cfg.lr, None).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn weight_decay_alone_shrinks_multiplicatively() {
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.5, ..Default::default() };
        let mut p = vec![2.0f64, -4.0];
        let mut st = AdamWState::new(2);
        adamw_step(&mut p, &[0.0; 2], &mut st, &cfg, cfg.lr, None).unwrap();
        assert_eq!(p, vec![2.0 * (1.0 - 0.005), -4.0 * (1.0 - 0.005)]);

        let mut q = vec![2.0f64, -4.0];
        let mut st = AdamWState::new(2);
        adamw_step(&mut q, &[0.0; 2], &mut st, &cfg, cfg.lr, Some(&[true, false])).unwrap();
        assert_eq!(q, vec![2.0 * (1.0 - 0.005), -4.0]);
    }

    #[test]
    fn non_finite_update_is_an_error() {
        let cfg = AdamWConfig::default();
        let mut p = vec![1.0f32];
        let mut st = AdamWState::new(1);
        assert!(adamw_step(&mut p, &[f32::NAN], &mut st, &cfg, cfg.lr, None).is_err());
    }
}
