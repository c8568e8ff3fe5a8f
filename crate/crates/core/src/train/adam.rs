//! Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8) over a
//! flat parameter vector.

use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One update. A non-finite gradient aborts the step: state and parameters
/// stay untouched and `false` is returned so the caller can record the
/// event.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> bool {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if grads.iter().any(|g| !g.is_finite()) {
        return false;
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![1.0, -2.0, 0.5];
        let g = vec![0.0; 3];
        let mut s = AdamState::new(3);
        assert!(adam_step(&mut p, &g, &mut s, 1e-3));
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_like_signed_lr() {
        let mut p = vec![0.0, 0.0];
        let g = vec![3.0, -0.004];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &g, &mut s, 1e-3);
        // bias-corrected first step is lr * g / (|g| + eps') ~ lr * sign(g)
        assert!((p[0] + 1e-3).abs() < 1e-6, "{}", p[0]);
        assert!((p[1] - 1e-3).abs() < 1e-6, "{}", p[1]);
    }

    #[test]
    fn nan_gradient_skips_update() {
        let mut p = vec![1.0];
        let g = vec![f64::NAN];
        let mut s = AdamState::new(1);
        assert!(!adam_step(&mut p, &g, &mut s, 1e-3));
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.step, 0);
        assert_eq!(s.m, vec![0.0]);
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let mut p = vec![0.3, -0.7, 1.1];
            let mut s = AdamState::new(3);
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|v| 2.0 * v + (k as f64 * 0.01).sin()).collect();
                adam_step(&mut p, &g, &mut s, 1e-2);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
