use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWParams {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamWParams {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(n: usize) -> Self {
        AdamWState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState, hp: &AdamWParams) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} parameters", params.len()),
            got: format!("{} gradients, {} moments", grads.len(), state.m.len()),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= hp.learning_rate * hp.weight_decay * params[i];
        params[i] -= hp.learning_rate * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let hp = AdamWParams::new(1e-3, 0.0);
        let mut p = [0.5, -0.5];
        let mut st = AdamWState::new(2);
        adamw_step(&mut p, &[1.0, -3.0], &mut st, &hp).unwrap();
        // Bias-corrected first step is lr * g / (|g| + eps).
        assert!((p[0] - (0.5 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (-0.5 + 1e-3 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled() {
        let hp = AdamWParams::new(0.1, 0.5);
        let mut p = [2.0];
        let mut st = AdamWState::new(1);
        adamw_step(&mut p, &[0.0], &mut st, &hp).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let hp = AdamWParams::new(0.05, 0.0);
        let mut p = [3.0, -2.0];
        let mut st = AdamWState::new(2);
        for _ in 0..2000 {
            let g = [2.0 * (p[0] - 1.0), 2.0 * (p[1] + 1.0)];
            adamw_step(&mut p, &g, &mut st, &hp).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_input() {
        let hp = AdamWParams::new(0.1, 0.0);
        let mut st = AdamWState::new(1);
        assert!(adamw_step(&mut [0.0], &[f64::NAN], &mut st, &hp).is_err());
        assert!(adamw_step(&mut [0.0, 1.0], &[0.0], &mut st, &hp).is_err());
    }
}
