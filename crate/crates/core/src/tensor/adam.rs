use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(like: &Tensor, config: AdamConfig) -> Self {
        Self {
            step_count: 0,
            first_moment: Tensor::zeros_like(like),
            second_moment: Tensor::zeros_like(like),
            config,
        }
    }
}

pub fn adam_step(params: &mut Tensor, grads: &Tensor, state: &mut AdamState) -> Result<()> {
    params.check_same_shape(grads, "adam_step")?;
    params.check_same_shape(&state.first_moment, "adam_step")?;
    let AdamConfig { lr, beta1, beta2, epsilon } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in params.data_mut().iter_mut().zip(grads.data()).zip(m).zip(v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &Tensor::zeros(&[3]), &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let cfg = AdamConfig { lr: 0.01, epsilon: 0.0, ..AdamConfig::default() };
        let mut p = Tensor::zeros(&[4]);
        let g = Tensor::new(vec![4], vec![3.0, -0.001, 250.0, -7.0]).unwrap();
        let mut st = AdamState::new(&p, cfg);
        adam_step(&mut p, &g, &mut st).unwrap();
        let expect = [-0.01, 0.01, -0.01, 0.01];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn three_step_scalar_trace() {
        // independent scalar recurrence
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=3 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            reference.push(x);
        }
        let cfg = AdamConfig { lr, beta1: b1, beta2: b2, epsilon: eps };
        let mut p = Tensor::zeros(&[1]);
        let mut st = AdamState::new(&p, cfg);
        for expected in reference {
            adam_step(&mut p, &Tensor::full(&[1], 1.0), &mut st).unwrap();
            assert!((p.data()[0] - expected).abs() < 1e-12);
        }
        assert!((p.data()[0] + 0.3).abs() < 1e-7);
    }
}
