//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update of `theta` in place. `t` is the 1-based step count.
pub fn adamw_update(
    cfg: &AdamWConfig,
    t: u64,
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        theta[i] -= cfg.lr * cfg.weight_decay * theta[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros = |p: &crate::params::Param| vec![0.0; p.value.numel()];
        Self {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Gradients are left
    /// untouched; call [`ParamSet::zero_grad`] before the next accumulation.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        for (k, p) in params.iter_mut().enumerate() {
            adamw_update(
                &self.config,
                self.step,
                p.value.data_mut(),
                &p.grad,
                &mut self.m[k],
                &mut self.v[k],
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &params);
        for _ in 0..5 {
            opt.step(&mut params);
        }
        assert_eq!(params.iter().next().unwrap().value.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let (mut theta, mut m, mut v) = ([1.0], [0.0], [0.0]);
        adamw_update(&cfg, 1, &mut theta, &[1.0], &mut m, &mut v);
        // m_hat / sqrt(v_hat) = 1 at t = 1
        let expected = 1.0 - 2e-4 / (1.0 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn three_steps_on_quadratic_match_reference() {
        // f(a, b) = a^2 + 3 b^2, gradient (2a, 6b)
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut params = ParamSet::new();
        let id = params.add("ab", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(cfg, &params);

        // hand-rolled reference, written out scalar by scalar
        let mut r = [1.0f64, -1.0];
        let mut rm = [0.0f64; 2];
        let mut rv = [0.0f64; 2];
        for t in 1..=3 {
            let g = [2.0 * r[0], 6.0 * r[1]];
            for i in 0..2 {
                rm[i] = 0.9 * rm[i] + 0.1 * g[i];
                rv[i] = 0.999 * rv[i] + 0.001 * g[i] * g[i];
                let mh = rm[i] / (1.0 - 0.9f64.powi(t));
                let vh = rv[i] / (1.0 - 0.999f64.powi(t));
                r[i] = r[i] - 0.1 * 0.01 * r[i] - 0.1 * mh / (vh.sqrt() + 1e-8);
            }

            params.zero_grad();
            let p = params.get_mut(id);
            let (a, b) = (p.value.data()[0], p.value.data()[1]);
            p.grad.copy_from_slice(&[2.0 * a, 6.0 * b]);
            opt.step(&mut params);
            let got = params.get(id).value.data();
            assert!((got[0] - r[0]).abs() < 1e-14 && (got[1] - r[1]).abs() < 1e-14);
        }
        assert_eq!(opt.steps_taken(), 3);
    }
}
