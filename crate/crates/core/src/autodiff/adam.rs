use serde::{Deserialize, Serialize};

use super::{Parameter, Tensor};
use crate::error::{Error, Result};

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

/// Per-parameter Adam moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(shape: (usize, usize), config: AdamConfig) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
            config,
        }
    }

    pub fn for_param(param: &Parameter, config: AdamConfig) -> Self {
        Self::new(param.shape(), config)
    }

    /// One bias-corrected Adam update. Clears the parameter's gradient.
    pub fn step(&mut self, param: &mut Parameter) -> Result<()> {
        if param.value.dim() != self.m.dim() || param.grad.dim() != self.m.dim() {
            return Err(Error::Contract(format!(
                "adam: state shape {:?} does not match parameter '{}' {:?}",
                self.m.dim(),
                param.name,
                param.value.dim()
            )));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);

        ndarray::Zip::from(&mut param.value)
            .and(&param.grad)
            .and(&mut self.m)
            .and(&mut self.v)
            .for_each(|w, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        param.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit_param(g: f64) -> Parameter {
        let mut p = Parameter::new("w", array![[0.0]]);
        p.grad = array![[g]];
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = unit_param(1.0);
        let mut s = AdamState::for_param(&p, AdamConfig::default());
        s.step(&mut p).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction.
        let expected = 1e-3 / (1.0 + 1e-8);
        assert!((p.value[[0, 0]] + expected).abs() < 1e-18);
        assert!((p.value[[0, 0]] + 9.99e-4).abs() < 2e-6);
        assert_eq!(p.grad[[0, 0]], 0.0);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_value() {
        let mut p = unit_param(0.0);
        p.value[[0, 0]] = 0.25;
        let mut s = AdamState::for_param(&p, AdamConfig::default());
        s.step(&mut p).unwrap();
        assert_eq!(p.value[[0, 0]], 0.25);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn repeated_gradient_gives_equal_steps() {
        let mut p = unit_param(1.0);
        let mut s = AdamState::for_param(&p, AdamConfig::default());
        s.step(&mut p).unwrap();
        let first = -p.value[[0, 0]];
        p.grad = array![[1.0]];
        let before = p.value[[0, 0]];
        s.step(&mut p).unwrap();
        let second = before - p.value[[0, 0]];
        assert!((first - second).abs() < 1e-6);
        assert_eq!(s.t, 2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Parameter::new("w", Tensor::zeros((2, 2)));
        let mut s = AdamState::new((1, 2), AdamConfig::default());
        assert!(matches!(s.step(&mut p), Err(Error::Contract(_))));
    }
}
