use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        Self {
            lr: T::lit(2e-4),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            epsilon: T::lit(1e-8),
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    config: AdamConfig<T>,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig<T>, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig<T> {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter and zeroes their gradients.
    pub fn step(&mut self, params: &mut [Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                dim: "parameter count",
                expected: self.first.len(),
                actual: params.len(),
            });
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::MissingGradient { index: i });
            }
            if p.numel() != self.first[i].len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    dim: "parameter size",
                    expected: self.first[i].len(),
                    actual: p.numel(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = T::one() - beta1.powi(t);
        let c2 = T::one() - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            let g = p.grad().expect("checked above").to_vec();
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (T::one() - beta1) * *gi;
                *vi = beta2 * *vi + (T::one() - beta2) * *gi * *gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor<f64> {
        let mut t = Tensor::scalar(v).with_requires_grad(true);
        t.accumulate_grad(&[g]);
        t
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [3.7, -0.02, 1e-3] {
            let mut params = vec![param(1.0, g)];
            let mut adam = Adam::new(AdamConfig::default(), &params);
            adam.step(&mut params).unwrap();
            let moved = params[0].data()[0] - 1.0;
            assert!((moved + 2e-4 * g.signum()).abs() < 2e-4 * 1e-5, "g={g} moved={moved}");
            assert_eq!(params[0].grad().unwrap(), &[0.0]);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut params = vec![param(0.25, 0.0)];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        adam.step(&mut params).unwrap();
        assert_eq!(params[0].data()[0], 0.25);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = vec![Tensor::scalar(1.0f64)];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        assert!(matches!(adam.step(&mut params), Err(Error::MissingGradient { index: 0 })));
        assert_eq!(adam.steps(), 0);
    }

    /// Independent scalar Adam recurrence.
    fn scalar_adam(mut w: f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * (w - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn quadratic_converges_and_matches_scalar_recurrence() {
        let mut params = vec![Tensor::scalar(0.0f64).with_requires_grad(true)];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &params);
        for step in 1..=100u64 {
            let w = params[0].data()[0];
            params[0].accumulate_grad(&[2.0 * (w - 3.0)]);
            adam.step(&mut params).unwrap();
            assert_eq!(adam.steps(), step);
        }
        let w = params[0].data()[0];
        assert!((w - 3.0).abs() < 0.5, "w = {w}");
        assert!((w - scalar_adam(0.0, 0.1, 100)).abs() < 1e-12);
    }
}
