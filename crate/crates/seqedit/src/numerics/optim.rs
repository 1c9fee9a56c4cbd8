//! Adam optimizer with linear learning-rate warmup.

use crate::error::{Error, Result};
use crate::numerics::nn::ParamSet;
use crate::numerics::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 5e-5,
            warmup_steps: 2000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// Linear ramp: lr(step) = base_lr · min(1, step / warmup_steps).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.base_lr;
        }
        self.base_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// Adam state: one pair of moment buffers per parameter, in `ParamSet`
/// order. Moments are kept in f64 regardless of the parameter dtype.
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new<T: Scalar>(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        let moments = params
            .iter()
            .map(|(_, t)| (vec![0.0; t.len()], vec![0.0; t.len()]))
            .collect();
        Adam {
            cfg,
            step: 0,
            moments,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter. A missing gradient counts as zero; a
    /// non-finite gradient aborts with the parameter's name.
    pub fn step<T: Scalar>(&mut self, params: &ParamSet<T>) -> Result<()> {
        self.step += 1;
        let lr = self.cfg.lr_at(self.step);
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        for ((name, tensor), (m, v)) in params.iter().zip(self.moments.iter_mut()) {
            let grad: Vec<f64> = match tensor.grad() {
                Some(g) => g.iter().map(|x| Scalar::as_f64(*x)).collect(),
                None => vec![0.0; tensor.len()],
            };
            if grad.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let mut value: Vec<T> = tensor.value();
            for i in 0..grad.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let update = lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                value[i] = T::from_f64(Scalar::as_f64(value[i]) - update);
            }
            tensor.set_data(value)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn warmup_ramp_matches_schedule() {
        let cfg = AdamConfig::default();
        assert!((cfg.lr_at(1000) - 2.5e-5).abs() < 1e-20);
        assert!((cfg.lr_at(2000) - 5e-5).abs() < 1e-20);
        assert!((cfg.lr_at(50_000) - 5e-5).abs() < 1e-20);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let t = Tensor::<f64>::vector(vec![1.0, -2.0]).as_param();
        let mut params = ParamSet::new();
        params.push("p", t.clone());
        let mut adam = Adam::new(AdamConfig::default(), &params);
        t.accumulate_grad(&[0.0, 0.0]);
        adam.step(&params).unwrap();
        assert_eq!(t.value(), vec![1.0, -2.0]);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let t = Tensor::<f64>::vector(vec![1.0]).as_param();
        let mut params = ParamSet::new();
        params.push("p", t.clone());
        let mut adam = Adam::new(AdamConfig::default(), &params);
        t.accumulate_grad(&[f64::NAN]);
        let err = adam.step(&params).unwrap_err();
        assert!(err.to_string().contains("non-finite gradient"));
    }

    #[test]
    fn gradient_descends_a_quadratic() {
        let t = Tensor::<f64>::vector(vec![3.0]).as_param();
        let mut params = ParamSet::new();
        params.push("p", t.clone());
        let cfg = AdamConfig {
            base_lr: 0.1,
            warmup_steps: 0,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg, &params);
        for _ in 0..200 {
            params.zero_grads();
            let loss = crate::numerics::ops::dot(&t, &t).unwrap();
            loss.backward().unwrap();
            adam.step(&params).unwrap();
        }
        assert!(t.value()[0].abs() < 0.5);
    }
}
