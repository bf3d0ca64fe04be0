use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (first, second) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]))
            .unzip();
        AdamState {
            config,
            first,
            second,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the gradient slots of `params`.
    /// A parameter without a gradient is treated as having a zero gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>) -> Result<()> {
        let mut params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if params.len() != self.first.len() {
            return Err(Error::shape(
                "adam_step",
                format!("state tracks {} parameters, got {}", self.first.len(), params.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.first[i].len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {} has {} values, moments {}", i, p.len(), self.first[i].len()),
                ));
            }
            if let Some(g) = p.grad() {
                if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                    log::warn!("adam step rejected: gradient of parameter {} entry {} is not finite", i, j);
                    return Err(Error::NonFinite(format!("gradient of parameter {} entry {}", i, j)));
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let corr1 = T::lit(1.0 - c.beta1.powi(t));
        let corr2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.epsilon);

        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.take_grad();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / corr1;
                let vhat = v[j] / corr2;
                data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::<f64>::from_fn([3], |i| i as f64 - 1.0);
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), [&p]);
        p.set_grad(vec![0.0; 3]).unwrap();
        adam.step([&mut p]).unwrap();
        assert_eq!(p.data(), before.data());
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias corrected both are 1, so the step is lr / (1 + eps)
        let mut p = Tensor::<f64>::zeros([1]);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), [&p]);
        p.set_grad(vec![1.0]).unwrap();
        adam.step([&mut p]).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15, "{}", p.data()[0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut p = Tensor::<f32>::zeros([2]);
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        p.set_grad(vec![1.0, f32::NAN]).unwrap();
        assert!(adam.step([&mut p]).is_err());
        assert_eq!(adam.steps_taken(), 0);
        assert_eq!(p.data(), &[0.0, 0.0]);
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut p = Tensor::<f32>::zeros([1]);
        let mut adam = AdamState::new(AdamConfig::default(), [&p]);
        for k in 1..=5 {
            p.set_grad(vec![0.5]).unwrap();
            adam.step([&mut p]).unwrap();
            assert_eq!(adam.steps_taken(), k);
        }
    }
}
