use std::collections::BTreeMap;

use crate::element::Element;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::TensorError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam. Moment estimates are kept per parameter name.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in `grads`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<(), TensorError> {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let param = store.get_mut(name).ok_or_else(|| TensorError::MissingParameter(name.clone()))?;
            if param.shape() != grad.shape() {
                return Err(TensorError::ShapeMismatch(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
            let (b1, b2) = (T::of(beta1), T::of(beta2));
            let (c1, c2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
            let (lr_t, bc1_t, bc2_t, eps_t) = (T::of(lr), T::of(bc1), T::of(bc2), T::of(eps));
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + c1 * g;
                *v = b2 * *v + c2 * g * g;
                let m_hat = *m / bc1_t;
                let v_hat = *v / bc2_t;
                *p -= lr_t * m_hat / (v_hat.sqrt() + eps_t);
            }
        }
        Ok(())
    }
}
