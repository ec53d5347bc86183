//! Adam with bias correction, state keyed by parameter name.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { beta1, beta2, eps, step: 0, moments: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Restore serialized state; moment shapes are validated lazily in `step`.
    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, (Vec<T>, Vec<T>)>) {
        self.step = step;
        self.moments = moments;
    }

    pub fn moments(&self) -> &BTreeMap<String, (Vec<T>, Vec<T>)> {
        &self.moments
    }

    /// One update over `(name, param, grad)` triples. Rejects non-finite
    /// gradients, naming the parameter and its grad norm.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<T>, &Tensor<T>)], lr: f64) -> Result<()> {
        for (name, param, grad) in params.iter() {
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{name}: grad {:?} vs param {:?}", grad.shape(), param.shape()),
                });
            }
            if !grad.is_all_finite() {
                let norm: f64 =
                    grad.data().iter().map(|&g| g.to_f64() * g.to_f64()).sum::<f64>().sqrt();
                return Err(Error::TrainAbort {
                    iteration: self.step,
                    detail: format!("non-finite gradient for {name} (grad norm {norm})"),
                });
            }
        }
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(self.eps);

        for (name, param, grad) in params.iter_mut() {
            let n = param.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            if m.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("{name}: restored moment length {} vs param {n}", m.len()),
                });
            }
            let p = param.data_mut();
            let g = grad.data();
            for i in 0..n {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
