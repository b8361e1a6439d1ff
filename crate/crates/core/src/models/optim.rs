//! Adam with decoupled weight decay.

use super::params::ParameterSet;
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: ParameterSet<T>,
    v: ParameterSet<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParameterSet<T>, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. A non-finite gradient rejects the step and leaves both the
    /// parameters and the moment estimates untouched.
    pub fn step(&mut self, params: &mut ParameterSet<T>, grads: &ParameterSet<T>) -> Result<()> {
        if !params.same_layout(grads) {
            return Err(Error::Shape("gradient layout does not match parameters".into()));
        }
        if !grads.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient at optimizer step {}; step rejected",
                self.step + 1
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64c(self.beta1), T::from_f64c(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let decay = T::from_f64c(1.0 - self.lr * self.weight_decay);
        let step_size = T::from_f64c(self.lr / bc1);
        let bc2_sqrt = T::from_f64c(bc2.sqrt());
        let eps = T::from_f64c(self.eps);
        for id in 0..params.len() {
            if !params.is_trainable(id) {
                continue;
            }
            let g = grads.data(id);
            let m = self.m.data_mut(id);
            let v = self.v.data_mut(id);
            let p = params.data_mut(id);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                p[i] *= decay;
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                p[i] -= step_size * m[i] / denom;
            }
        }
        Ok(())
    }
}
