//! AdamW: Adam with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::numerics::params::ParamSet;
use crate::numerics::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct OptimizerState<F: Scalar> {
    /// First/second moment buffers, aligned with the ParamSet order.
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &ParamSet<F>, learning_rate: f64) -> Self {
        OptimizerState {
            m: params.iter().map(|(_, t)| vec![F::zero(); t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![F::zero(); t.numel()]).collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }

    /// One decoupled-weight-decay Adam update over every parameter. Gradients
    /// must already be populated in the ParamSet.
    pub fn step(&mut self, params: &mut ParamSet<F>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, params have {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let lr = F::of(self.learning_rate);
        let b1 = F::of(self.beta1);
        let b2 = F::of(self.beta2);
        let one_b1 = F::of(1.0 - self.beta1);
        let one_b2 = F::of(1.0 - self.beta2);
        let eps = F::of(self.epsilon);
        let wd = F::of(self.weight_decay);
        let ibc1 = F::of(1.0 / bc1);
        let ibc2 = F::of(1.0 / bc2);
        for idx in 0..params.len() {
            let (name, tensor) = params.at_mut(idx);
            let grad = match &tensor.grad {
                Some(g) => g.clone(),
                None => {
                    return Err(Error::invalid(format!(
                        "parameter {name} has no gradient buffer"
                    )))
                }
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let mhat = m[i] * ibc1;
                let vhat = v[i] * ibc2;
                let w = tensor.data[i];
                tensor.data[i] = w - lr * (mhat / (vhat.sqrt() + eps) + wd * w);
            }
        }
        Ok(())
    }
}
