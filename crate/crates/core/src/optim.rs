//! AdamW with decoupled weight decay; state is serializable so training can
//! resume bitwise.

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::graph::ParamStore;
use crate::num::Scalar;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AdamW<F: Scalar> {
    pub config: AdamWConfig,
    pub step_count: u64,
    m: IndexMap<String, Array2<F>>,
    v: IndexMap<String, Array2<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step_count: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One update. Decay is decoupled: `p -= lr * wd * p` independent of the
    /// gradient, so with lr' = 0 nothing moves and with zero gradients the
    /// parameters shrink multiplicatively.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &IndexMap<String, Array2<F>>) {
        self.step_count += 1;
        let lr = F::from_f64(self.config.learning_rate);
        let wd = F::from_f64(self.config.weight_decay);
        let b1 = F::from_f64(self.config.beta1);
        let b2 = F::from_f64(self.config.beta2);
        let eps = F::from_f64(self.config.eps);
        let one = F::one();
        let bc1 = one - F::from_f64(self.config.beta1.powi(self.step_count as i32));
        let bc2 = one - F::from_f64(self.config.beta2.powi(self.step_count as i32));
        for (name, grad) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));
            for ((pe, ge), (me, ve)) in p
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *me = b1 * *me + (one - b1) * *ge;
                *ve = b2 * *ve + (one - b2) * *ge * *ge;
                let mhat = *me / bc1;
                let vhat = *ve / bc2;
                *pe = *pe - lr * (mhat / (vhat.sqrt() + eps)) - lr * wd * *pe;
            }
        }
    }
}
