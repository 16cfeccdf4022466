use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for every parameter of a [`ParamStore`], in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { config, first: zeros(), second: zeros(), step: 0 }
    }

    /// Applies one update from the gradients stored in `params`. Parameters
    /// without a gradient buffer are treated as having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "adam: state tracks {} tensors, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        for (id, (m, v)) in params.ids().zip(self.first.iter().zip(&self.second)) {
            let p = params.get(id);
            if p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(Error::Shape(format!(
                    "adam: moment shape {:?} vs parameter {} of shape {:?}",
                    m.shape(),
                    params.name(id),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id);
            let grad = p.grad.take();
            if let Some(g) = &grad {
                let (m, v) = (self.first[k].data_mut(), self.second[k].data_mut());
                for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(g) {
                    *mi = b1 * *mi + (1.0 - b1) * gi;
                    *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                }
            } else {
                self.first[k].data_mut().iter_mut().for_each(|x| *x *= b1);
                self.second[k].data_mut().iter_mut().for_each(|x| *x *= b2);
            }
            let (m, v) = (self.first[k].data(), self.second[k].data());
            for ((w, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi / c1;
                let vhat = vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.grad = grad;
        }
        Ok(())
    }
}
