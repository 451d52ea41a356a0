use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// First/second moment estimates for ADAM with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-4)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }

    /// One update of every trainable parameter in `params`.
    ///
    /// Every trainable parameter must have a gradient; extra gradients
    /// (for frozen parameters) are ignored.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &IndexMap<String, Tensor>,
    ) -> Result<()> {
        for p in params.trainable() {
            match grads.get(&p.name) {
                None => return Err(Error::MissingGradient(p.name.clone())),
                Some(g) if g.shape() != p.tensor.shape() => {
                    return Err(Error::shape(
                        "adam_step",
                        format!(
                            "gradient {:?} for `{}` of shape {:?}",
                            g.shape(),
                            p.name,
                            p.tensor.shape()
                        ),
                    ))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut().filter(|p| p.trainable) {
            let g = &grads[&p.name];
            let m = self
                .m
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for (((w, &gi), mi), vi) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
