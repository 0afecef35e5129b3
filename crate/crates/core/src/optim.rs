use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classifier, Trainable};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction over a fixed subset of a classifier's parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    /// `(registry index, first moment, second moment)`.
    slots: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    /// Tracks every parameter admitted by `which`.
    pub fn new(model: &Classifier, which: Trainable, config: AdamConfig) -> Self {
        let slots = model
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| match which {
                Trainable::None => false,
                Trainable::Adaptable => p.role == crate::model::ParamRole::Adaptable,
                Trainable::All => true,
            })
            .map(|(i, p)| (i, vec![0.0; p.value.numel()], vec![0.0; p.value.numel()]))
            .collect();
        AdamState {
            config,
            step: 0,
            slots,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tracked(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().map(|s| s.0)
    }

    /// Applies one update. `grads` pairs registry indices with gradients and
    /// must cover every tracked parameter.
    pub fn step(&mut self, model: &mut Classifier, grads: &[(usize, Tensor)]) -> Result<()> {
        for (idx, _, _) in &self.slots {
            let Some((_, g)) = grads.iter().find(|(i, _)| i == idx) else {
                return Err(Error::MissingGradient(model.params()[*idx].name.clone()));
            };
            let p = &model.params()[*idx];
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adam", p.value.shape(), g.shape()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let params = model.params_mut();
        for (idx, m, v) in &mut self.slots {
            let g = &grads.iter().find(|(i, _)| i == idx).expect("checked above").1;
            let values = params[*idx].value.data_mut();
            for k in 0..values.len() {
                let gk = g.data()[k] + c.weight_decay * values[k];
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                values[k] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
