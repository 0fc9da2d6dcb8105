//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f32>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamW {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update with gradients indexed like the store's parameters.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Vec<f32>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Validation(format!(
                "optimizer has {} slots, store {} parameters, {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (self.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let decay = (self.lr * self.weight_decay) as f32;
        let eps = self.eps as f32;
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            if g.len() != p.len() {
                return Err(Error::Validation(format!(
                    "gradient {k} has {} values for {} parameters",
                    g.len(),
                    p.len()
                )));
            }
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p[i] -= step_size * m[i] / denom + decay * p[i];
            }
        }
        Ok(())
    }
}
