//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments in canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &Params<Tensor>) -> Self {
        let zeros: Vec<Tensor> = params
            .entries()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update: `p ← p − lr·wd·p`, then the bias-corrected Adam step.
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn update(
        &mut self,
        params: &mut Params<Tensor>,
        grads: &Params<Tensor>,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<()> {
        let grads = grads.entries();
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let decay = (1.0 - lr * cfg.weight_decay) as f32;
        let mut i = 0;
        params.visit_mut(|_, p| {
            let g = grads[i].1.data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                *p *= decay;
                *p -= (lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
            }
            i += 1;
        });
        Ok(())
    }
}
