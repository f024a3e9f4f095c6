//! Rectified Adam, the warmup schedule and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter, aligned with the store's ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RAdam {
    pub config: RAdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl RAdam {
    pub fn new(config: RAdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Length of the approximated simple moving average at step `t`.
    pub fn rho(&self, t: u64) -> f64 {
        let b2 = self.config.beta2;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let b2t = b2.powi(t as i32);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// One update with learning rate `lr`. `None` gradients count as zero.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::invalid("optimizer state does not match the parameters"));
        }
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let RAdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let rho_t = self.rho(t);
        // Variance of the adaptive term is tractable only for long enough
        // averages; before that the update is momentum SGD.
        let rect = (rho_t > 5.0).then(|| {
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
        });
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let zero;
            let g = match &grads[i] {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(self.m[i].shape());
                    &zero
                }
            };
            self.apply(store, id, i, g, lr, bc1, bc2, rect, eps);
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn apply(
        &mut self,
        store: &mut ParamStore,
        id: crate::nn::ParamId,
        i: usize,
        g: &Tensor,
        lr: f64,
        bc1: f64,
        bc2: f64,
        rect: Option<f64>,
        eps: f64,
    ) {
        let RAdamConfig { beta1, beta2, .. } = self.config;
        let m = self.m[i].data_mut();
        let v = self.v[i].data_mut();
        let p = store.get_mut(id).data_mut();
        for k in 0..p.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g.data()[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g.data()[k] * g.data()[k];
            let m_hat = m[k] / bc1;
            p[k] -= match rect {
                Some(r) => lr * r * m_hat / ((v[k] / bc2).sqrt() + eps),
                None => lr * m_hat,
            };
        }
    }
}

/// Linear warmup to `peak` over `warmup` steps, then `peak·sqrt(warmup/step)`.
pub fn inverse_sqrt_lr(step: u64, peak: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Scales all gradients so that their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}
