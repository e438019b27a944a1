//! Bias-corrected Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 7e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// One optimizer step over every parameter in the store.
///
/// Weight decay is decoupled from the adaptive update: `theta -= wd * theta`
/// is applied independently of the learning rate, so `lr = 0` still shrinks
/// parameters deterministically when decay is nonzero. Parameters without a
/// gradient entry are treated as having zero gradient.
///
/// All gradients are validated before anything mutates; a non-finite gradient
/// leaves the store untouched.
pub fn adam_step(store: &mut ParamStore, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
    for (name, grad) in grads.iter() {
        let param = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if grad.shape() != param.shape() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for `{name}`: {:?} vs {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }

    let t = store.bump_step();
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let grad = grads
            .get(name)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(name).unwrap().numel()]);
        let update: Vec<f64> = {
            let (m, v) = store.moments_mut(name)?;
            m.data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(&grad)
                .map(|((m_i, v_i), &g_i)| {
                    *m_i = cfg.beta1 * *m_i + (1.0 - cfg.beta1) * g_i;
                    *v_i = cfg.beta2 * *v_i + (1.0 - cfg.beta2) * g_i * g_i;
                    let m_hat = *m_i / bc1;
                    let v_hat = *v_i / bc2;
                    cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)
                })
                .collect()
        };
        let param = store.get_mut(name).unwrap();
        for (p, u) in param.data_mut().iter_mut().zip(&update) {
            *p -= u + cfg.weight_decay * *p;
        }
    }
    Ok(())
}
