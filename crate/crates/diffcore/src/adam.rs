use serde::{Deserialize, Serialize};

use crate::error::DiffError;
use crate::store::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies one bias-corrected Adam step (descent on the stored gradients) to
/// every unfrozen parameter, then zeroes all gradients.
///
/// Gradients are validated before anything is modified, so a non-finite
/// gradient leaves the store untouched.
pub fn adam_update(store: &mut ParamStore, cfg: &AdamConfig) -> Result<(), DiffError> {
    if let Some(p) = store
        .params()
        .iter()
        .find(|p| p.grad.iter().any(|g| !g.is_finite()))
    {
        return Err(DiffError::NonFiniteGradient {
            name: p.name.clone(),
        });
    }
    let t = store.advance_step() as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.param_mut(id);
        if !p.frozen {
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.m)
                .and(&mut p.v)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *w -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
                });
        }
        p.grad.fill(0.0);
    }
    Ok(())
}
