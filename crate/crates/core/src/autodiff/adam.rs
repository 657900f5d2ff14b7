use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::AutodiffError;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Apply one update to every trainable parameter and zero all gradients.
    ///
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&self, store: &mut ParamStore) -> Result<(), AutodiffError> {
        if let Some(p) = store
            .params
            .iter()
            .find(|p| p.trainable && p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(AutodiffError::NonFiniteGradient(p.name.clone()));
        }
        store.step += 1;
        let t = store.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in store.params.iter_mut().filter(|p| p.trainable) {
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.first_moment)
                .and(&mut p.second_moment)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
        store.zero_grad();
        Ok(())
    }
}
