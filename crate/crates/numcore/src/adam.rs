use crate::error::{NumError, Result};
use crate::params::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Frozen parameters are skipped entirely.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update using `grads`, then zeroes `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients) -> Result<()> {
        self.step_with_lr(store, grads, self.config.lr)
    }

    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &mut Gradients, lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(NumError::Contract(format!(
                "adam state for {} params, gradients for {}, store has {}",
                self.m.len(),
                grads.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let n = store.get(id).len();
            if grads.get(id).len() != n || self.m[id.index()].len() != n {
                return Err(NumError::shape(
                    "adam_step",
                    format!("parameter {} size mismatch", store.name(id)),
                ));
            }
        }
        if !grads.is_finite() {
            return Err(NumError::NonFinite("adam_step"));
        }
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if store.is_frozen(id) {
                continue;
            }
            let g = grads.get(id).data();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        grads.zero();
        Ok(())
    }
}
