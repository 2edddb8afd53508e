//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update of a flat parameter slice. `t` is the
/// 1-based step count.
pub fn adam_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    cfg: &AdamConfig,
    t: u64,
) {
    assert!(t >= 1, "Adam step count starts at 1");
    debug_assert!(param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i].f64();
        let mi = b1 * m[i].f64() + (1.0 - b1) * g;
        let vi = b2 * v[i].f64() + (1.0 - b2) * g * g;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        let m_hat = mi / c1;
        let v_hat = vi / c2;
        param[i] = T::of(param[i].f64() - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps));
    }
}

/// Optimizer state for a whole [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    t: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, t: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[T], &[T])> {
        self.moments.get(id.index())?.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Apply one update from `(param, gradient)` pairs.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)]) {
        self.t += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (id, g) in grads {
            let p = store.get_mut(*id).data_mut();
            let (m, v) = self.moments[id.index()]
                .get_or_insert_with(|| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
            adam_step(p, g, m, v, &self.cfg, self.t);
        }
    }
}
