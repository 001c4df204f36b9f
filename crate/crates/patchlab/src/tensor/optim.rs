//! AdamW with decoupled weight decay and bias-corrected moments.

use super::{Element, ParamStore};
use crate::error::{Error, Result};

/// Optimizer hyperparameters; the learning rate is set per step by the
/// schedule, the rest stay fixed for a run.
#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Per-parameter first/second moments plus the step counter.
pub struct AdamW<E> {
    pub cfg: AdamWConfig,
    pub t: u64,
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<E>) -> Self {
        let m = params.iter().map(|p| vec![E::zero(); p.data.len()]).collect();
        let v = params.iter().map(|p| vec![E::zero(); p.data.len()]).collect();
        AdamW { cfg, t: 0, m, v }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One decoupled-decay update:
    ///   w ← w − lr·( m̂ / (√v̂ + eps) + wd·w )
    /// Moment math runs in f64 regardless of the training element type.
    pub fn step(&mut self, params: &mut ParamStore<E>) -> Result<()> {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for id in 0..params.len() {
            let p = params.get_mut(id);
            let grad = p.grad.as_ref().ok_or_else(|| {
                Error::Train(format!("adamw_step: missing gradient for {}", p.name))
            })?;
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            for i in 0..p.data.len() {
                let g = grad[i].to_f64();
                let mi = c.beta1 * m[i].to_f64() + (1.0 - c.beta1) * g;
                let vi = c.beta2 * v[i].to_f64() + (1.0 - c.beta2) * g * g;
                m[i] = E::from_f64(mi);
                v[i] = E::from_f64(vi);
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let w = p.data[i].to_f64();
                p.data[i] =
                    E::from_f64(w - c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w));
            }
        }
        Ok(())
    }
}
