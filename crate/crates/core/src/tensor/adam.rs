use serde::{Deserialize, Serialize};

use super::{ParamGrads, ParamId, ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled (AdamW-style) decay, applied only to parameters flagged for decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// Adam with bias correction. Moment buffers are indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new<U: Scalar>(config: AdamConfig, store: &ParamStore<U>) -> Self {
        let zeros = |id: ParamId| vec![T::zero(); store.get(id).numel()];
        Adam {
            config,
            step: 0,
            m: store.ids().map(zeros).collect(),
            v: store.ids().map(zeros).collect(),
        }
    }

    /// Rebuilds optimizer state, e.g. from a checkpoint.
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Config("adam moment buffers have mismatched lengths".into()));
        }
        Ok(Adam { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> &[T] {
        &self.m[id.index()]
    }

    pub fn second_moment(&self, id: ParamId) -> &[T] {
        &self.v[id.index()]
    }

    /// One update. Parameters without a gradient are left untouched. Any
    /// non-finite gradient aborts the whole step before anything is written.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        if store.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}, gradients {}",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if g.len() != self.m[id.index()].len() {
                    return Err(Error::shape(
                        "adam_step",
                        format!("gradient for `{}` has {} elements", store.name(id), g.len()),
                    ));
                }
                if let Some(pos) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of `{}`", store.name(id)),
                        detail: format!("element {pos} is {}", g[pos]),
                    });
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        let eps = T::lit(c.epsilon);
        let lr_t = T::lit(lr);
        let decay = T::lit(lr * c.weight_decay);

        for id in store.ids() {
            let Some(g) = grads.get(id) else { continue };
            let apply_decay = c.weight_decay != 0.0 && store.decays(id);
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let mut update = lr_t * m_hat / (v_hat.sqrt() + eps);
                if apply_decay {
                    update += decay * p[i];
                }
                p[i] -= update;
            }
        }
        Ok(())
    }
}
