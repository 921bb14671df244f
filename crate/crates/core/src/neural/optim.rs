use serde::{Deserialize, Serialize};

use super::{ParamStore, Real};
use crate::error::Result;

/// Applies the accumulated gradients, then clears them.
pub trait Optimizer<T: Real> {
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<()>;
}

fn moments_like<T: Real>(store: &ParamStore<T>) -> Vec<Vec<T>> {
    store
        .params()
        .iter()
        .map(|p| vec![T::zero(); p.len()])
        .collect()
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: moments_like(store),
            v: moments_like(store),
        }
    }
}

impl<T: Real> Optimizer<T> for Adam<T> {
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        store.grads_finite()?;
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let bc1 = one - T::lit(self.beta1.powi(self.t as i32));
        let bc2 = one - T::lit(self.beta2.powi(self.t as i32));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let decay = one - T::lit(self.lr * self.weight_decay);
        for ((p, m), v) in store
            .params_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.value[i] = p.value[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
                p.grad[i] = T::zero();
            }
        }
        store.step_count += 1;
        Ok(())
    }
}

/// RMSProp with decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RmsProp<T> {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    pub weight_decay: f64,
    sq: Vec<Vec<T>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            alpha: 0.99,
            eps: 1e-8,
            weight_decay,
            sq: moments_like(store),
        }
    }
}

impl<T: Real> Optimizer<T> for RmsProp<T> {
    fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        store.grads_finite()?;
        let one = T::one();
        let alpha = T::lit(self.alpha);
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let decay = one - T::lit(self.lr * self.weight_decay);
        for (p, sq) in store.params_mut().iter_mut().zip(&mut self.sq) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                sq[i] = alpha * sq[i] + (one - alpha) * g * g;
                p.value[i] = p.value[i] * decay - lr * g / (sq[i].sqrt() + eps);
                p.grad[i] = T::zero();
            }
        }
        store.step_count += 1;
        Ok(())
    }
}

/// `target ← (1 − theta)·target + theta·online`, element-wise.
pub fn soft_update<T: Real>(
    target: &mut ParamStore<T>,
    online: &ParamStore<T>,
    theta: f64,
) -> Result<()> {
    target.check_same_structure(online)?;
    let th = T::lit(theta);
    let keep = T::one() - th;
    for (t, o) in target.params_mut().iter_mut().zip(online.params()) {
        for (tv, &ov) in t.value.iter_mut().zip(&o.value) {
            *tv = keep * *tv + th * ov;
        }
    }
    Ok(())
}
