//! AdamW with decoupled weight decay.

use ndarray::ArrayD;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub struct AdamW<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: u64,
    m: Vec<Option<ArrayD<T>>>,
    v: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            weight_decay: T::from_f64(weight_decay),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = T::from_f64(lr);
    }

    pub fn lr(&self) -> f64 {
        self.lr.to_f64()
    }

    /// Apply one update. Frozen parameters are skipped even if a gradient
    /// was produced for them.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, ArrayD<T>)]) {
        if self.m.len() < store.len() {
            self.m.resize_with(store.len(), || None);
            self.v.resize_with(store.len(), || None);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();
        for (id, grad) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let m = self.m[id.0]
                .get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self.v[id.0]
                .get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = self.beta1 * *m + (one - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = self.beta2 * *v + (one - self.beta2) * g * g;
            });
            let value = store.value_mut(*id);
            ndarray::Zip::from(&mut *value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p = *p
                        - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
    }
}
