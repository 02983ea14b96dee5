//! Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: Vec::new() }
    }

    /// First and second moments of a parameter, if it has been updated.
    pub fn moments(&self, index: usize) -> Option<(&[T], &[T])> {
        self.moments.get(index)?.as_ref().map(|(m, v)| (&m[..], &v[..]))
    }

    /// One update of every trainable parameter from its stored gradient.
    /// Frozen parameters are never touched.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let ids = store.trainable_ids();
        for &id in &ids {
            let p = store.get(id);
            let g = p.grad.as_ref().ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            if g.shape() != p.value.shape() {
                return Err(Error::shape("optimizer", format!("{}: grad {:?}", p.name, g.shape())));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(t));
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(1.0 - lr * self.weight_decay);
        let eps = T::from_f64(self.eps);
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        for id in ids {
            let p = store.get_mut(id);
            let grad = p.grad.as_ref().expect("checked above");
            let (m, v) =
                self.moments[id.index()].get_or_insert_with(|| (vec![T::ZERO; grad.len()], vec![T::ZERO; grad.len()]));
            let mut w = (*p.value).clone();
            for (((w, &g), m), v) in w.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
            if !w.all_finite() {
                return Err(Error::NonFinite("optimizer step"));
            }
            p.value = std::sync::Arc::new(w);
        }
        Ok(())
    }
}
