//! Adam optimizer with bias correction and optional decoupled weight decay.

use crate::autodiff::params::{ParamId, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (applied directly to the parameter, not the
    /// gradient); 0 disables it.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

pub struct AdamState {
    cfg: AdamConfig,
    step_count: u64,
    ids: Vec<ParamId>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamState {
    /// Fresh state for the trainable parameters of a store.
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let ids = store.trainable_ids();
        let first_moment = ids.iter().map(|id| Tensor::zeros(store.tensor(*id).shape())).collect();
        let second_moment = ids.iter().map(|id| Tensor::zeros(store.tensor(*id).shape())).collect();
        AdamState { cfg, step_count: 0, ids, first_moment, second_moment }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// One bias-corrected update. `grads` must align with `ids()`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), self.ids.len()),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (k, id) in self.ids.iter().enumerate() {
            let g = &grads[k];
            let p = store.tensor_mut(*id);
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                ));
            }
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            for ((pi, &gi), (mi, vi)) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *pi);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(value), true);
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut store, id) = single_param(3.25);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &store);
        for _ in 0..5 {
            adam.step(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(store.tensor(id).item(), 3.25);
        assert_eq!(adam.step_count(), 5);
    }

    /// Hand evaluation of the bias-corrected formulas for step 1:
    /// m=0.1, v=0.001, m_hat=1, v_hat=1, so the update is lr/(1+eps).
    #[test]
    fn first_step_matches_hand_computation() {
        let (mut store, id) = single_param(0.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &store);
        adam.step(&mut store, &[Tensor::scalar(1.0)]).unwrap();
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((store.tensor(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_params_with_identical_grads_stay_identical() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::scalar(0.7), true);
        let b = store.insert("b", Tensor::scalar(0.7), true);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.01), &store);
        for k in 0..50 {
            let g = (k as f64 * 0.37).sin();
            adam.step(&mut store, &[Tensor::scalar(g), Tensor::scalar(g)]).unwrap();
            assert_eq!(store.tensor(a).item(), store.tensor(b).item());
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let (mut store, _) = single_param(0.0);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &store);
        let err = adam.step(&mut store, &[Tensor::vector(&[1.0, 2.0])]);
        assert!(err.is_err());
    }
}
