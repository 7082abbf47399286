//! Adam optimizer over a [`ParamStore`].

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use crate::graph::Gradients;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
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

/// First and second moment estimates, keyed by parameter name so the state
/// can be saved and restored independently of store layout.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, (ArrayD<f32>, ArrayD<f32>)>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState::default(),
        }
    }

    /// One update. Entries without a gradient (frozen weights, buffers,
    /// weights unused in this pass) are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let mut ids: Vec<_> = grads.by_param.keys().copied().collect();
        ids.sort();
        for id in ids {
            let g = &grads.by_param[&id];
            let p = store.get_mut(id);
            if !p.trainable() {
                continue;
            }
            let (m, v) = self
                .state
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= learning_rate * mh / (vh.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, Role};
    use ndarray::IxDyn;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new(0);
        let id = store.add("w", &[2], Init::Zeros, Role::Weight);
        let mut grads = Gradients::default();
        grads
            .by_param
            .insert(id, ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, -0.5]).unwrap());
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store, &grads);
        let w = store.value(id);
        assert!((w[[0]] + 1e-3).abs() < 1e-7);
        assert!((w[[1]] - 1e-3).abs() < 1e-7);
    }

    #[test]
    fn frozen_entries_are_skipped() {
        let mut store = ParamStore::new(0);
        let id = store.add("w", &[1], Init::Ones, Role::Weight);
        store.freeze_all();
        let mut grads = Gradients::default();
        grads.by_param.insert(id, ArrayD::ones(IxDyn(&[1])));
        Adam::new(AdamConfig::default()).step(&mut store, &grads);
        assert_eq!(store.value(id)[[0]], 1.0);
    }
}
