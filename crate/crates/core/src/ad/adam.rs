//! Adam optimizer over a subset of a [`ParamStore`].

use super::{Arr, ParamId, ParamStore};
use std::collections::HashMap;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    params: Vec<ParamId>,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, lr: f64, betas: (f64, f64)) -> Self {
        let m = params
            .iter()
            .map(|&id| Arr::zeros(store.value(id).raw_dim()))
            .collect();
        let v = params
            .iter()
            .map(|&id| Arr::zeros(store.value(id).raw_dim()))
            .collect();
        Adam {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            step_count: 0,
            params,
            m,
            v,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update. Parameters without a gradient entry are left untouched
    /// (their moments do not advance either, keeping resume bit-stable).
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<usize, Arr>) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (slot, &id) in self.params.iter().enumerate() {
            let Some(g) = grads.get(&id.index()) else {
                continue;
            };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let lr = self.lr;
            let eps = self.eps;
            store.update(id, |p| {
                ndarray::Zip::from(&mut *p)
                    .and(&*m)
                    .and(&*v)
                    .for_each(|p, &m, &v| {
                        let mh = m / bc1;
                        let vh = v / bc2;
                        *p -= lr * mh / (vh.sqrt() + eps);
                    });
            });
        }
    }

    /// Internal state for checkpointing: `(step_count, per-param (m, v))`
    /// aligned with [`Adam::params`].
    pub fn state(&self) -> (u64, Vec<(Arr, Arr)>) {
        (
            self.step_count,
            self.m
                .iter()
                .cloned()
                .zip(self.v.iter().cloned())
                .map(|(m, v)| (m, v))
                .collect(),
        )
    }

    pub fn restore(&mut self, step_count: u64, slots: Vec<(Arr, Arr)>) {
        assert_eq!(slots.len(), self.params.len(), "optimizer state mismatch");
        self.step_count = step_count;
        for (i, (m, v)) in slots.into_iter().enumerate() {
            assert_eq!(m.shape(), self.m[i].shape());
            assert_eq!(v.shape(), self.v[i].shape());
            self.m[i] = m;
            self.v[i] = v;
        }
    }
}
