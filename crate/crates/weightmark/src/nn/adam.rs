//! Adam optimizer over a fixed set of store parameters.

use ndarray::ArrayD;

use super::store::{GradStore, ParamId, ParamStore};

pub struct Adam {
    ids: Vec<ParamId>,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, lr: f32, beta1: f32, beta2: f32) -> Self {
        let m = ids.iter().map(|id| ArrayD::zeros(store.get(*id).raw_dim())).collect();
        let v = ids.iter().map(|id| ArrayD::zeros(store.get(*id).raw_dim())).collect();
        let steps = vec![0; ids.len()];
        Self { ids, lr, beta1, beta2, eps: 1e-8, m, v, steps }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// Apply one update to every owned parameter that has a gradient.
    /// Parameters without gradients keep their moment state untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore) {
        for (slot, id) in self.ids.iter().enumerate() {
            let Some(g) = grads.get(*id) else { continue };
            self.steps[slot] += 1;
            let t = self.steps[slot] as i32;
            let (b1, b2) = (self.beta1, self.beta2);
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let lr = self.lr;
            let eps = self.eps;
            let p = store.get_mut(*id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}
