//! Adam with per-group global-norm clipping.

use std::collections::HashMap;

use crate::params::{Mat, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: HashMap<ParamId, Mat>,
    v: HashMap<ParamId, Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &HashMap<ParamId, Mat>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            if !params.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.get(&id) else { continue };
            let m = self.m.entry(id).or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v.entry(id).or_insert_with(|| Mat::zeros(g.dim()));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let p = params.value_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Scales the gradients of `group` so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping. Summation follows the order
/// of `group`, so results are reproducible.
pub fn clip_group(grads: &mut HashMap<ParamId, Mat>, group: &[ParamId], max_norm: f64) -> f64 {
    let norm = group
        .iter()
        .filter_map(|id| grads.get(id))
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for id in group {
            if let Some(g) = grads.get_mut(id) {
                g.mapv_inplace(|v| v * s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("w", arr2(&[[1.0, -2.0]]), true);
        let frozen = store.insert("f", arr2(&[[1.0]]), false);
        let mut grads = HashMap::new();
        grads.insert(id, arr2(&[[0.5, -3.0]]));
        grads.insert(frozen, arr2(&[[1.0]]));
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &grads);
        let w = store.value(id);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 1.9).abs() < 1e-6);
        assert_eq!(store.value(frozen)[[0, 0]], 1.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("x", arr2(&[[3.0, -4.0]]), true);
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let g = store.value(id).mapv(|v| 2.0 * v);
            adam.step(&mut store, &HashMap::from([(id, g)]));
        }
        assert!(store.value(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_by_group() {
        let mut store = ParamStore::new();
        let a = store.insert("a", arr2(&[[3.0]]), true);
        let b = store.insert("b", arr2(&[[4.0]]), true);
        let c = store.insert("c", arr2(&[[100.0]]), true);
        let mut grads: HashMap<_, _> = [a, b, c].iter().map(|&id| (id, store.value(id).clone())).collect();
        let norm = clip_group(&mut grads, &[a, b], 1.0);
        assert_eq!(norm, 5.0);
        assert!((grads[&a][[0, 0]] - 0.6).abs() < 1e-15);
        assert!((grads[&b][[0, 0]] - 0.8).abs() < 1e-15);
        assert_eq!(grads[&c][[0, 0]], 100.0);
        assert_eq!(clip_group(&mut grads, &[a, b], 10.0), 1.0);
    }
}
