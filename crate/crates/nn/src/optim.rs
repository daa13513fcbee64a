use std::collections::{BTreeMap, HashMap};

use ndarray::Zip;

use crate::graph::Tensor;
use crate::params::ParamStore;

pub trait Optimizer {
    /// Applies one update. Frozen parameters and parameters without a
    /// gradient are left untouched.
    fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>);

    fn learning_rate(&self) -> f64;
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (name, g) in grads {
            if store.get(name).is_none_or(|p| p.frozen) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.raw_dim()), Tensor::zeros(g.raw_dim())));
            let value = store.value_mut(name).unwrap();
            Zip::from(value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// RMSprop with the Keras defaults (rho 0.9, eps 1e-7).
#[derive(Clone, Debug)]
pub struct RmsProp {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    mean_square: HashMap<String, Tensor>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        RmsProp {
            lr,
            rho: 0.9,
            eps: 1e-7,
            mean_square: HashMap::new(),
        }
    }
}

impl Optimizer for RmsProp {
    fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        let (rho, eps, lr) = (self.rho, self.eps, self.lr);
        for (name, g) in grads {
            if store.get(name).is_none_or(|p| p.frozen) {
                continue;
            }
            let ms = self
                .mean_square
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let value = store.value_mut(name).unwrap();
            Zip::from(value).and(ms).and(g).for_each(|p, s, &g| {
                *s = rho * *s + (1.0 - rho) * g * g;
                *p -= lr * g / (s.sqrt() + eps);
            });
        }
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grads.values_mut().for_each(|g| g.mapv_inplace(|v| v * k));
    }
    norm
}
