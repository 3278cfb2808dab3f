//! Adam optimizer over named parameters, with first/second-moment
//! buffers that round-trip through checkpoints for exact resume.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::nn::params::ParamStore;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed update count (drives bias correction).
    pub t: u64,
    m: IndexMap<String, ArrayD<f32>>,
    v: IndexMap<String, ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// One update over the given per-parameter gradients.
    pub fn step(&mut self, store: &mut ParamStore, grads: &IndexMap<String, ArrayD<f32>>) {
        self.t += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - (self.beta1).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2).powi(self.t as i32);
        let lr_t = self.lr * bc2.sqrt() / bc1;
        for (name, g) in grads {
            let p = store.get_mut(name);
            assert!(p.trainable, "gradient for frozen parameter {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= (lr_t as f32) * *m / (v.sqrt() + self.eps as f32);
                });
        }
    }

    /// Persist moment buffers as non-trainable tensors under `prefix`.
    pub fn export_state(&self, store: &mut ParamStore, prefix: &str) {
        for (name, m) in &self.m {
            store.insert(&format!("{prefix}.m.{name}"), m.clone(), false);
        }
        for (name, v) in &self.v {
            store.insert(&format!("{prefix}.v.{name}"), v.clone(), false);
        }
    }

    /// Restore moment buffers saved by `export_state`.
    pub fn import_state(&mut self, store: &ParamStore, prefix: &str, t: u64) {
        self.t = t;
        let mp = format!("{prefix}.m.");
        let vp = format!("{prefix}.v.");
        for (name, p) in store.iter() {
            if let Some(base) = name.strip_prefix(&mp) {
                self.m.insert(base.to_string(), p.value.clone());
            } else if let Some(base) = name.strip_prefix(&vp) {
                self.v.insert(base.to_string(), p.value.clone());
            }
        }
    }
}
