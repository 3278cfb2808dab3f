//! Named parameter store shared by the networks and the optimizer.
//! Values live here as f32; a forward pass binds them into a graph as
//! leaves and remembers the node ids so gradients can be routed back.

use indexmap::IndexMap;
use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, NodeId};
use super::Element;

#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    /// Buffers (e.g. running batch-norm statistics) are stored but not
    /// touched by the optimizer.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f32>, trainable: bool) {
        assert!(
            self.params
                .insert(name.to_string(), Param { value, trainable })
                .is_none(),
            "duplicate parameter {name}"
        );
    }

    /// Gaussian init, N(0, std²).
    pub fn insert_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let dist = Normal::new(0.0, std).expect("valid std");
        let v = ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| dist.sample(rng) as f32);
        self.insert(name, v, true);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize], trainable: bool) {
        self.insert(name, ArrayD::zeros(ndarray::IxDyn(shape)), trainable);
    }

    pub fn insert_full(&mut self, name: &str, shape: &[usize], fill: f32, trainable: bool) {
        self.insert(name, ArrayD::from_elem(ndarray::IxDyn(shape), fill), trainable);
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Tracks which graph leaf each parameter was bound to during one
/// forward pass, so the caller can pull its gradient afterwards.
pub struct Bindings {
    entries: Vec<(String, NodeId)>,
}

impl Bindings {
    pub fn new() -> Self {
        Bindings { entries: Vec::new() }
    }

    pub fn bind<E: Element>(
        &mut self,
        g: &mut Graph<E>,
        store: &ParamStore,
        name: &str,
        trainable_pass: bool,
    ) -> NodeId {
        let p = store.get(name);
        let v = p.value.mapv(E::from_f32);
        let needs = p.trainable && trainable_pass;
        let id = g.leaf(v, needs);
        if needs {
            self.entries.push((name.to_string(), id));
        }
        id
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.entries.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

impl Default for Bindings {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn insertion_order_is_stable() {
        let mut s = ParamStore::new();
        s.insert_zeros("b", &[2], true);
        s.insert_zeros("a", &[3], false);
        s.insert_zeros("c", &[1], true);
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, ["b", "a", "c"]);
        assert_eq!(s.trainable_count(), 3);
    }

    #[test]
    fn bindings_route_gradients_by_name() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.insert_normal("w", &[4], 0.5, &mut rng);
        s.insert_zeros("buf", &[4], false);

        let mut g = Graph::<f64>::new();
        let mut b = Bindings::new();
        let w = b.bind(&mut g, &s, "w", true);
        let buf = b.bind(&mut g, &s, "buf", true);
        let sum = g.add(w, buf);
        let target = g.constant(ArrayD::zeros(ndarray::IxDyn(&[4])));
        let loss = g.mse_mean(sum, target);
        let grads = g.backward(loss);

        let bound: Vec<&str> = b.iter().map(|(n, _)| n).collect();
        assert_eq!(bound, ["w"], "buffers must not bind as trainable");
        let (_, wid) = b.iter().next().unwrap();
        assert!(grads[wid.0].is_some());
    }
}
