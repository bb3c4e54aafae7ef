//! Named parameter storage shared by all trainable modules.

use super::Arr;
use std::collections::HashMap;

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

}

/// Flat, insertion-ordered store of named tensors. Modules register their
/// parameters at construction time and keep the returned ids; the insertion
/// order is deterministic for a given configuration, which makes checkpoints
/// and resumed runs reproducible.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Arr) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "parameter shape change for {}",
            self.names[id.0]
        );
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Apply `update` in place to the parameter at `id`.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut Arr)) {
        f(&mut self.values[id.0]);
    }
}

/// Registers a module's parameters under a common name prefix, collecting the
/// ids for optimizer partitioning.
pub struct Registrar<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut rand_chacha::ChaCha8Rng,
    prefix: String,
    ids: Vec<ParamId>,
}

impl<'a> Registrar<'a> {
    pub fn new(
        store: &'a mut ParamStore,
        rng: &'a mut rand_chacha::ChaCha8Rng,
        prefix: impl Into<String>,
    ) -> Self {
        Registrar {
            store,
            rng,
            prefix: prefix.into(),
            ids: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, value: Arr) -> ParamId {
        let id = self.store.add(format!("{}/{}", self.prefix, name), value);
        self.ids.push(id);
        id
    }

    /// Gaussian init with the given standard deviation.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        use rand_distr::Distribution;
        let dist = rand_distr::Normal::new(0.0, std).expect("std must be finite");
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(self.rng)).collect();
        self.push(name, Arr::from_shape_vec(ndarray::IxDyn(shape), data).unwrap())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.push(name, Arr::from_elem(ndarray::IxDyn(shape), value))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.constant(name, shape, 0.0)
    }

    pub fn finish(self) -> Vec<ParamId> {
        self.ids
    }
}
