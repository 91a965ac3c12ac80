//! Named parameter storage shared by every model in the crate.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named matrices. Entries marked non-trainable are
/// buffers (running statistics) or frozen weights; the optimizer skips them.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a matrix under `name`. Re-registering a name replaces its value.
    pub fn insert(&mut self, name: &str, value: Mat, trainable: bool) -> ParamId {
        if let Some(&id) = self.index.get(name) {
            self.values[id.0] = value;
            self.trainable[id.0] = trainable;
            return id;
        }
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(trainable);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Like [`ParamStore::id`] but panics on a missing name; model code only
    /// looks up names it registered itself.
    pub fn expect(&self, name: &str) -> ParamId {
        match self.id(name) {
            Some(id) => id,
            None => panic!("parameter {name:?} is not registered"),
        }
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Copies every entry of `other` whose name and shape match an entry here.
    /// Returns the names that were copied.
    pub fn copy_matching(&mut self, other: &ParamStore) -> Vec<String> {
        let mut copied = Vec::new();
        for (name, value) in other.iter() {
            if let Some(id) = self.id(name) {
                if self.values[id.0].dim() == value.dim() {
                    self.values[id.0].assign(value);
                    copied.push(name.to_string());
                }
            }
        }
        copied
    }
}

/// 64-bit FNV-1a, used to derive per-parameter RNG streams from names.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// RNG dedicated to one named parameter, so adding parameters never shifts
/// the initialization of existing ones.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

/// Uniform in ±1/sqrt(fan_in).
pub fn fan_in_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    uniform(rows, cols, bound, rng)
}
