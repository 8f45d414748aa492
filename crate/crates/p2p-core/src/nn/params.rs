//! Named parameter storage.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Index of a parameter array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A flat store of named f64 parameter arrays.
///
/// Names are hierarchical ("decoder.block0.ca.wq") and stable across runs;
/// checkpoints are keyed by them.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        debug_assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Zero-filled gradient slots aligned with this store.
    pub fn zero_grads(&self) -> Vec<Option<ArrayD<f64>>> {
        vec![None; self.values.len()]
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Normal(0, std) initialization.
pub fn normal_init(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data")
}

/// Xavier/Glorot normal initialization for a (fan_in, fan_out) pair.
pub fn xavier_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal_init(rng, shape, std)
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}

/// Uniform(-a, a) initialization (unused by default; kept for experiments).
#[allow(dead_code)]
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-a..a)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches data")
}
