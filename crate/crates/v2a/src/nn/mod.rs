//! Minimal neural-network toolkit: a named parameter store, seeded RNG
//! streams, layers with hand-written backward passes, and an AdamW optimizer.
//!
//! Everything runs in f64 so gradients can be checked against central finite
//! differences without precision games.

pub mod conv;
pub mod layers;
pub mod optim;

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Tensor = ArrayD<f64>;

/// Ordered name -> tensor map holding every learnable parameter of a model.
///
/// Insertion order is deterministic, which makes checksums, checkpoints and
/// optimizer traversal reproducible.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: IndexMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), value).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::RegistryInconsistency(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::RegistryInconsistency(format!("unknown parameter {name}")))
    }

    /// View a parameter as a matrix. Panics on rank mismatch, which is a bug.
    pub fn mat(&self, name: &str) -> Array2<f64> {
        self.entries[name]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap_or_else(|_| panic!("parameter {name} is not rank 2"))
            .to_owned()
    }

    pub fn vec1(&self, name: &str) -> Array1<f64> {
        self.entries[name]
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap_or_else(|_| panic!("parameter {name} is not rank 1"))
            .to_owned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn num_scalars_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// SHA-256 over the little-endian bytes of one parameter tensor.
    pub fn checksum(&self, name: &str) -> Result<[u8; 32]> {
        let t = self.get(name)?;
        Ok(hash_tensor(name, t))
    }

    /// Combined SHA-256 over all parameters whose name satisfies `pred`,
    /// in registry order.
    pub fn checksum_matching(&self, pred: impl Fn(&str) -> bool) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, t) in &self.entries {
            if pred(name) {
                hasher.update(hash_tensor(name, t));
            }
        }
        hasher.finalize().into()
    }
}

fn hash_tensor(name: &str, t: &Tensor) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(name.as_bytes());
    for d in t.shape() {
        hasher.update((*d as u64).to_le_bytes());
    }
    for v in t.iter() {
        hasher.update(v.to_le_bytes());
    }
    hasher.finalize().into()
}

/// Gradient accumulator mirroring a [`Params`] registry.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    entries: IndexMap<String, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulate a contribution for `name`, allocating zeros on first touch.
    pub fn add(&mut self, name: &str, delta: &Tensor) {
        match self.entries.get_mut(name) {
            Some(g) => *g += delta,
            None => {
                self.entries.insert(name.to_string(), delta.clone());
            }
        }
    }

    pub fn add2(&mut self, name: &str, delta: Array2<f64>) {
        self.add(name, &delta.into_dyn());
    }

    pub fn add1(&mut self, name: &str, delta: Array1<f64>) {
        self.add(name, &delta.into_dyn());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.entries.values_mut() {
            *g *= factor;
        }
    }

    /// Global L2 norm over every accumulated gradient.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// A named, reproducible ChaCha stream derived from a master seed.
///
/// Separate labels give statistically independent streams, and the cursor
/// position can be saved and restored for bit-exact training resume.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    seed: [u8; 32],
}

impl RngStream {
    pub fn new(master_seed: u64, label: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(master_seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        Self { rng: ChaCha8Rng::from_seed(seed), seed }
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal_mat(&mut self, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || self.rng.sample(StandardNormal))
    }

    pub fn normal_vec(&mut self, len: usize) -> Array1<f64> {
        Array1::from_shape_simple_fn(len, || self.rng.sample(StandardNormal))
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn uniform_usize(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Fisher-Yates shuffle of indices 0..n.
    pub fn shuffled_indices(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }

    pub fn state(&self) -> ([u8; 32], u128) {
        (self.seed, self.rng.get_word_pos())
    }

    pub fn restore(seed: [u8; 32], word_pos: u128) -> Self {
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(word_pos);
        Self { rng, seed }
    }
}

/// Returns an error naming `context` if any entry is non-finite.
pub fn check_finite(values: &Array2<f64>, context: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFailure(format!("non-finite values in {context}")))
    }
}
