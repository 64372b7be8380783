//! Named parameter storage, seeded initialization, and the Adam optimizer.
//!
//! Every trainable (or frozen) tensor lives in a [`ParamSet`] under a
//! hierarchical name like `pyramid_rgb/l2/attn_wq`. Initialization derives a
//! per-tensor RNG seed from the master seed and the name, so values do not
//! depend on creation order. Groups are addressed by name prefix.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};

/// FNV-1a 64-bit hash; also the tokenizer's stable hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derive a child seed from a master seed and a text tag.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut bytes = master.to_le_bytes().to_vec();
    bytes.extend_from_slice(tag.as_bytes());
    fnv1a64(&bytes)
}

/// Standard normal sample via Box-Muller (keeps rand_distr out of the deps).
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Seeded Gaussian matrix, reproducible from `(seed, tag)` alone.
pub fn gaussian_matrix(seed: u64, tag: &str, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
    Array2::from_shape_fn((rows, cols), |_| standard_normal(&mut rng) * std)
}

/// An ordered map of named tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.entries.insert(name.into(), value);
    }

    /// Insert a Gaussian-initialized tensor seeded by `(seed, name)`.
    pub fn init_gaussian(&mut self, seed: u64, name: &str, rows: usize, cols: usize, std: f64) {
        self.insert(name, gaussian_matrix(seed, name, rows, cols, std));
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn init_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.insert(name, Array2::from_elem((rows, cols), value));
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    /// Merge another set into this one, overwriting on name collision.
    pub fn extend(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }

    /// FNV-1a checksum over names and raw little-endian f64 bytes. Used to
    /// assert bit-exact freezing of parameter groups.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, value) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            mix(name.as_bytes());
            for v in value.iter() {
                mix(&v.to_le_bytes());
            }
        }
        hash
    }
}

/// Leaf bindings of parameters into a [`Graph`], by name.
#[derive(Debug, Default)]
pub struct Bindings {
    map: BTreeMap<String, NodeId>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bind a parameter as a graph leaf, reusing the node on repeat calls.
    pub fn bind(&mut self, g: &mut Graph, params: &ParamSet, name: &str) -> NodeId {
        if let Some(&id) = self.map.get(name) {
            return id;
        }
        let id = g.leaf(params.get(name).clone());
        self.map.insert(name.to_string(), id);
        id
    }

    pub fn node(&self, name: &str) -> Option<NodeId> {
        self.map.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.map.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Adam with bias correction; state is kept per parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Apply one update to every parameter with a gradient in `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Array2<f64>>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let value = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.raw_dim()));
            azip_update(value, grad, m, v, self.beta1, self.beta2, self.eps, lr, bc1, bc2);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    value: &mut Array2<f64>,
    grad: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for (((val, &g), m), v) in value
        .iter_mut()
        .zip(grad.iter())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *val -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
