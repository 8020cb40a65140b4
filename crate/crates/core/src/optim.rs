//! Parameter storage, seeded initialization, and the Adam update rule.
//!
//! Parameters live in a flat store in registration order; the order is part
//! of the checkpoint format, so registration must be deterministic. All
//! random streams are derived from `(seed, purpose, epoch, batch)` rather
//! than drawn from one shared generator, which keeps every consumer's
//! randomness independent of how often the others draw.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Matrix;

/// Index of a parameter within a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Default, Clone)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: BTreeMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter initialized uniformly in
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn register_uniform(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let value = Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound));
        self.register(name, value)
    }

    /// Registers a zero-initialized parameter (biases).
    pub fn register_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.register(name, Matrix::zeros((rows, cols)))
    }

    pub fn register(&mut self, name: &str, value: Matrix) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter {name} registered twice"
        );
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) {
        assert_eq!(self.values[id.0].dim(), value.dim(), "shape change on set");
        self.values[id.0] = value;
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }
}

/// Builds an independent random stream keyed by seed, purpose string, and
/// two integer coordinates (typically epoch and batch). The same key always
/// yields the same stream on every platform.
pub fn derive_rng(seed: u64, purpose: &str, epoch: u64, batch: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(purpose.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&epoch.to_le_bytes());
    key[24..32].copy_from_slice(&batch.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Scales all gradients in place so their combined L2 norm does not exceed
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let factor = max_norm / total;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * factor);
        }
    }
    total
}

/// Adam with bias correction. Moment buffers are aligned with the store's
/// registration order and are part of the checkpoint state.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, store: &ParameterStore) -> Self {
        let m = (0..store.len())
            .map(|i| Matrix::zeros(store.value(ParamId(i)).dim()))
            .collect();
        let v = (0..store.len())
            .map(|i| Matrix::zeros(store.value(ParamId(i)).dim()))
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m,
            v,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads` must be aligned with the store; entries
    /// are consumed as-is (clip beforehand if desired).
    pub fn step(&mut self, store: &mut ParameterStore, grads: &[Matrix]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grads.len() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let w = store.value_mut(ParamId(i));
            for ((w, &m), &v) in w.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers and step count, for checkpointing.
    pub fn state(&self) -> (&[Matrix], &[Matrix], u64) {
        (&self.m, &self.v, self.t)
    }

    /// Restores moment buffers and step count from a checkpoint.
    pub fn restore(&mut self, m: Vec<Matrix>, v: Vec<Matrix>, t: u64) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "moment count mismatch");
        self.m = m;
        self.v = v;
        self.t = t;
    }
}
