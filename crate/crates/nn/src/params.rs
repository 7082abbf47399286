//! Named parameter storage.
//!
//! Every trainable tensor and every running-statistics buffer of a network
//! lives in one [`ParamStore`], addressed by a stable dotted name
//! (`encoder.0.conv1.weight`). Entries keep insertion order so that
//! serialization and hashing are reproducible.

use std::collections::{BTreeSet, HashMap};

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::NnError;

/// Index of a parameter inside its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Whether an entry is optimized by gradient descent or only tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Weight,
    /// Running statistics and similar state; never receives gradients.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub role: Role,
    pub frozen: bool,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.role == Role::Weight && !self.frozen
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f32),
    /// Zero-mean normal with the given standard deviation.
    Normal(f32),
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl ParamStore {
    /// Empty store; `seed` keys the per-parameter initialization streams.
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Register a new entry. The random stream used for initialization is
    /// derived from `(seed, name)` so that values do not depend on the
    /// order in which layers are built.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, role: Role) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let value = match init {
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::Ones => ArrayD::ones(IxDyn(shape)),
            Init::Constant(c) => ArrayD::from_elem(IxDyn(shape), c),
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, name));
                let normal = Normal::new(0.0f32, std).expect("valid std");
                let n: usize = shape.iter().product();
                let data: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches")
            }
        };
        self.insert(Param {
            name: name.to_string(),
            value,
            role,
            frozen: false,
        })
    }

    /// Insert a fully formed entry (used when loading checkpoints or
    /// embedding one network inside another).
    pub fn insert(&mut self, param: Param) -> ParamId {
        assert!(
            !self.index.contains_key(&param.name),
            "duplicate parameter name {}",
            param.name
        );
        let id = ParamId(self.entries.len());
        self.index.insert(param.name.clone(), id.0);
        self.entries.push(param);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Result<&Param, NnError> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f32> {
        &self.entries[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Overwrite a value, checking the shape.
    pub fn set_value(&mut self, name: &str, value: ArrayD<f32>) -> Result<(), NnError> {
        let id = self
            .id(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        let p = &mut self.entries[id.0];
        if p.value.shape() != value.shape() {
            return Err(NnError::Shape(format!(
                "{name}: expected {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Mark every entry whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in self.entries.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = true;
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.entries {
            p.frozen = true;
        }
    }

    pub fn frozen_names(&self) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter(|p| p.frozen)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Number of scalars in weights that the optimizer may update.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Number of scalars in all weights, frozen or not (buffers excluded).
    pub fn weight_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.role == Role::Weight)
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over name, shape and little-endian payload of every entry
    /// whose name starts with `prefix`, in name order. Buffers are included.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut selected: Vec<&Param> = self
            .entries
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .collect();
        selected.sort_by(|a, b| a.name.cmp(&b.name));
        let mut hasher = Sha256::new();
        for p in selected {
            hasher.update(p.name.as_bytes());
            hasher.update([0u8]);
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in p.value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn content_hash(&self) -> String {
        self.hash_prefix("")
    }

    /// Copy values of every entry present in both stores under the same
    /// name and shape. Returns the number of entries copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in &mut self.entries {
            if let Some(src) = other.id(&p.name).map(|id| other.get(id)) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// SplitMix64 finalizer; used to derive independent seeds from a base seed.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a named sub-stream of `seed`.
pub fn stream_seed(seed: u64, name: &str) -> u64 {
    let mut h = mix64(seed);
    for b in name.bytes() {
        h = mix64(h ^ b as u64);
    }
    h
}
