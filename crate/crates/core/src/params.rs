//! Named trainable parameters.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::tape::ParamId;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of named parameter tensors. A parameter's position is
/// its [`ParamId`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id_of(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(Param { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for p in &self.entries {
            hasher.update(p.name.as_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                hasher.update(x.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// How a declared parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform on `[-limit, limit]`.
    Uniform(f64),
    /// Fused LSTM gate bias `[i | f | o | g]`: forget block 1, rest 0.
    LstmBias { hidden: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Declares parameters ahead of instantiation so models can hold their
/// [`ParamId`]s while the values live in a separate [`ParamStore`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn declare(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter name {name}"
        );
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        ParamId(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn scalar_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Draws initial values in declaration order.
    pub fn instantiate<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        for spec in &self.specs {
            let value = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Uniform(limit) => uniform(rng, &spec.shape, limit),
                Init::LstmBias { hidden } => {
                    let mut t = Tensor::zeros(&spec.shape);
                    t.data_mut()[hidden..2 * hidden].fill(1.0);
                    t
                }
            };
            store.add(spec.name.clone(), value);
        }
        store
    }

    /// Whether `store` holds exactly the declared names and shapes.
    pub fn matches(&self, store: &ParamStore) -> bool {
        store.len() == self.specs.len()
            && self
                .specs
                .iter()
                .zip(store.iter())
                .all(|(s, (_, p))| s.name == p.name && s.shape == p.value.shape())
    }
}

/// Tensor with entries drawn uniformly from `[-limit, limit]`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], limit: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for x in t.data_mut() {
        *x = rng.gen_range(-limit..=limit);
    }
    t
}
