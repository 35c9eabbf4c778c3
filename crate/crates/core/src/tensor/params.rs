use super::{Tensor, TensorError, TensorResult};
use crate::scalar::Scalar;
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group. The backbone group is the unfrozen tail of the
/// vision encoder; everything else trains in the head group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
    pub group: ParamGroup,
    /// Whether decoupled weight decay applies (weights yes; norms, biases,
    /// gates, tokens no).
    pub decay: bool,
}

/// Named, ordered parameter collection. Model components hold [`ParamId`]s
/// into a store; two stores with the same layout (online and EMA encoders)
/// can be used interchangeably by the same component.
#[derive(Debug)]
pub struct ParamStore<S> {
    uid: u64,
    params: Vec<Param<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Clone for ParamStore<S> {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            index: self.index.clone(),
        }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, group: ParamGroup, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            requires_grad: true,
            grad: None,
            group,
            decay,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<S>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].requires_grad = trainable;
    }

    pub fn set_group(&mut self, id: ParamId, group: ParamGroup) {
        self.params[id.0].group = group;
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.requires_grad)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Replace the value of a parameter, checking the shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<S>) -> TensorResult<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_value",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// SHA-256 over names, shapes and raw values, in store order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                h.update(x.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Same as [`content_hash`](Self::content_hash) but restricted to `ids`.
    pub fn subset_hash(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for &id in ids {
            for x in self.params[id.0].value.data() {
                h.update(x.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
