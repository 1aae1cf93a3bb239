use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer grouping. GAT parameters carry their own weight decay.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    #[default]
    Default,
    Gat,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

/// Named parameter tensors, addressed by hierarchical dotted names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, entry: ParamEntry) -> Result<ParamId> {
        if self.by_name.contains_key(&entry.name) {
            return Err(Error::Config(format!("parameter `{}` registered twice", entry.name)));
        }
        let id = self.entries.len();
        self.by_name.insert(entry.name.clone(), id);
        self.entries.push(entry);
        Ok(ParamId(id))
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> Result<ParamId> {
        self.insert(ParamEntry {
            name: name.into(),
            value,
            group,
            trainable: true,
        })
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        self.insert(ParamEntry {
            name: name.into(),
            value,
            group: ParamGroup::Default,
            trainable: false,
        })
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Replaces every value with the same-named value from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .find(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", e.name)))?;
            let v = other.get(src);
            if v.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{}` has shape {:?}, checkpoint holds {:?}",
                    e.name,
                    e.value.shape(),
                    v.shape()
                )));
            }
            e.value = v.clone();
        }
        Ok(())
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for e in &self.entries {
            feed(e.name.as_bytes());
            for d in e.value.shape() {
                feed(&(*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Per-parameter gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn new(store: &ParamStore) -> Self {
        ParamGrads {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Adds `scale * other` into `self`.
    pub fn accumulate(&mut self, other: &ParamGrads, scale: f32) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            let Some(src) = src else { continue };
            match dst {
                Some(d) => {
                    for (a, b) in d.data_mut().iter_mut().zip(src.data()) {
                        *a += scale * b;
                    }
                }
                None => *dst = Some(src.map(|v| v * scale)),
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// One forward/backward pass: owns the tape, binds parameters lazily, and
/// carries the train/eval flag and the pass's random stream.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s mut ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
    rng: ChaCha8Rng,
    fps_first: Option<usize>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s mut ParamStore, train: bool, seed: u64) -> Self {
        let n = store.len();
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            fps_first: None,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Pins the first farthest-point pick of every FPS call in this pass.
    pub fn set_fps_first(&mut self, index: Option<usize>) {
        self.fps_first = index;
    }

    pub fn fps_first(&self) -> Option<usize> {
        self.fps_first
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    /// Tape handle for a parameter; trainable entries require gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = &self.store.entries[id.0];
        let v = self.tape.leaf(e.value.clone(), e.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Backward from `loss`, returning gradients for every bound trainable parameter.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads> {
        let mut g = self.tape.backward(loss)?;
        Ok(self.param_grads_from(&mut g))
    }

    /// Moves gradients of bound trainable parameters out of `g`.
    pub fn param_grads_from(&self, g: &mut Gradients) -> ParamGrads {
        let mut out = ParamGrads::new(self.store);
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if self.store.entries[i].trainable {
                    out.grads[i] = Some(g.take(*v).unwrap_or_else(|| {
                        let (r, c) = self.store.entries[i].value.dims();
                        Tensor::zeros(r, c)
                    }));
                }
            }
        }
        out
    }
}
