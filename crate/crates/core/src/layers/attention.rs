//! Multi-head attention blocks, induced set attention and pooling by attention.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{normal_init, FeedForward, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::geometry::{fps_from, fps_target};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Session, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Scaled dot-product softmax attention.
    Softmax,
    /// ReLU-kernel linear attention.
    ReluLinear,
    /// `(X Wq + X Wk + X Wv) Wo`: no mixing across events.
    NoAttention,
}

/// `H = LN(X + MH(X, Y, Y))`, output `LN(H + rFF(H))`.
#[derive(Clone, Debug)]
pub struct Mab {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
    pub heads: usize,
    pub kind: AttentionKind,
    pub d: usize,
}

impl Mab {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        kind: AttentionKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("hidden dim {d} not divisible by {heads} heads")));
        }
        let g = ParamGroup::Default;
        Ok(Mab {
            wq: Linear::new(store, &format!("{name}.wq"), d, d, g, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), d, d, g, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), d, d, g, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), d, d, g, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, g)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, g)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d, rng)?,
            heads,
            kind,
            d,
        })
    }

    fn check(&self, s: &Session, v: Var, what: &str) -> Result<()> {
        let c = s.value(v).cols();
        if c != self.d {
            return Err(Error::shape("mab", format!("{what} has width {c}, block expects {}", self.d)));
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session, x: Var, y: Var) -> Result<Var> {
        self.check(s, x, "query set")?;
        self.check(s, y, "key set")?;
        let q = self.wq.forward(s, x)?;
        let mixed = match self.kind {
            AttentionKind::Softmax => {
                let k = self.wk.forward(s, y)?;
                let v = self.wv.forward(s, y)?;
                s.tape.attention(q, k, v, self.heads)?
            }
            AttentionKind::ReluLinear => {
                let k = self.wk.forward(s, y)?;
                let v = self.wv.forward(s, y)?;
                s.tape.linear_attention(q, k, v, self.heads)?
            }
            AttentionKind::NoAttention => {
                let k = self.wk.forward(s, x)?;
                let v = self.wv.forward(s, x)?;
                let qk = s.tape.add(q, k)?;
                s.tape.add(qk, v)?
            }
        };
        let o = self.wo.forward(s, mixed)?;
        let h = s.tape.add(x, o)?;
        let h = self.ln1.forward(s, h)?;
        let f = self.ff.forward(s, h)?;
        let h2 = s.tape.add(h, f)?;
        self.ln2.forward(s, h2)
    }
}

/// Where an ISAB takes its inducing points from.
#[derive(Clone, Debug)]
pub enum InducingSource {
    /// Trainable `m x d` matrix.
    Learned { points: ParamId, m: usize },
    /// Rows of the layer input chosen by farthest point sampling on every pass.
    FpsSampled { ratio: f64, min_count: usize },
}

/// `ISAB(X) = MAB(X, H)` with `H = MAB(I, X)`.
#[derive(Clone, Debug)]
pub struct Isab {
    pub mab1: Mab,
    pub mab2: Mab,
    pub inducing: InducingSource,
}

impl Isab {
    pub fn learned(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        m: usize,
        kind: AttentionKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("ISAB needs at least one inducing point".into()));
        }
        let points = store.register(format!("{name}.inducing"), normal_init(m, d, rng), ParamGroup::Default)?;
        Ok(Isab {
            mab1: Mab::new(store, &format!("{name}.mab1"), d, heads, kind, rng)?,
            mab2: Mab::new(store, &format!("{name}.mab2"), d, heads, kind, rng)?,
            inducing: InducingSource::Learned { points, m },
        })
    }

    pub fn fps(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ratio: f64,
        min_count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Config(format!("fps ratio must be in (0, 1], got {ratio}")));
        }
        Ok(Isab {
            mab1: Mab::new(store, &format!("{name}.mab1"), d, heads, AttentionKind::Softmax, rng)?,
            mab2: Mab::new(store, &format!("{name}.mab2"), d, heads, AttentionKind::Softmax, rng)?,
            inducing: InducingSource::FpsSampled { ratio, min_count },
        })
    }

    /// Inducing points for input `x`: the learned matrix, or FPS rows of `x`.
    pub fn inducing_points(&self, s: &mut Session, x: Var) -> Result<Var> {
        match &self.inducing {
            InducingSource::Learned { points, .. } => Ok(s.param(*points)),
            InducingSource::FpsSampled { ratio, min_count } => {
                let n = s.value(x).rows();
                if n == 0 {
                    return Err(Error::InvalidArgument("ISAB on an empty set".into()));
                }
                let m = fps_target(n, *ratio, *min_count);
                let first = match s.fps_first() {
                    Some(f) => f.min(n - 1),
                    None => s.rng().gen_range(0..n),
                };
                let idx = fps_from(s.value(x), m, first);
                s.tape.gather(x, Arc::new(idx))
            }
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        if self.mab1.kind == AttentionKind::NoAttention {
            // Without attention the second block ignores H entirely.
            return self.mab2.forward(s, x, x);
        }
        let i = self.inducing_points(s, x)?;
        let h = self.mab1.forward(s, i, x)?;
        self.mab2.forward(s, x, h)
    }
}

/// Pooling by multi-head attention with one seed vector and one head:
/// `MAB(S, rFF(X))`, giving `1 x d`.
#[derive(Clone, Debug)]
pub struct Pma {
    pub seed: ParamId,
    pub ff: FeedForward,
    pub mab: Mab,
}

impl Pma {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Pma {
            seed: store.register(format!("{name}.seed"), normal_init(1, d, rng), ParamGroup::Default)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d, rng)?,
            mab: Mab::new(store, &format!("{name}.mab"), d, 1, AttentionKind::Softmax, rng)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let z = self.ff.forward(s, x)?;
        let seed = s.param(self.seed);
        self.mab.forward(s, seed, z)
    }
}

#[derive(Clone, Debug)]
pub enum Aggregate {
    Mean,
    Max,
    Pma(Box<Pma>),
}

/// Column-wise summary of a set, `1 x d`.
pub fn global_aggregate(s: &mut Session, x: Var, mode: &Aggregate) -> Result<Var> {
    if s.value(x).rows() == 0 {
        return Err(Error::InvalidArgument("aggregate of an empty set".into()));
    }
    match mode {
        Aggregate::Mean => s.tape.reduce_mean(x, 0),
        Aggregate::Max => s.tape.reduce_max(x, 0),
        Aggregate::Pma(p) => p.forward(s, x),
    }
}

/// Single-head ReLU-kernel attention, `phi(Q)[phi(K)^T V] / phi(Q)[phi(K)^T 1]`.
pub fn relu_linear_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    tape.linear_attention(q, k, v, 1)
}
