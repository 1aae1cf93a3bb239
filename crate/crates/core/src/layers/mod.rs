//! Parameter-owning building blocks. Each layer registers its tensors in a
//! [`ParamStore`] under a dotted prefix at construction and runs inside a
//! [`Session`].

mod asap;
mod attention;
mod gnn;
mod pointnet;

pub use asap::{asap_pool, asap_unpool, unpool_matrix, AsapPool, Pooled};
pub use attention::{global_aggregate, relu_linear_attention, Aggregate, AttentionKind, InducingSource, Isab, Mab, Pma};
pub use gnn::{GnnKind, GnnLayer, MessageGraph};
pub use pointnet::{pointnet_forward, PointNet, PointNetVariant};

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tensor::{Op, ParamGroup, ParamId, ParamStore, Session, Tensor, Var};

/// Uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
pub(crate) fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f32).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect())
}

/// Standard normal scaled by `1/sqrt(cols)`.
pub(crate) fn normal_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let s = 1.0 / (cols.max(1) as f32).sqrt();
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal) * s).collect(),
    )
}

/// Broadcasts a `1 x d` row to `n x d`.
pub fn repeat_row(s: &mut Session, row: Var, n: usize) -> Result<Var> {
    s.tape.gather(row, Arc::new(vec![0; n]))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = store.register(format!("{name}.w"), uniform_init(d_in, d_out, d_in, rng), group)?;
        let b = store.register(format!("{name}.b"), Tensor::zeros(1, d_out), group)?;
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w, b) = (s.param(self.w), s.param(self.b));
        s.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, group: ParamGroup) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(1, d, 1.0), group)?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros(1, d), group)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        s.tape.layer_norm(x, g, b)
    }
}

/// Batch normalization over the events of one sample. Training uses batch
/// statistics and updates running estimates with momentum 0.1; evaluation
/// uses the running estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.register(format!("{name}.gamma"), Tensor::full(1, d, 1.0), ParamGroup::Default)?,
            beta: store.register(format!("{name}.beta"), Tensor::zeros(1, d), ParamGroup::Default)?,
            running_mean: store.register_buffer(format!("{name}.running_mean"), Tensor::zeros(1, d))?,
            running_var: store.register_buffer(format!("{name}.running_var"), Tensor::full(1, d, 1.0))?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        if s.is_train() {
            let out = s.tape.forward_op(Op::BatchNorm { eps: self.eps, running: None }, &[x, g, b])?;
            let n = s.value(x).rows();
            let (mean, var) = crate::tensor::column_moments(s.value(x));
            let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let m = self.momentum as f64;
            let store = s.store_mut();
            for (r, v) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&mean) {
                *r = ((1.0 - m) * *r as f64 + m * v) as f32;
            }
            for (r, v) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&var) {
                *r = ((1.0 - m) * *r as f64 + m * v * unbias) as f32;
            }
            Ok(out)
        } else {
            let running = Arc::new((
                s.store().get(self.running_mean).data().to_vec(),
                s.store().get(self.running_var).data().to_vec(),
            ));
            s.tape.forward_op(
                Op::BatchNorm {
                    eps: self.eps,
                    running: Some(running),
                },
                &[x, g, b],
            )
        }
    }
}

/// Inverted dropout; identity in evaluation mode.
pub fn dropout(s: &mut Session, x: Var, p: f32) -> Result<Var> {
    if !s.is_train() || p <= 0.0 {
        return Ok(x);
    }
    let n = s.value(x).len();
    let keep = 1.0 - p;
    let rng = s.rng();
    let mask: Vec<f32> = (0..n).map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 }).collect();
    s.tape.forward_op(Op::Dropout { mask: Some(Arc::new(mask)) }, &[x])
}

/// Row-wise feed-forward: linear, GELU, linear.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(FeedForward {
            l1: Linear::new(store, &format!("{name}.l1"), d, d, ParamGroup::Default, rng)?,
            l2: Linear::new(store, &format!("{name}.l2"), d, d, ParamGroup::Default, rng)?,
        })
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.l1.forward(s, x)?;
        let h = s.tape.gelu(h)?;
        self.l2.forward(s, h)
    }
}

/// Stack of linear, GELU, batch-norm layers.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub layers: Vec<(Linear, BatchNorm)>,
}

impl MlpBlock {
    /// `dims = [d_in, h1, h2, ...]` gives `dims.len() - 1` layers.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Ok((
                    Linear::new(store, &format!("{name}.{i}.lin"), w[0], w[1], ParamGroup::Default, rng)?,
                    BatchNorm::new(store, &format!("{name}.{i}.bn"), w[1])?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(MlpBlock { layers })
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |(l, _)| l.d_out)
    }

    pub fn forward(&self, s: &mut Session, mut x: Var) -> Result<Var> {
        for (lin, bn) in &self.layers {
            x = lin.forward(s, x)?;
            x = s.tape.gelu(x)?;
            x = bn.forward(s, x)?;
        }
        Ok(x)
    }
}

/// Functional form of [`MlpBlock::forward`].
pub fn mlp_block(s: &mut Session, x: Var, block: &MlpBlock) -> Result<Var> {
    block.forward(s, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_init_bounds() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Linear::new(&mut store, "l", 16, 4, ParamGroup::Default, &mut rng).unwrap();
        assert!(store.get(l.w).data().iter().all(|v| v.abs() <= 0.25));
        assert!(store.get(l.b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_updates_running_stats_in_train_only() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::from_vec(2, 2, vec![1.0, 0.0, 3.0, 0.0]);
        {
            let mut s = Session::new(&mut store, false, 0);
            let v = s.input(x.clone());
            bn.forward(&mut s, v).unwrap();
        }
        assert_eq!(store.get(bn.running_mean).data(), &[0.0, 0.0]);
        {
            let mut s = Session::new(&mut store, true, 0);
            let v = s.input(x);
            bn.forward(&mut s, v).unwrap();
        }
        assert!((store.get(bn.running_mean).data()[0] - 0.2).abs() < 1e-6);
        // Unbiased batch variance of [1, 3] is 2.
        assert!((store.get(bn.running_var).data()[0] - (0.9 + 0.2)).abs() < 1e-6);
    }

    #[test]
    fn mlp_duplicates_stay_duplicates_in_eval() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = MlpBlock::new(&mut store, "mlp", &[3, 32, 32, 32, 32], &mut rng).unwrap();
        let x = Tensor::from_vec(3, 3, vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3, -1.0, 2.0, 0.5]);
        let mut s = Session::new(&mut store, false, 0);
        let v = s.input(x);
        let y = mlp_block(&mut s, v, &block).unwrap();
        let y = s.value(y);
        assert_eq!(y.row(0), y.row(1));
        assert_eq!(block.layers.len(), 4);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut store = ParamStore::new();
        let mut s = Session::new(&mut store, false, 0);
        let x = s.input(Tensor::full(4, 4, 2.0));
        let y = dropout(&mut s, x, 0.5).unwrap();
        assert_eq!(s.value(y), &Tensor::full(4, 4, 2.0));
    }
}
