//! Message passing layers: GCN, GAT (one head) and GIN.
//!
//! For a k-NN edge `src -> dst` (`dst` is a neighbor of `src`), `src`
//! receives a message from `dst`.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::{dropout, uniform_init, Linear};
use crate::error::{Error, Result};
use crate::geometry::KnnGraph;
use crate::tensor::{ParamGroup, ParamId, ParamStore, Session, Tensor, Var};

/// Directed message edges: `receivers[e]` aggregates from `senders[e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageGraph {
    pub n_nodes: usize,
    pub receivers: Arc<Vec<usize>>,
    pub senders: Arc<Vec<usize>>,
}

impl MessageGraph {
    pub fn new(n_nodes: usize, receivers: Vec<usize>, senders: Vec<usize>) -> Result<Self> {
        if receivers.len() != senders.len() {
            return Err(Error::InvalidArgument("receiver and sender lists differ in length".into()));
        }
        if let Some(&bad) = receivers.iter().chain(&senders).find(|&&v| v >= n_nodes) {
            return Err(Error::InvalidArgument(format!("node index {bad} out of range for {n_nodes} nodes")));
        }
        Ok(MessageGraph {
            n_nodes,
            receivers: Arc::new(receivers),
            senders: Arc::new(senders),
        })
    }

    pub fn from_knn(g: &KnnGraph) -> Self {
        let (receivers, senders) = g.edges().unzip();
        MessageGraph {
            n_nodes: g.n_nodes(),
            receivers: Arc::new(receivers),
            senders: Arc::new(senders),
        }
    }

    /// Both directions of every undirected pair.
    pub fn from_undirected(n_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut r = Vec::with_capacity(2 * pairs.len());
        let mut s = Vec::with_capacity(2 * pairs.len());
        for &(a, b) in pairs {
            r.extend([a, b]);
            s.extend([b, a]);
        }
        Self::new(n_nodes, r, s)
    }

    pub fn n_edges(&self) -> usize {
        self.receivers.len()
    }

    /// Adds one `i <- i` edge per node.
    pub fn with_self_loops(&self) -> Self {
        let mut r = (*self.receivers).clone();
        let mut s = (*self.senders).clone();
        r.extend(0..self.n_nodes);
        s.extend(0..self.n_nodes);
        MessageGraph {
            n_nodes: self.n_nodes,
            receivers: Arc::new(r),
            senders: Arc::new(s),
        }
    }

    /// Incoming edge count per node.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_nodes];
        for &r in self.receivers.iter() {
            d[r] += 1;
        }
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GnnKind {
    Gcn,
    Gat,
    Gin,
}

#[derive(Clone, Debug)]
pub enum GnnLayer {
    /// `D^-1/2 (A + I) D^-1/2 X W + b`, degrees are row sums of `A + I`.
    Gcn { lin: Linear },
    /// Single-head attention over in-neighbors and self.
    Gat {
        w: ParamId,
        att_recv: ParamId,
        att_send: ParamId,
        bias: ParamId,
        slope: f32,
        attn_dropout: f32,
    },
    /// `MLP((1 + eps) x_i + sum_j x_j)` with a two-layer MLP.
    Gin { eps: ParamId, l1: Linear, l2: Linear },
}

impl GnnLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: GnnKind,
        d_in: usize,
        d_out: usize,
        attn_dropout: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match kind {
            GnnKind::Gcn => GnnLayer::Gcn {
                lin: Linear::new(store, &format!("{name}.lin"), d_in, d_out, ParamGroup::Default, rng)?,
            },
            GnnKind::Gat => {
                let g = ParamGroup::Gat;
                GnnLayer::Gat {
                    w: store.register(format!("{name}.w"), uniform_init(d_in, d_out, d_in, rng), g)?,
                    att_recv: store.register(format!("{name}.att_recv"), uniform_init(d_out, 1, d_out, rng), g)?,
                    att_send: store.register(format!("{name}.att_send"), uniform_init(d_out, 1, d_out, rng), g)?,
                    bias: store.register(format!("{name}.bias"), Tensor::zeros(1, d_out), g)?,
                    slope: 0.2,
                    attn_dropout,
                }
            }
            GnnKind::Gin => GnnLayer::Gin {
                eps: store.register(format!("{name}.eps"), Tensor::zeros(1, 1), ParamGroup::Default)?,
                l1: Linear::new(store, &format!("{name}.l1"), d_in, d_out, ParamGroup::Default, rng)?,
                l2: Linear::new(store, &format!("{name}.l2"), d_out, d_out, ParamGroup::Default, rng)?,
            },
        })
    }

    pub fn kind(&self) -> GnnKind {
        match self {
            GnnLayer::Gcn { .. } => GnnKind::Gcn,
            GnnLayer::Gat { .. } => GnnKind::Gat,
            GnnLayer::Gin { .. } => GnnKind::Gin,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, graph: &MessageGraph) -> Result<Var> {
        let n = s.value(x).rows();
        if graph.n_nodes != n {
            return Err(Error::shape(
                "gnn_layer",
                format!("graph has {} nodes, features have {n} rows", graph.n_nodes),
            ));
        }
        match self {
            GnnLayer::Gcn { lin } => {
                let g = graph.with_self_loops();
                let deg = g.in_degrees();
                let coef: Vec<f32> = g
                    .receivers
                    .iter()
                    .zip(g.senders.iter())
                    .map(|(&r, &sd)| (1.0 / ((deg[r] * deg[sd]) as f64).sqrt()) as f32)
                    .collect();
                let coef = s.input(Tensor::column(coef));
                let w = s.param(lin.w);
                let xw = s.tape.matmul(x, w)?;
                let msg = s.tape.gather(xw, g.senders.clone())?;
                let msg = s.tape.mul(msg, coef)?;
                let agg = s.tape.scatter_sum(msg, g.receivers.clone(), n)?;
                let b = s.param(lin.b);
                s.tape.add(agg, b)
            }
            GnnLayer::Gat {
                w,
                att_recv,
                att_send,
                bias,
                slope,
                attn_dropout,
            } => {
                let g = graph.with_self_loops();
                let w = s.param(*w);
                let z = s.tape.matmul(x, w)?;
                let alpha = gat_alpha(s, z, &g, *att_recv, *att_send, *slope)?;
                let alpha = dropout(s, alpha, *attn_dropout)?;
                let msg = s.tape.gather(z, g.senders.clone())?;
                let msg = s.tape.mul(msg, alpha)?;
                let agg = s.tape.scatter_sum(msg, g.receivers.clone(), n)?;
                let b = s.param(*bias);
                s.tape.add(agg, b)
            }
            GnnLayer::Gin { eps, l1, l2 } => {
                let e = s.param(*eps);
                let scaled = s.tape.mul(x, e)?;
                let own = s.tape.add(x, scaled)?;
                let msg = s.tape.gather(x, graph.senders.clone())?;
                let agg = s.tape.scatter_sum(msg, graph.receivers.clone(), n)?;
                let h = s.tape.add(own, agg)?;
                let h = l1.forward(s, h)?;
                let h = s.tape.gelu(h)?;
                l2.forward(s, h)
            }
        }
    }

    /// Per-edge attention coefficients of a GAT layer over `graph` with self loops.
    pub fn gat_coefficients(&self, s: &mut Session, x: Var, graph: &MessageGraph) -> Result<Option<(MessageGraph, Tensor)>> {
        let GnnLayer::Gat { w, att_recv, att_send, slope, .. } = self else {
            return Ok(None);
        };
        let g = graph.with_self_loops();
        let w = s.param(*w);
        let z = s.tape.matmul(x, w)?;
        let alpha = gat_alpha(s, z, &g, *att_recv, *att_send, *slope)?;
        let a = s.value(alpha).clone();
        Ok(Some((g, a)))
    }
}

/// `softmax_j LeakyReLU(a_r . z_i + a_s . z_j)` over each receiver's edges.
fn gat_alpha(s: &mut Session, z: Var, g: &MessageGraph, att_recv: ParamId, att_send: ParamId, slope: f32) -> Result<Var> {
    let (ar, asd) = (s.param(att_recv), s.param(att_send));
    let sr = s.tape.matmul(z, ar)?;
    let ss = s.tape.matmul(z, asd)?;
    let er = s.tape.gather(sr, g.receivers.clone())?;
    let es = s.tape.gather(ss, g.senders.clone())?;
    let e = s.tape.add(er, es)?;
    let e = s.tape.leaky_relu(e, slope)?;
    s.tape.segment_softmax(e, g.receivers.clone(), g.n_nodes)
}
