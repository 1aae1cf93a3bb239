//! The model zoo: declarative configs assembled into per-event classifiers.
//!
//! Every model maps an `n x F` event matrix to `n` logits through a body
//! producing pre-head features and a single linear head.

mod config;

pub use config::{Architecture, Family, ModelConfig, ModelSpec};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::knn_graph;
use crate::layers::{
    asap_pool, asap_unpool, global_aggregate, repeat_row, Aggregate, AsapPool, AttentionKind, GnnKind, GnnLayer,
    Isab, Linear, Mab, MessageGraph, MlpBlock, Pma, PointNet, PointNetVariant,
};
use crate::seed::derive_seed;
use crate::tensor::{checkpoint, ParamGroup, ParamStore, Session, Tensor, Var};

/// Architecture-specific layers between the input and the head.
#[derive(Clone, Debug)]
pub enum Body {
    Mlp {
        block: MlpBlock,
        aggregate: Option<Aggregate>,
    },
    PointNet(PointNet),
    SetTransformer {
        embed: Linear,
        blocks: Vec<Isab>,
    },
    ReluFormer {
        embed: Linear,
        blocks: Vec<Mab>,
    },
    Gnn {
        layers: Vec<GnnLayer>,
    },
    GnnAsap {
        before: Vec<GnnLayer>,
        pool1: AsapPool,
        between: Vec<GnnLayer>,
        pool2: AsapPool,
        targets: [usize; 2],
    },
    GnnStFps {
        gnn: GnnLayer,
        embed: Linear,
        merge: Linear,
        blocks: Vec<Isab>,
    },
}

/// Node features and, for graph models, the message graph built on the
/// full standardized feature space.
pub struct ModelInput {
    pub features: Tensor,
    pub graph: Option<MessageGraph>,
}

/// A built model: its spec, parameters and layers.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub body: Body,
    pub head: Linear,
    /// Indices into `spec.markers` of the node input columns.
    pub input_columns: Vec<usize>,
}

pub const MODEL_FILE: &str = "model.toml";
pub const PARAMS_FILE: &str = "params.ckpt";

pub fn build_model(config: &ModelConfig, in_features: usize) -> Result<Model> {
    let markers: Vec<String> = (0..in_features).map(|i| format!("f{i}")).collect();
    build_from_spec(ModelSpec::new(config.clone(), markers, vec![])?)
}

/// Builds a model for the given canonical marker list, removing `masked`
/// markers from the node inputs.
pub fn build_from_spec(spec: ModelSpec) -> Result<Model> {
    let config = &spec.config;
    config.validate()?;
    let input_columns = spec.input_columns()?;
    let f = input_columns.len();
    if f == 0 {
        return Err(Error::Config("no input features remain after masking".into()));
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x1417));
    let d = config.hidden_dim;
    let heads = config.heads;
    let arch = config.architecture;
    let rng = &mut rng;
    let st = &mut store;

    let gnn_stack = |st: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, kind: GnnKind, d_in: usize, n: usize| {
        (0..n)
            .map(|i| {
                let din = if i == 0 { d_in } else { d };
                GnnLayer::new(st, &format!("{name}.{i}"), kind, din, d, config.gat_attention_dropout, rng)
            })
            .collect::<Result<Vec<_>>>()
    };

    let body = match arch {
        Architecture::Mlp | Architecture::MlpMean | Architecture::MlpMax | Architecture::MlpPma => {
            let dims: Vec<usize> = std::iter::once(f).chain(std::iter::repeat_n(d, config.layers)).collect();
            let block = MlpBlock::new(st, "mlp", &dims, rng)?;
            let aggregate = match arch {
                Architecture::MlpMean => Some(Aggregate::Mean),
                Architecture::MlpMax => Some(Aggregate::Max),
                Architecture::MlpPma => Some(Aggregate::Pma(Box::new(Pma::new(st, "pma", d, rng)?))),
                _ => None,
            };
            Body::Mlp { block, aggregate }
        }
        Architecture::PointNet | Architecture::PointNetAdapted => {
            let variant = if arch == Architecture::PointNet {
                PointNetVariant::Standard
            } else {
                PointNetVariant::Adapted
            };
            Body::PointNet(PointNet::new(st, "pointnet", f, variant, rng)?)
        }
        Architecture::St | Architecture::St150i | Architecture::StNoAtt | Architecture::StFps => {
            let embed = Linear::new(st, "embed", f, d, ParamGroup::Default, rng)?;
            let blocks = (0..config.layers)
                .map(|i| {
                    let name = format!("isab.{i}");
                    match arch {
                        Architecture::StFps => Isab::fps(st, &name, d, heads, config.fps_ratio, config.fps_min_count, rng),
                        Architecture::StNoAtt => {
                            Isab::learned(st, &name, d, heads, config.inducing(), AttentionKind::NoAttention, rng)
                        }
                        _ => Isab::learned(st, &name, d, heads, config.inducing(), AttentionKind::Softmax, rng),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Body::SetTransformer { embed, blocks }
        }
        Architecture::ReluFormer => {
            let embed = Linear::new(st, "embed", f, d, ParamGroup::Default, rng)?;
            let blocks = (0..config.layers)
                .map(|i| Mab::new(st, &format!("mab.{i}"), d, heads, AttentionKind::ReluLinear, rng))
                .collect::<Result<Vec<_>>>()?;
            Body::ReluFormer { embed, blocks }
        }
        Architecture::Gcn
        | Architecture::Gat
        | Architecture::Gin
        | Architecture::Gat3
        | Architecture::Gin3 => Body::Gnn {
            layers: gnn_stack(st, rng, "gnn", arch.gnn_kind().expect("graph architecture"), f, config.layers)?,
        },
        Architecture::GatAsap | Architecture::GinAsap => {
            let kind = arch.gnn_kind().expect("graph architecture");
            let half = config.layers / 2;
            let before = gnn_stack(st, rng, "gnn.a", kind, f, half.max(1))?;
            let group = if kind == GnnKind::Gat { ParamGroup::Gat } else { ParamGroup::Default };
            let pool1 = AsapPool::new(st, "pool.0", d, group, rng)?;
            let between = gnn_stack(st, rng, "gnn.b", kind, d, (config.layers - half).max(1))?;
            let pool2 = AsapPool::new(st, "pool.1", d, group, rng)?;
            Body::GnnAsap {
                before,
                pool1,
                between,
                pool2,
                targets: config.asap_targets,
            }
        }
        Architecture::GatStFps | Architecture::GinStFps => {
            let kind = arch.gnn_kind().expect("graph architecture");
            let gnn = GnnLayer::new(st, "gnn", kind, f, d, config.gat_attention_dropout, rng)?;
            let embed = Linear::new(st, "embed", f, d, ParamGroup::Default, rng)?;
            let merge = Linear::new(st, "merge", 2 * d, d, ParamGroup::Default, rng)?;
            let blocks = (0..config.layers.saturating_sub(1).max(1))
                .map(|i| Isab::fps(st, &format!("isab.{i}"), d, heads, config.fps_ratio, config.fps_min_count, rng))
                .collect::<Result<Vec<_>>>()?;
            Body::GnnStFps {
                gnn,
                embed,
                merge,
                blocks,
            }
        }
    };
    let head_in = match &body {
        Body::Mlp { aggregate: Some(_), .. } => 2 * d,
        Body::PointNet(p) => p.d_out(),
        _ => d,
    };
    let head = Linear::new(st, "head", head_in, 1, ParamGroup::Default, rng)?;
    Ok(Model {
        spec,
        store,
        body,
        head,
        input_columns,
    })
}

impl Model {
    pub fn architecture(&self) -> Architecture {
        self.spec.config.architecture
    }

    pub fn in_features(&self) -> usize {
        self.input_columns.len()
    }

    pub fn needs_graph(&self) -> bool {
        self.architecture().needs_graph()
    }

    pub fn k(&self) -> usize {
        self.spec.config.neighbors()
    }

    /// Message graph over the full standardized feature matrix.
    pub fn build_graph(&self, full_events: &Tensor) -> Result<Option<MessageGraph>> {
        if !self.needs_graph() {
            return Ok(None);
        }
        let k = self.k().min(full_events.rows().saturating_sub(1));
        if k == 0 {
            return Ok(Some(MessageGraph::new(full_events.rows(), vec![], vec![])?));
        }
        Ok(Some(MessageGraph::from_knn(&knn_graph(full_events, k)?)))
    }

    /// Splits standardized canonical events into node features and graph.
    /// A precomputed graph for the same rows may be passed in.
    pub fn prepare(&self, full_events: &Tensor, graph: Option<MessageGraph>) -> Result<ModelInput> {
        if full_events.cols() != self.spec.markers.len() {
            return Err(Error::shape(
                "forward_sample",
                format!("{} feature columns, model expects {}", full_events.cols(), self.spec.markers.len()),
            ));
        }
        let graph = match graph {
            Some(g) if self.needs_graph() => {
                if g.n_nodes != full_events.rows() {
                    return Err(Error::shape("forward_sample", "graph does not match event count"));
                }
                Some(g)
            }
            _ => self.build_graph(full_events)?,
        };
        let features = if self.input_columns.len() == full_events.cols() {
            full_events.clone()
        } else {
            full_events.select_cols(&self.input_columns)
        };
        Ok(ModelInput { features, graph })
    }

    /// Opens a session over this model's parameters.
    pub fn session(&mut self, train: bool, seed: u64) -> (Session<'_>, &Body, &Linear) {
        (Session::new(&mut self.store, train, seed), &self.body, &self.head)
    }

    /// Per-event logits (`n x 1`) for standardized canonical events.
    pub fn predict(&mut self, full_events: &Tensor, graph: Option<MessageGraph>, seed: u64) -> Result<Vec<f32>> {
        let input = self.prepare(full_events, graph)?;
        let (mut s, body, head) = self.session(false, seed);
        s.set_fps_first(Some(0));
        let y = forward(&mut s, body, head, &input)?;
        Ok(s.value(y).data().to_vec())
    }

    /// Pre-head activations in evaluation mode.
    pub fn features(&mut self, full_events: &Tensor, graph: Option<MessageGraph>, seed: u64) -> Result<Tensor> {
        let input = self.prepare(full_events, graph)?;
        let (mut s, body, _) = self.session(false, seed);
        s.set_fps_first(Some(0));
        let y = body.forward(&mut s, &input)?;
        Ok(s.value(y).clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = self.spec.to_toml()?;
        let p = dir.join(MODEL_FILE);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        checkpoint::save(&self.store, &dir.join(PARAMS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let p = dir.join(MODEL_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let spec = ModelSpec::from_toml(&text)?;
        let mut model = build_from_spec(spec)?;
        let stored = checkpoint::load(&dir.join(PARAMS_FILE))?;
        model.store.load_from(&stored)?;
        Ok(model)
    }
}

/// Body followed by the linear head.
pub fn forward(s: &mut Session, body: &Body, head: &Linear, input: &ModelInput) -> Result<Var> {
    let h = body.forward(s, input)?;
    head.forward(s, h)
}

fn gnn_chain(s: &mut Session, layers: &[GnnLayer], mut x: Var, g: &MessageGraph) -> Result<Var> {
    for layer in layers {
        x = layer.forward(s, x, g)?;
        x = s.tape.gelu(x)?;
    }
    Ok(x)
}

impl Body {
    /// Pre-head per-event features.
    pub fn forward(&self, s: &mut Session, input: &ModelInput) -> Result<Var> {
        let n = input.features.rows();
        if n == 0 {
            return Err(Error::InvalidArgument("sample has no events".into()));
        }
        let x = s.input(input.features.clone());
        let graph = || {
            input
                .graph
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("graph architecture called without a graph".into()))
        };
        match self {
            Body::Mlp { block, aggregate } => {
                let h = block.forward(s, x)?;
                match aggregate {
                    None => Ok(h),
                    Some(mode) => {
                        let g = global_aggregate(s, h, mode)?;
                        let g = repeat_row(s, g, n)?;
                        s.tape.concat(&[h, g], 1)
                    }
                }
            }
            Body::PointNet(net) => net.forward(s, x),
            Body::SetTransformer { embed, blocks } => {
                let mut h = embed.forward(s, x)?;
                for b in blocks {
                    h = b.forward(s, h)?;
                }
                Ok(h)
            }
            Body::ReluFormer { embed, blocks } => {
                let mut h = embed.forward(s, x)?;
                for b in blocks {
                    h = b.forward(s, h, h)?;
                }
                Ok(h)
            }
            Body::Gnn { layers } => gnn_chain(s, layers, x, graph()?),
            Body::GnnAsap {
                before,
                pool1,
                between,
                pool2,
                targets,
            } => {
                let h = gnn_chain(s, before, x, graph()?)?;
                let mut assignments = Vec::new();
                let (h, g1) = pool_or_keep(s, h, graph()?, targets[0], pool1, &mut assignments)?;
                let h = gnn_chain(s, between, h, &g1)?;
                let (h, _) = pool_or_keep(s, h, &g1, targets[1], pool2, &mut assignments)?;
                asap_unpool(s, h, &assignments, &input.features)
            }
            Body::GnnStFps {
                gnn,
                embed,
                merge,
                blocks,
            } => {
                let local = gnn.forward(s, x, graph()?)?;
                let local = s.tape.gelu(local)?;
                let e = embed.forward(s, x)?;
                let cat = s.tape.concat(&[local, e], 1)?;
                let mut h = merge.forward(s, cat)?;
                for b in blocks {
                    h = b.forward(s, h)?;
                }
                Ok(h)
            }
        }
    }
}

/// Pools to `min(target, n - 1)` clusters; with nothing to pool the layer is
/// skipped and contributes an identity assignment.
fn pool_or_keep(
    s: &mut Session,
    x: Var,
    g: &MessageGraph,
    target: usize,
    pool: &AsapPool,
    assignments: &mut Vec<Tensor>,
) -> Result<(Var, MessageGraph)> {
    let n = s.value(x).rows();
    let t = target.min(n.saturating_sub(1));
    if t == 0 {
        assignments.push(Tensor::eye(n));
        return Ok((x, g.clone()));
    }
    let p = asap_pool(s, x, g, t, pool)?;
    assignments.push(p.assignment);
    Ok((p.x, p.graph))
}

/// Marker indices of `masked` within `markers`.
pub fn marker_positions(markers: &[String], masked: &[String]) -> Result<Vec<usize>> {
    masked
        .iter()
        .map(|m| {
            markers.iter().position(|x| x == m).ok_or_else(|| Error::MissingMarker {
                sample: "model input".into(),
                marker: m.clone(),
            })
        })
        .collect()
}
