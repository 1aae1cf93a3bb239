//! Randomized gradient checks over every tape op kind and every layer.
//!
//! Each [`Case`] draws a small instance (op dims at most 8; layer inputs at
//! most 16 rows of width at most 8) from a seed and compares tape gradients
//! with central differences. Instances landing within `eps` of a kink or a
//! discrete switch (ReLU at 0, max ties, FPS or top-k changes) are redrawn,
//! up to a fixed number of times.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::knn_graph;
use crate::layers::{
    asap_pool, asap_unpool, dropout, global_aggregate, relu_linear_attention, Aggregate, AsapPool, AttentionKind,
    BatchNorm, FeedForward, GnnKind, GnnLayer, Isab, LayerNorm, Linear, Mab, MessageGraph, MlpBlock, Pma, PointNet,
    PointNetVariant,
};
use crate::seed::derive_seed;
use crate::tensor::gradcheck::{check_inputs, check_module, Cotangent, GradCheckReport};
use crate::tensor::{Op, OpKind, ParamGroup, ParamStore, Session, Tensor};

pub const TOLERANCE: f64 = 1e-3;
pub const INSTANCES: usize = 20;
/// Draws per instance before a kink-affected result is accepted as is.
pub const MAX_DRAWS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseKind {
    Op,
    Layer,
}

/// One randomized check; `run(seed, eps)` builds an instance and checks it.
#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    pub kind: CaseKind,
    pub eps: f32,
    pub run: fn(u64, f32) -> Result<GradCheckReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub kind: CaseKind,
    pub instances: usize,
    pub redrawn: usize,
    pub max_rel_error: f64,
    /// Input or parameter holding the worst coordinate.
    pub worst: String,
    pub passed: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub instances: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            instances: INSTANCES,
            tolerance: TOLERANCE,
            seed: 0,
        }
    }
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a, so per-case seeds do not depend on list order.
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn run_case(case: &Case, cfg: &SuiteConfig) -> CaseResult {
    let mut out = CaseResult {
        name: case.name.to_string(),
        kind: case.kind,
        instances: 0,
        redrawn: 0,
        max_rel_error: 0.0,
        worst: String::new(),
        passed: true,
        error: None,
    };
    let base = derive_seed(cfg.seed, name_stream(case.name));
    for i in 0..cfg.instances {
        for draw in 0..MAX_DRAWS {
            let seed = derive_seed(base, (i * MAX_DRAWS + draw) as u64);
            match (case.run)(seed, case.eps) {
                Ok(rep) if rep.kinks > 0 && draw + 1 < MAX_DRAWS => out.redrawn += 1,
                Ok(rep) => {
                    out.instances += 1;
                    if rep.max_rel_error > out.max_rel_error || out.worst.is_empty() {
                        out.max_rel_error = rep.max_rel_error;
                        out.worst = format!("{}[{}]", rep.worst, rep.worst_index);
                    }
                    break;
                }
                Err(e) => {
                    out.passed = false;
                    out.error = Some(e.to_string());
                    return out;
                }
            }
        }
    }
    out.passed = out.max_rel_error <= cfg.tolerance;
    out
}

pub fn run_suite(cases: &[Case], cfg: &SuiteConfig) -> Vec<CaseResult> {
    cases.iter().map(|c| run_case(c, cfg)).collect()
}

pub fn suite_table(results: &[CaseResult]) -> String {
    let mut out = format!(
        "{:<24} {:<6} {:>9} {:>8} {:>12}  {:<6} {}\n",
        "case", "kind", "instances", "redrawn", "max rel err", "status", "worst"
    );
    for r in results {
        let status = if r.passed { "ok" } else { "FAIL" };
        let kind = match r.kind {
            CaseKind::Op => "op",
            CaseKind::Layer => "layer",
        };
        let worst = r.error.as_deref().unwrap_or(&r.worst);
        out.push_str(&format!(
            "{:<24} {:<6} {:>9} {:>8} {:>12.3e}  {:<6} {}\n",
            r.name, kind, r.instances, r.redrawn, r.max_rel_error, status, worst
        ));
    }
    out
}

pub fn all_cases() -> Vec<Case> {
    let mut v = op_cases();
    v.extend(layer_cases());
    v
}

// Instance helpers.

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dim(g: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    g.gen_range(lo..=hi)
}

fn uniform(g: &mut ChaCha8Rng, r: usize, c: usize, bound: f32) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| g.gen_range(-bound..=bound)).collect())
}

/// Uniform in `[-2, 2]` with `|x| >= 0.01`.
fn away_from_zero(g: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c)
        .map(|_| loop {
            let x: f32 = g.gen_range(-2.0..=2.0);
            if x.abs() >= 1e-2 {
                break x;
            }
        })
        .collect();
    Tensor::from_vec(r, c, data)
}

/// Entries pairwise at least 0.06 apart, so maxima are never near a tie.
fn well_separated(g: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let mut rank: Vec<usize> = (0..r * c).collect();
    rank.shuffle(g);
    let half = (r * c) as f32 * 0.05;
    let data = rank
        .iter()
        .map(|&k| k as f32 * 0.1 - half + g.gen_range(-0.02..=0.02))
        .collect();
    Tensor::from_vec(r, c, data)
}

/// Rows (axis 1) or columns (axis 0) with variance at least `min_var`.
fn spread(g: &mut ChaCha8Rng, r: usize, c: usize, axis: usize, min_var: f64) -> Tensor {
    loop {
        let t = uniform(g, r, c, 2.0);
        let lines: Vec<Vec<f64>> = if axis == 1 {
            (0..r).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
        } else {
            (0..c).map(|j| (0..r).map(|i| t.get(i, j) as f64).collect()).collect()
        };
        let ok = lines.iter().all(|l| {
            let m = l.iter().sum::<f64>() / l.len() as f64;
            l.iter().map(|v| (v - m).powi(2)).sum::<f64>() / l.len() as f64 >= min_var
        });
        if ok {
            return t;
        }
    }
}

fn cot(seed: u64) -> Cotangent {
    Cotangent::Random(derive_seed(seed, 0xc07))
}

fn heads_for(g: &mut ChaCha8Rng, d: usize) -> usize {
    let options: Vec<usize> = [1, 2, 4].into_iter().filter(|h| d.is_multiple_of(*h)).collect();
    *options.choose(g).expect("1 divides d")
}

// Op cases.

fn op(kind: OpKind, run: fn(u64, f32) -> Result<GradCheckReport>) -> Case {
    Case {
        name: kind.name(),
        kind: CaseKind::Op,
        eps: 1e-3,
        run,
    }
}

pub fn op_cases() -> Vec<Case> {
    vec![
        op(OpKind::MatMul, op_matmul),
        op(OpKind::Add, |s, e| op_elementwise(s, e, 0)),
        op(OpKind::Sub, |s, e| op_elementwise(s, e, 1)),
        op(OpKind::Mul, |s, e| op_elementwise(s, e, 2)),
        op(OpKind::Concat, op_concat),
        op(OpKind::ReduceSum, |s, e| op_reduce(s, e, 0)),
        op(OpKind::ReduceMean, |s, e| op_reduce(s, e, 1)),
        op(OpKind::ReduceMax, |s, e| op_reduce(s, e, 2)),
        op(OpKind::Sum, op_sum),
        op(OpKind::Softmax, op_softmax),
        op(OpKind::Relu, op_relu),
        op(OpKind::Gelu, |s, e| op_smooth_unary(s, e, false)),
        op(OpKind::Sigmoid, |s, e| op_smooth_unary(s, e, true)),
        op(OpKind::LeakyRelu, op_leaky_relu),
        op(OpKind::LayerNorm, op_layer_norm),
        op(OpKind::BatchNorm, op_batch_norm),
        op(OpKind::Dropout, op_dropout),
        op(OpKind::Linear, op_linear),
        op(OpKind::Gather, op_gather),
        op(OpKind::ScatterSum, op_scatter_sum),
        op(OpKind::SegmentSoftmax, op_segment_softmax),
        op(OpKind::Transpose, op_transpose),
        op(OpKind::Scale, op_scale),
        op(OpKind::Attention, |s, e| op_attention(s, e, false)),
        op(OpKind::LinearAttention, |s, e| op_attention(s, e, true)),
        op(OpKind::BceWithLogits, op_bce),
    ]
}

fn op_matmul(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (r, k, c) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8), dim(&mut g, 1, 8));
    let a = uniform(&mut g, r, k, 2.0);
    let b = uniform(&mut g, k, c, 2.0);
    check_inputs(|t, v| t.matmul(v[0], v[1]), &[a, b], eps, cot(seed))
}

fn op_elementwise(seed: u64, eps: f32, which: u8) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (r, c) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8));
    let a = uniform(&mut g, r, c, 2.0);
    let (br, bc) = *[(r, c), (1, c), (r, 1), (1, 1)].choose(&mut g).expect("non-empty");
    let b = uniform(&mut g, br, bc, 2.0);
    check_inputs(
        |t, v| match which {
            0 => t.add(v[0], v[1]),
            1 => t.sub(v[0], v[1]),
            _ => t.mul(v[0], v[1]),
        },
        &[a, b],
        eps,
        cot(seed),
    )
}

fn op_concat(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let axis = g.gen_range(0..2);
    let fixed = dim(&mut g, 1, 8);
    let parts: Vec<Tensor> = (0..dim(&mut g, 2, 3))
        .map(|_| {
            let free = dim(&mut g, 1, 4);
            if axis == 0 {
                uniform(&mut g, free, fixed, 2.0)
            } else {
                uniform(&mut g, fixed, free, 2.0)
            }
        })
        .collect();
    check_inputs(|t, v| t.concat(v, axis), &parts, eps, cot(seed))
}

fn op_reduce(seed: u64, eps: f32, which: u8) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (r, c) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8));
    let axis = g.gen_range(0..2);
    let x = if which == 2 { well_separated(&mut g, r, c) } else { uniform(&mut g, r, c, 2.0) };
    check_inputs(
        |t, v| match which {
            0 => t.reduce_sum(v[0], axis),
            1 => t.reduce_mean(v[0], axis),
            _ => t.reduce_max(v[0], axis),
        },
        &[x],
        eps,
        cot(seed),
    )
}

fn op_sum(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let x = { let (r, c) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8)); uniform(&mut g, r, c, 2.0) };
    check_inputs(|t, v| t.sum(v[0]), &[x], eps, cot(seed))
}

fn op_softmax(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let axis = g.gen_range(0..2);
    let x = { let (r, c) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8)); uniform(&mut g, r, c, 3.0) };
    check_inputs(|t, v| t.softmax(v[0], axis), &[x], eps, cot(seed))
}

fn op_relu(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let x = { let (r, c) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8)); away_from_zero(&mut g, r, c) };
    check_inputs(|t, v| t.relu(v[0]), &[x], eps, cot(seed))
}

fn op_leaky_relu(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let slope = g.gen_range(0.01..0.5);
    let x = { let (r, c) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8)); away_from_zero(&mut g, r, c) };
    check_inputs(|t, v| t.leaky_relu(v[0], slope), &[x], eps, cot(seed))
}

fn op_smooth_unary(seed: u64, eps: f32, sigmoid: bool) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let x = { let (r, c) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8)); uniform(&mut g, r, c, 3.0) };
    check_inputs(
        |t, v| if sigmoid { t.sigmoid(v[0]) } else { t.gelu(v[0]) },
        &[x],
        eps,
        cot(seed),
    )
}

fn op_layer_norm(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (r, c) = (dim(&mut g, 1, 8), dim(&mut g, 2, 8));
    let x = spread(&mut g, r, c, 1, 0.1);
    let gamma = uniform(&mut g, 1, c, 2.0);
    let beta = uniform(&mut g, 1, c, 2.0);
    check_inputs(|t, v| t.layer_norm(v[0], v[1], v[2]), &[x, gamma, beta], eps, cot(seed))
}

fn op_batch_norm(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (r, c) = (dim(&mut g, 2, 8), dim(&mut g, 1, 8));
    let batch_stats = g.gen_bool(0.5);
    let x = spread(&mut g, r, c, 0, 0.1);
    let gamma = uniform(&mut g, 1, c, 2.0);
    let beta = uniform(&mut g, 1, c, 2.0);
    let running = (!batch_stats).then(|| {
        let mean = (0..c).map(|_| g.gen_range(-1.0..1.0)).collect();
        let var = (0..c).map(|_| g.gen_range(0.2..2.0)).collect();
        Arc::new((mean, var))
    });
    let op = Op::BatchNorm { eps: 1e-5, running };
    check_inputs(|t, v| t.forward_op(op.clone(), v), &[x, gamma, beta], eps, cot(seed))
}

fn op_dropout(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (r, c) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8));
    let x = uniform(&mut g, r, c, 2.0);
    let keep = 0.8f32;
    let mask: Vec<f32> = (0..r * c).map(|_| if g.gen::<f32>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let op = Op::Dropout { mask: Some(Arc::new(mask)) };
    check_inputs(|t, v| t.forward_op(op.clone(), v), &[x], eps, cot(seed))
}

fn op_linear(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (r, k, c) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8), dim(&mut g, 1, 8));
    let x = uniform(&mut g, r, k, 2.0);
    let w = uniform(&mut g, k, c, 1.0);
    let b = uniform(&mut g, 1, c, 1.0);
    check_inputs(|t, v| t.linear(v[0], v[1], v[2]), &[x, w, b], eps, cot(seed))
}

fn op_gather(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (r, c) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8));
    let index: Vec<usize> = (0..dim(&mut g, 1, 8)).map(|_| g.gen_range(0..r)).collect();
    let x = uniform(&mut g, r, c, 2.0);
    let index = Arc::new(index);
    check_inputs(|t, v| t.gather(v[0], index.clone()), &[x], eps, cot(seed))
}

fn op_scatter_sum(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (r, c, size) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8), dim(&mut g, 1, 8));
    let index = Arc::new((0..r).map(|_| g.gen_range(0..size)).collect::<Vec<_>>());
    let x = uniform(&mut g, r, c, 2.0);
    check_inputs(|t, v| t.scatter_sum(v[0], index.clone(), size), &[x], eps, cot(seed))
}

fn op_segment_softmax(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (r, c, size) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8), dim(&mut g, 1, 4));
    let index = Arc::new((0..r).map(|_| g.gen_range(0..size)).collect::<Vec<_>>());
    let x = uniform(&mut g, r, c, 3.0);
    check_inputs(|t, v| t.segment_softmax(v[0], index.clone(), size), &[x], eps, cot(seed))
}

fn op_transpose(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let x = { let (r, c) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8)); uniform(&mut g, r, c, 2.0) };
    check_inputs(|t, v| t.transpose(v[0]), &[x], eps, cot(seed))
}

fn op_scale(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let factor = g.gen_range(-2.0..2.0);
    let x = { let (r, c) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8)); uniform(&mut g, r, c, 2.0) };
    check_inputs(|t, v| t.scale(v[0], factor), &[x], eps, cot(seed))
}

fn op_attention(seed: u64, eps: f32, linear: bool) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let heads = dim(&mut g, 1, 2);
    let (dk, dv) = (heads * dim(&mut g, 1, 4), heads * dim(&mut g, 1, 4));
    let (nq, nk) = (dim(&mut g, 1, 8), dim(&mut g, 1, 8));
    let (q, k) = if linear {
        (away_from_zero(&mut g, nq, dk), away_from_zero(&mut g, nk, dk))
    } else {
        (uniform(&mut g, nq, dk, 2.0), uniform(&mut g, nk, dk, 2.0))
    };
    let v = uniform(&mut g, nk, dv, 2.0);
    check_inputs(
        |t, x| {
            if linear {
                t.linear_attention(x[0], x[1], x[2], heads)
            } else {
                t.attention(x[0], x[1], x[2], heads)
            }
        },
        &[q, k, v],
        eps,
        cot(seed),
    )
}

fn op_bce(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let n = dim(&mut g, 1, 8);
    let z = uniform(&mut g, n, 1, 3.0);
    let targets = Arc::new((0..n).map(|_| g.gen_range(0.0..=1.0)).collect::<Vec<f32>>());
    check_inputs(|t, v| t.bce_with_logits(v[0], targets.clone()), &[z], eps, cot(seed))
}

// Layer cases.

fn layer(name: &'static str, run: fn(u64, f32) -> Result<GradCheckReport>) -> Case {
    Case {
        name,
        kind: CaseKind::Layer,
        eps: 1e-3,
        run,
    }
}

pub fn layer_cases() -> Vec<Case> {
    vec![
        layer("linear_layer", l_linear),
        layer("layer_norm_layer", l_layer_norm),
        layer("batch_norm_layer", l_batch_norm),
        layer("dropout_layer", l_dropout),
        layer("feed_forward", l_feed_forward),
        layer("mlp_block", l_mlp_block),
        layer("mab_softmax", |s, e| l_mab(s, e, AttentionKind::Softmax)),
        layer("mab_relu_linear", |s, e| l_mab(s, e, AttentionKind::ReluLinear)),
        layer("mab_no_attention", |s, e| l_mab(s, e, AttentionKind::NoAttention)),
        layer("relu_linear_attention", l_relu_linear_attention),
        layer("isab_learned", l_isab_learned),
        layer("isab_fps", l_isab_fps),
        layer("pma", l_pma),
        layer("aggregate_mean", |s, e| l_aggregate(s, e, false)),
        layer("aggregate_max", |s, e| l_aggregate(s, e, true)),
        layer("gcn", |s, e| l_gnn(s, e, GnnKind::Gcn, false)),
        layer("gat", |s, e| l_gnn(s, e, GnnKind::Gat, false)),
        layer("gat_attention_dropout", |s, e| l_gnn(s, e, GnnKind::Gat, true)),
        layer("gin", |s, e| l_gnn(s, e, GnnKind::Gin, false)),
        layer("asap_pool", l_asap_pool),
        layer("asap_unpool", l_asap_unpool),
        layer("pointnet", l_pointnet),
    ]
}

/// A set of `n in [lo, 16]` rows of width `d in [2, 8]`.
fn set_input(g: &mut ChaCha8Rng, lo: usize) -> (Tensor, usize) {
    let n = dim(g, lo, 16);
    let d = dim(g, 2, 8);
    (uniform(g, n, d, 1.5), d)
}

fn l_linear(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (x, d) = set_input(&mut g, 1);
    let mut store = ParamStore::new();
    let l = Linear::new(&mut store, "lin", d, dim(&mut g, 1, 8), ParamGroup::Default, &mut g)?;
    check_module(&mut store, &[x], eps, cot(seed), false, |s, v| l.forward(s, v[0]))
}

fn l_layer_norm(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (n, d) = (dim(&mut g, 1, 16), dim(&mut g, 2, 8));
    let x = spread(&mut g, n, d, 1, 0.1);
    let mut store = ParamStore::new();
    let l = LayerNorm::new(&mut store, "ln", d, ParamGroup::Default)?;
    randomize(&mut store, &mut g);
    check_module(&mut store, &[x], eps, cot(seed), false, |s, v| l.forward(s, v[0]))
}

fn l_batch_norm(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (x, d) = set_input(&mut g, 2);
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", d)?;
    randomize(&mut store, &mut g);
    check_module(&mut store, &[x], eps, cot(seed), false, |s, v| bn.forward(s, v[0]))
}

fn l_dropout(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (x, _) = set_input(&mut g, 1);
    let mut store = ParamStore::new();
    // Train mode: the mask comes from the session stream, fixed per check.
    check_module(&mut store, &[x], eps, cot(seed), true, |s, v| dropout(s, v[0], 0.3))
}

fn l_feed_forward(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (x, d) = set_input(&mut g, 1);
    let mut store = ParamStore::new();
    let ff = FeedForward::new(&mut store, "ff", d, &mut g)?;
    check_module(&mut store, &[x], eps, cot(seed), false, |s, v| ff.forward(s, v[0]))
}

fn l_mlp_block(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (x, d) = set_input(&mut g, 1);
    let mut store = ParamStore::new();
    let dims = [d, dim(&mut g, 1, 8), dim(&mut g, 1, 8)];
    let block = MlpBlock::new(&mut store, "mlp", &dims, &mut g)?;
    randomize(&mut store, &mut g);
    check_module(&mut store, &[x], eps, cot(seed), false, |s, v| block.forward(s, v[0]))
}

fn l_mab(seed: u64, eps: f32, kind: AttentionKind) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (x, d) = set_input(&mut g, 1);
    let y = { let n = dim(&mut g, 1, 16); uniform(&mut g, n, d, 1.5) };
    let heads = heads_for(&mut g, d);
    let mut store = ParamStore::new();
    let mab = Mab::new(&mut store, "mab", d, heads, kind, &mut g)?;
    let inputs = if kind == AttentionKind::NoAttention { vec![x] } else { vec![x, y] };
    check_module(&mut store, &inputs, eps, cot(seed), false, |s, v| {
        let other = if v.len() > 1 { v[1] } else { v[0] };
        mab.forward(s, v[0], other)
    })
}

fn l_relu_linear_attention(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (n, d) = (dim(&mut g, 1, 16), dim(&mut g, 1, 8));
    let q = away_from_zero(&mut g, n, d);
    let k = away_from_zero(&mut g, n, d);
    let v = uniform(&mut g, n, d, 2.0);
    check_inputs(|t, x| relu_linear_attention(t, x[0], x[1], x[2]), &[q, k, v], eps, cot(seed))
}

fn l_isab_learned(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (x, d) = set_input(&mut g, 1);
    let heads = heads_for(&mut g, d);
    let mut store = ParamStore::new();
    let isab = Isab::learned(&mut store, "isab", d, heads, dim(&mut g, 1, 4), AttentionKind::Softmax, &mut g)?;
    check_module(&mut store, &[x], eps, cot(seed), false, |s, v| isab.forward(s, v[0]))
}

fn l_isab_fps(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (x, d) = set_input(&mut g, 2);
    let heads = heads_for(&mut g, d);
    let mut store = ParamStore::new();
    let isab = Isab::fps(&mut store, "isab", d, heads, 0.25, 2, &mut g)?;
    check_module(&mut store, &[x], eps, cot(seed), false, |s, v| isab.forward(s, v[0]))
}

fn l_pma(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (x, d) = set_input(&mut g, 1);
    let mut store = ParamStore::new();
    let pma = Pma::new(&mut store, "pma", d, &mut g)?;
    check_module(&mut store, &[x], eps, cot(seed), false, |s, v| pma.forward(s, v[0]))
}

fn l_aggregate(seed: u64, eps: f32, max: bool) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (n, d) = (dim(&mut g, 1, 16), dim(&mut g, 2, 8));
    let x = if max { well_separated(&mut g, n, d) } else { uniform(&mut g, n, d, 1.5) };
    let mode = if max { Aggregate::Max } else { Aggregate::Mean };
    let mut store = ParamStore::new();
    check_module(&mut store, &[x], eps, cot(seed), false, |s, v| global_aggregate(s, v[0], &mode))
}

fn random_graph(g: &mut ChaCha8Rng, x: &Tensor) -> Result<MessageGraph> {
    let k = dim(g, 1, 3).min(x.rows() - 1);
    Ok(MessageGraph::from_knn(&knn_graph(x, k)?))
}

fn l_gnn(seed: u64, eps: f32, kind: GnnKind, train: bool) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (x, d) = set_input(&mut g, 4);
    let graph = random_graph(&mut g, &x)?;
    let mut store = ParamStore::new();
    let gnn = GnnLayer::new(&mut store, "gnn", kind, d, dim(&mut g, 1, 8), 0.2, &mut g)?;
    randomize(&mut store, &mut g);
    check_module(&mut store, &[x], eps, cot(seed), train, |s, v| gnn.forward(s, v[0], &graph))
}

fn l_asap_pool(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (x, d) = set_input(&mut g, 4);
    let graph = random_graph(&mut g, &x)?;
    let target = dim(&mut g, 1, x.rows() - 1);
    let mut store = ParamStore::new();
    let pool = AsapPool::new(&mut store, "asap", d, ParamGroup::Default, &mut g)?;
    check_module(&mut store, &[x], eps, cot(seed), false, |s, v| {
        Ok(asap_pool(s, v[0], &graph, target, &pool)?.x)
    })
}

fn l_asap_unpool(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (x, d) = set_input(&mut g, 4);
    let graph = random_graph(&mut g, &x)?;
    let target = dim(&mut g, 1, x.rows() - 1);
    let mut store = ParamStore::new();
    let pool = AsapPool::new(&mut store, "asap", d, ParamGroup::Default, &mut g)?;
    let assignment = {
        let mut s = Session::new(&mut store, false, 0);
        let xv = s.input(x.clone());
        asap_pool(&mut s, xv, &graph, target, &pool)?.assignment
    };
    let pooled = uniform(&mut g, target, d, 1.5);
    let mut empty = ParamStore::new();
    check_module(&mut empty, &[pooled], eps, cot(seed), false, |s, v| {
        asap_unpool(s, v[0], std::slice::from_ref(&assignment), &x)
    })
}

fn l_pointnet(seed: u64, eps: f32) -> Result<GradCheckReport> {
    let mut g = rng(seed);
    let (x, d) = set_input(&mut g, 2);
    let mut store = ParamStore::new();
    let local = [d, dim(&mut g, 1, 8), dim(&mut g, 1, 8)];
    let variant = if g.gen_bool(0.5) { PointNetVariant::Standard } else { PointNetVariant::Adapted };
    let net = PointNet::with_widths(&mut store, "pn", &local, dim(&mut g, 1, 8), &[dim(&mut g, 1, 8)], variant, &mut g)?;
    randomize(&mut store, &mut g);
    check_module(&mut store, &[x], eps, cot(seed), false, |s, v| net.forward(s, v[0]))
}

/// Moves every parameter and buffer off its constant initial value so that
/// norm scales, shifts and running statistics are exercised. Buffers whose
/// name ends in `var` stay positive.
fn randomize(store: &mut ParamStore, g: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let positive = store.entry(id).name.ends_with("var");
        for v in store.get_mut(id).data_mut() {
            *v = if positive { g.gen_range(0.5..2.0) } else { *v + g.gen_range(-0.5..0.5) };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_kind_has_a_case() {
        let names: Vec<&str> = op_cases().iter().map(|c| c.name).collect();
        for k in OpKind::ALL {
            assert!(names.contains(&k.name()), "no case for {}", k.name());
        }
        assert_eq!(names.len(), OpKind::ALL.len());
    }

    #[test]
    fn case_names_are_unique() {
        let mut names: Vec<&str> = all_cases().iter().map(|c| c.name).collect();
        names.sort_unstable();
        let n = names.len();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn broken_gradient_fails_and_is_named() {
        // x * detach(x) has true gradient 2x but the tape reports x.
        fn broken(seed: u64, eps: f32) -> Result<GradCheckReport> {
            let x = uniform(&mut rng(seed), 3, 3, 2.0);
            check_inputs(
                |t, v| {
                    let d = t.detach(v[0]);
                    t.mul(v[0], d)
                },
                &[x],
                eps,
                Cotangent::Ones,
            )
        }
        let case = Case {
            name: "broken",
            kind: CaseKind::Layer,
            eps: 1e-3,
            run: broken,
        };
        let r = run_case(&case, &SuiteConfig::default());
        assert!(!r.passed);
        assert!(suite_table(&[r]).contains("broken"));
    }

    #[test]
    fn relu_at_zero_is_flagged_as_kink() {
        let x = Tensor::from_vec(1, 2, vec![0.0, 1.0]);
        let r = check_inputs(|t, v| t.relu(v[0]), &[x], 1e-3, Cotangent::Ones).unwrap();
        assert_eq!(r.kinks, 1);
        let smooth = check_inputs(|t, v| t.gelu(v[0]), &[Tensor::from_vec(1, 2, vec![0.0, 1.0])], 1e-3, Cotangent::Ones).unwrap();
        assert_eq!(smooth.kinks, 0);
    }
}
