use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use super::kernels::{axpy, dot, matmul, matmul_nt, matmul_tn, phi_cdf, phi_pdf, sigmoid};
use super::{stats, Tensor};
use crate::error::{Error, Result};

/// A differentiable operation together with its attributes.
///
/// `Add`, `Sub` and `Mul` broadcast their second operand when it is `1 x c`,
/// `r x 1` or `1 x 1`.
#[derive(Clone, Debug)]
pub enum Op {
    MatMul,
    Add,
    Sub,
    Mul,
    Concat { axis: usize },
    ReduceSum { axis: usize },
    ReduceMean { axis: usize },
    ReduceMax { axis: usize },
    /// Sum of all elements to `1 x 1`.
    Sum,
    Softmax { axis: usize },
    Relu,
    Gelu,
    Sigmoid,
    LeakyRelu { slope: f32 },
    /// Inputs `[x, gamma, beta]`, normalized over each row.
    LayerNorm { eps: f32 },
    /// Inputs `[x, gamma, beta]`, normalized over each column. `running` holds
    /// `(mean, var)` in eval mode; `None` uses batch statistics.
    BatchNorm {
        eps: f32,
        running: Option<Arc<(Vec<f32>, Vec<f32>)>>,
    },
    /// Multiplies by a precomputed keep mask already scaled by `1 / keep`.
    /// `None` is the eval-mode identity.
    Dropout { mask: Option<Arc<Vec<f32>>> },
    /// Inputs `[x, w, b]`: `x @ w + b`.
    Linear,
    Gather { index: Arc<Vec<usize>> },
    ScatterSum { index: Arc<Vec<usize>>, size: usize },
    /// Softmax over the rows sharing a segment id, independently per column.
    SegmentSoftmax { index: Arc<Vec<usize>>, size: usize },
    Transpose,
    Scale { factor: f32 },
    /// Inputs `[q, k, v]`: scaled dot-product softmax attention with `heads`
    /// heads splitting the columns evenly.
    Attention { heads: usize },
    /// Inputs `[q, k, v]`: ReLU-kernel attention evaluated as
    /// `relu(Q) (relu(K)^T V) / relu(Q) (relu(K)^T 1)`.
    LinearAttention { heads: usize, floor: f32 },
    /// Mean binary cross-entropy of logits against soft targets.
    BceWithLogits { targets: Arc<Vec<f32>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Concat,
    ReduceSum,
    ReduceMean,
    ReduceMax,
    Sum,
    Softmax,
    Relu,
    Gelu,
    Sigmoid,
    LeakyRelu,
    LayerNorm,
    BatchNorm,
    Dropout,
    Linear,
    Gather,
    ScatterSum,
    SegmentSoftmax,
    Transpose,
    Scale,
    Attention,
    LinearAttention,
    BceWithLogits,
}

impl OpKind {
    pub const ALL: [OpKind; 26] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Concat,
        OpKind::ReduceSum,
        OpKind::ReduceMean,
        OpKind::ReduceMax,
        OpKind::Sum,
        OpKind::Softmax,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::LeakyRelu,
        OpKind::LayerNorm,
        OpKind::BatchNorm,
        OpKind::Dropout,
        OpKind::Linear,
        OpKind::Gather,
        OpKind::ScatterSum,
        OpKind::SegmentSoftmax,
        OpKind::Transpose,
        OpKind::Scale,
        OpKind::Attention,
        OpKind::LinearAttention,
        OpKind::BceWithLogits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Concat => "concat",
            OpKind::ReduceSum => "reduce_sum",
            OpKind::ReduceMean => "reduce_mean",
            OpKind::ReduceMax => "reduce_max",
            OpKind::Sum => "sum",
            OpKind::Softmax => "softmax",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::LayerNorm => "layernorm",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Dropout => "dropout",
            OpKind::Linear => "linear",
            OpKind::Gather => "gather",
            OpKind::ScatterSum => "scatter_sum",
            OpKind::SegmentSoftmax => "segment_softmax",
            OpKind::Transpose => "transpose",
            OpKind::Scale => "scale",
            OpKind::Attention => "attention",
            OpKind::LinearAttention => "linear_attention",
            OpKind::BceWithLogits => "bce_with_logits",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::MatMul => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Concat { .. } => OpKind::Concat,
            Op::ReduceSum { .. } => OpKind::ReduceSum,
            Op::ReduceMean { .. } => OpKind::ReduceMean,
            Op::ReduceMax { .. } => OpKind::ReduceMax,
            Op::Sum => OpKind::Sum,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Relu => OpKind::Relu,
            Op::Gelu => OpKind::Gelu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Linear => OpKind::Linear,
            Op::Gather { .. } => OpKind::Gather,
            Op::ScatterSum { .. } => OpKind::ScatterSum,
            Op::SegmentSoftmax { .. } => OpKind::SegmentSoftmax,
            Op::Transpose => OpKind::Transpose,
            Op::Scale { .. } => OpKind::Scale,
            Op::Attention { .. } => OpKind::Attention,
            Op::LinearAttention { .. } => OpKind::LinearAttention,
            Op::BceWithLogits { .. } => OpKind::BceWithLogits,
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Concat { .. } => None,
            Op::MatMul | Op::Add | Op::Sub | Op::Mul => Some(2),
            Op::LayerNorm { .. }
            | Op::BatchNorm { .. }
            | Op::Linear
            | Op::Attention { .. }
            | Op::LinearAttention { .. } => Some(3),
            _ => Some(1),
        }
    }
}

/// Forward-pass state kept for the backward pass.
#[derive(Debug, Default)]
pub(crate) enum Saved {
    #[default]
    None,
    Argmax(Vec<usize>),
    Norm { xhat: Vec<f32>, rstd: Vec<f32> },
    Probs(Vec<f32>),
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Same);
    }
    let (r, c) = a.dims();
    match b.dims() {
        (1, 1) => Ok(Bcast::Scalar),
        (1, bc) if bc == c => Ok(Bcast::Row),
        (br, 1) if br == r => Ok(Bcast::Col),
        (br, bc) => Err(Error::shape(
            op,
            format!("cannot broadcast [{br}, {bc}] onto [{r}, {c}]"),
        )),
    }
}

#[inline]
fn bidx(mode: Bcast, i: usize, j: usize, c: usize) -> usize {
    match mode {
        Bcast::Same => i * c + j,
        Bcast::Row => j,
        Bcast::Col => i,
        Bcast::Scalar => 0,
    }
}

/// Iteration geometry for per-axis operations: `(count, len, outer_stride, inner_stride)`.
fn lines(rows: usize, cols: usize, axis: usize) -> (usize, usize, usize, usize) {
    if axis == 0 {
        (cols, rows, 1, cols)
    } else {
        (rows, cols, cols, 1)
    }
}

fn check_axis(op: &'static str, axis: usize) -> Result<()> {
    if axis > 1 {
        return Err(Error::shape(op, format!("axis {axis} out of range for rank 2")));
    }
    Ok(())
}

fn check_index(op: &'static str, index: &[usize], bound: usize) -> Result<()> {
    if let Some(&bad) = index.iter().find(|&&i| i >= bound) {
        return Err(Error::shape(op, format!("index {bad} out of range for extent {bound}")));
    }
    Ok(())
}

pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    let name = op.kind().name();
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(Error::shape(name, format!("expects {n} inputs, got {}", inputs.len())));
        }
    } else if inputs.is_empty() {
        return Err(Error::shape(name, "expects at least one input"));
    }
    for t in inputs {
        if t.rank() != 2 {
            return Err(Error::shape(name, format!("operands must be rank 2, got {:?}", t.shape())));
        }
    }
    let x = inputs[0];
    let (r, c) = x.dims();
    let out = match op {
        Op::MatMul => {
            let (k2, n) = inputs[1].dims();
            if c != k2 {
                return Err(Error::shape(name, format!("[{r}, {c}] x [{k2}, {n}]")));
            }
            Tensor::from_vec(r, n, matmul(x.data(), inputs[1].data(), r, c, n))
        }
        Op::Add | Op::Sub | Op::Mul => {
            let b = inputs[1];
            let mode = bcast(name, x, b)?;
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    let av = x.data()[i * c + j];
                    let bv = b.data()[bidx(mode, i, j, c)];
                    data.push(match op {
                        Op::Add => av + bv,
                        Op::Sub => av - bv,
                        _ => av * bv,
                    });
                }
            }
            Tensor::from_vec(r, c, data)
        }
        Op::Concat { axis } => {
            check_axis(name, *axis)?;
            concat(inputs, *axis)?
        }
        Op::ReduceSum { axis } | Op::ReduceMean { axis } => {
            check_axis(name, *axis)?;
            let (count, len, os, is) = lines(r, c, *axis);
            let d = x.data();
            let mut out = Vec::with_capacity(count);
            for l in 0..count {
                let mut s = 0.0f64;
                for t in 0..len {
                    s += d[l * os + t * is] as f64;
                }
                if matches!(op, Op::ReduceMean { .. }) {
                    s /= len as f64;
                }
                out.push(s as f32);
            }
            reduced(out, *axis)
        }
        Op::ReduceMax { axis } => {
            check_axis(name, *axis)?;
            if r == 0 || c == 0 {
                return Err(Error::shape(name, "empty operand"));
            }
            let (count, len, os, is) = lines(r, c, *axis);
            let d = x.data();
            let mut out = Vec::with_capacity(count);
            let mut arg = Vec::with_capacity(count);
            for l in 0..count {
                let mut best = l * os;
                for t in 1..len {
                    let p = l * os + t * is;
                    if d[p] > d[best] {
                        best = p;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
            return Ok((reduced(out, *axis), Saved::Argmax(arg)));
        }
        Op::Sum => {
            let s: f64 = x.data().iter().map(|&v| v as f64).sum();
            Tensor::scalar(s as f32)
        }
        Op::Softmax { axis } => {
            check_axis(name, *axis)?;
            let (count, len, os, is) = lines(r, c, *axis);
            let d = x.data();
            let mut out = vec![0.0f32; r * c];
            for l in 0..count {
                let mut m = f32::NEG_INFINITY;
                for t in 0..len {
                    m = m.max(d[l * os + t * is]);
                }
                let mut s = 0.0f64;
                for t in 0..len {
                    let p = l * os + t * is;
                    let e = (d[p] - m).exp();
                    out[p] = e;
                    s += e as f64;
                }
                let inv = (1.0 / s) as f32;
                for t in 0..len {
                    out[l * os + t * is] *= inv;
                }
            }
            Tensor::from_vec(r, c, out)
        }
        Op::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Gelu => x.map(|v| v * phi_cdf(v)),
        Op::Sigmoid => x.map(sigmoid),
        Op::LeakyRelu { slope } => {
            let s = *slope;
            x.map(|v| if v > 0.0 { v } else { s * v })
        }
        Op::LayerNorm { eps } => {
            check_affine(name, inputs, c)?;
            return Ok(layer_norm(x, inputs[1], inputs[2], *eps));
        }
        Op::BatchNorm { eps, running } => {
            check_affine(name, inputs, c)?;
            return batch_norm(x, inputs[1], inputs[2], *eps, running.as_deref());
        }
        Op::Dropout { mask } => match mask {
            None => x.clone(),
            Some(m) => {
                if m.len() != x.len() {
                    return Err(Error::shape(name, format!("mask of {} for {} values", m.len(), x.len())));
                }
                Tensor::from_vec(r, c, x.data().iter().zip(m.iter()).map(|(a, b)| a * b).collect())
            }
        },
        Op::Linear => {
            let (w, b) = (inputs[1], inputs[2]);
            let (wi, wo) = w.dims();
            if wi != c || b.dims() != (1, wo) {
                return Err(Error::shape(
                    name,
                    format!("x [{r}, {c}], w {:?}, b {:?}", w.shape(), b.shape()),
                ));
            }
            let mut out = matmul(x.data(), w.data(), r, c, wo);
            for i in 0..r {
                for (o, bv) in out[i * wo..(i + 1) * wo].iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            Tensor::from_vec(r, wo, out)
        }
        Op::Gather { index } => {
            check_index(name, index, r)?;
            x.select_rows(index)
        }
        Op::ScatterSum { index, size } => {
            if index.len() != r {
                return Err(Error::shape(name, format!("{} indices for {r} rows", index.len())));
            }
            check_index(name, index, *size)?;
            let mut out = vec![0.0f32; size * c];
            for (e, &dst) in index.iter().enumerate() {
                axpy(1.0, x.row(e), &mut out[dst * c..(dst + 1) * c]);
            }
            Tensor::from_vec(*size, c, out)
        }
        Op::SegmentSoftmax { index, size } => {
            if index.len() != r {
                return Err(Error::shape(name, format!("{} indices for {r} rows", index.len())));
            }
            check_index(name, index, *size)?;
            segment_softmax(x, index, *size)
        }
        Op::Transpose => x.transpose(),
        Op::Scale { factor } => {
            let f = *factor;
            x.map(|v| v * f)
        }
        Op::Attention { heads } => {
            let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
            check_attention(name, q, k, v, *heads)?;
            let (out, probs) = attention_forward(q, k, v, *heads);
            return Ok((out, Saved::Probs(probs)));
        }
        Op::LinearAttention { heads, floor } => {
            let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
            check_attention(name, q, k, v, *heads)?;
            return linear_attention_forward(q, k, v, *heads, *floor);
        }
        Op::BceWithLogits { targets } => {
            if targets.len() != x.len() {
                return Err(Error::shape(name, format!("{} targets for {} logits", targets.len(), x.len())));
            }
            let mut s = 0.0f64;
            for (&z, &t) in x.data().iter().zip(targets.iter()) {
                let (z, t) = (z as f64, t as f64);
                s += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            }
            Tensor::scalar((s / x.len().max(1) as f64) as f32)
        }
    };
    Ok((out, Saved::None))
}

fn reduced(out: Vec<f32>, axis: usize) -> Tensor {
    let n = out.len();
    if axis == 0 {
        Tensor::from_vec(1, n, out)
    } else {
        Tensor::from_vec(n, 1, out)
    }
}

fn check_affine(name: &'static str, inputs: &[&Tensor], c: usize) -> Result<()> {
    for t in &inputs[1..] {
        if t.dims() != (1, c) {
            return Err(Error::shape(name, format!("affine term {:?} for width {c}", t.shape())));
        }
    }
    Ok(())
}

fn check_attention(name: &'static str, q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<()> {
    let (d, dk, dv) = (q.cols(), k.cols(), v.cols());
    if heads == 0 || d != dk || d % heads != 0 || dv % heads != 0 {
        return Err(Error::shape(
            name,
            format!("q width {d}, k width {dk}, v width {dv} with {heads} heads"),
        ));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(name, format!("k has {} rows, v has {}", k.rows(), v.rows())));
    }
    Ok(())
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    if axis == 0 {
        let c = inputs[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for t in inputs {
            if t.cols() != c {
                return Err(Error::shape("concat", format!("axis 0 widths {} vs {c}", t.cols())));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        Ok(Tensor::from_vec(rows, c, data))
    } else {
        let r = inputs[0].rows();
        if let Some(t) = inputs.iter().find(|t| t.rows() != r) {
            return Err(Error::shape("concat", format!("axis 1 heights {} vs {r}", t.rows())));
        }
        let width: usize = inputs.iter().map(|t| t.cols()).sum();
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            for t in inputs {
                data.extend_from_slice(t.row(i));
            }
        }
        Ok(Tensor::from_vec(r, width, data))
    }
}

fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> (Tensor, Saved) {
    let (r, c) = x.dims();
    let mut xhat = vec![0.0f32; r * c];
    let mut rstd = Vec::with_capacity(r);
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + eps as f64).sqrt();
        rstd.push(rs as f32);
        for j in 0..c {
            let h = ((row[j] as f64 - mean) * rs) as f32;
            xhat[i * c + j] = h;
            out[i * c + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    (Tensor::from_vec(r, c, out), Saved::Norm { xhat, rstd })
}

fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
    running: Option<&(Vec<f32>, Vec<f32>)>,
) -> Result<(Tensor, Saved)> {
    let (r, c) = x.dims();
    let (mean, var): (Vec<f64>, Vec<f64>) = match running {
        Some((m, v)) => {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("batchnorm", format!("running stats of width {} for {c}", m.len())));
            }
            (m.iter().map(|&v| v as f64).collect(), v.iter().map(|&v| v as f64).collect())
        }
        None => column_moments(x),
    };
    let rstd: Vec<f32> = var.iter().map(|v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
    let mut xhat = vec![0.0f32; r * c];
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            let h = ((x.data()[i * c + j] as f64 - mean[j]) * rstd[j] as f64) as f32;
            xhat[i * c + j] = h;
            out[i * c + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((Tensor::from_vec(r, c, out), Saved::Norm { xhat, rstd }))
}

/// Per-column mean and biased variance, accumulated in `f64`.
pub(crate) fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (r, c) = x.dims();
    let mut mean = vec![0.0f64; c];
    for i in 0..r {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v as f64;
        }
    }
    let n = r.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; c];
    for i in 0..r {
        for ((s, &v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

fn segment_softmax(x: &Tensor, index: &[usize], size: usize) -> Tensor {
    let (r, c) = x.dims();
    let d = x.data();
    let mut out = vec![0.0f32; r * c];
    let mut max = vec![f32::NEG_INFINITY; size];
    let mut sum = vec![0.0f64; size];
    for j in 0..c {
        max.iter_mut().for_each(|m| *m = f32::NEG_INFINITY);
        sum.iter_mut().for_each(|s| *s = 0.0);
        for (e, &s) in index.iter().enumerate() {
            max[s] = max[s].max(d[e * c + j]);
        }
        for (e, &s) in index.iter().enumerate() {
            let v = (d[e * c + j] - max[s]).exp();
            out[e * c + j] = v;
            sum[s] += v as f64;
        }
        for (e, &s) in index.iter().enumerate() {
            out[e * c + j] = (out[e * c + j] as f64 / sum[s]) as f32;
        }
    }
    Tensor::from_vec(r, c, out)
}

/// Returns the output and the attention probabilities laid out `[head][query][key]`.
pub(crate) fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> (Tensor, Vec<f32>) {
    let (nq, d) = q.dims();
    let nk = k.rows();
    let dv = v.cols();
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = vec![0.0f32; heads * nq * nk];
    stats::record_attention_alloc(probs.len());
    let mut out = vec![0.0f32; nq * dv];
    // Head-major copies keep the inner dot products contiguous.
    let kh = split_heads(k, heads);
    let vh = split_heads(v, heads);
    let qh = split_heads(q, heads);
    for h in 0..heads {
        let kmat = &kh[h];
        let vmat = &vh[h];
        let qmat = &qh[h];
        let scores = matmul_nt(qmat, kmat, nq, dh, nk);
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        p.copy_from_slice(&scores);
        for i in 0..nq {
            let row = &mut p[i * nk..(i + 1) * nk];
            let mut m = f32::NEG_INFINITY;
            for s in row.iter_mut() {
                *s *= scale;
                m = m.max(*s);
            }
            let mut sum = 0.0f64;
            for s in row.iter_mut() {
                *s = (*s - m).exp();
                sum += *s as f64;
            }
            let inv = (1.0 / sum) as f32;
            row.iter_mut().for_each(|s| *s *= inv);
        }
        let o = matmul(p, vmat, nq, nk, dvh);
        for i in 0..nq {
            out[i * dv + h * dvh..i * dv + (h + 1) * dvh].copy_from_slice(&o[i * dvh..(i + 1) * dvh]);
        }
    }
    (Tensor::from_vec(nq, dv, out), probs)
}

fn split_heads(x: &Tensor, heads: usize) -> Vec<Vec<f32>> {
    let (r, c) = x.dims();
    let w = c / heads;
    (0..heads)
        .map(|h| {
            let mut buf = Vec::with_capacity(r * w);
            for i in 0..r {
                buf.extend_from_slice(&x.row(i)[h * w..(h + 1) * w]);
            }
            buf
        })
        .collect()
}

fn merge_heads(parts: &[Vec<f32>], rows: usize, width: usize) -> Tensor {
    let heads = parts.len();
    let mut out = vec![0.0f32; rows * width * heads];
    for (h, p) in parts.iter().enumerate() {
        for i in 0..rows {
            out[i * width * heads + h * width..i * width * heads + (h + 1) * width]
                .copy_from_slice(&p[i * width..(i + 1) * width]);
        }
    }
    Tensor::from_vec(rows, width * heads, out)
}

struct LinAttnHead {
    qf: Vec<f32>,
    kf: Vec<f32>,
    kv: Vec<f32>,
    ksum: Vec<f32>,
    num: Vec<f32>,
    den_raw: Vec<f32>,
}

fn linear_attention_head(q: &[f32], k: &[f32], v: &[f32], nq: usize, nk: usize, dh: usize, dvh: usize) -> LinAttnHead {
    let relu = |s: &[f32]| s.iter().map(|&x| x.max(0.0)).collect::<Vec<f32>>();
    let qf = relu(q);
    let kf = relu(k);
    let kv = matmul_tn(&kf, v, nk, dh, dvh);
    let mut ksum = vec![0.0f64; dh];
    for j in 0..nk {
        for (s, &x) in ksum.iter_mut().zip(&kf[j * dh..(j + 1) * dh]) {
            *s += x as f64;
        }
    }
    let ksum: Vec<f32> = ksum.into_iter().map(|s| s as f32).collect();
    let num = matmul(&qf, &kv, nq, dh, dvh);
    let den_raw = (0..nq).map(|i| dot(&qf[i * dh..(i + 1) * dh], &ksum)).collect();
    LinAttnHead {
        qf,
        kf,
        kv,
        ksum,
        num,
        den_raw,
    }
}

fn linear_attention_forward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, floor: f32) -> Result<(Tensor, Saved)> {
    let (n, nk) = (q.rows(), k.rows());
    let (dh, dvh) = (q.cols() / heads, v.cols() / heads);
    let (qh, kh, vh) = (split_heads(q, heads), split_heads(k, heads), split_heads(v, heads));
    let mut parts = Vec::with_capacity(heads);
    for h in 0..heads {
        let st = linear_attention_head(&qh[h], &kh[h], &vh[h], n, nk, dh, dvh);
        let mut o = st.num;
        for i in 0..n {
            let den = st.den_raw[i].max(floor);
            o[i * dvh..(i + 1) * dvh].iter_mut().for_each(|x| *x /= den);
        }
        parts.push(o);
    }
    Ok((merge_heads(&parts, n, dvh), Saved::None))
}

/// Gradients with respect to each input; `None` where `needs[i]` is false.
pub(crate) fn backward(
    op: &Op,
    inputs: &[&Tensor],
    out: &Tensor,
    saved: &Saved,
    g: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let x = inputs[0];
    let (r, c) = x.dims();
    let mut grads: Vec<Option<Tensor>> = vec![None; inputs.len()];
    let elementwise = |f: &dyn Fn(usize) -> f32| -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|p| g.data()[p] * f(p)).collect())
    };
    match op {
        Op::MatMul => {
            let b = inputs[1];
            let n = b.cols();
            if needs[0] {
                grads[0] = Some(Tensor::from_vec(r, c, matmul_nt(g.data(), b.data(), r, n, c)));
            }
            if needs[1] {
                grads[1] = Some(Tensor::from_vec(c, n, matmul_tn(x.data(), g.data(), r, c, n)));
            }
        }
        Op::Add | Op::Sub | Op::Mul => {
            let b = inputs[1];
            let mode = bcast("", x, b).expect("validated in forward");
            if needs[0] {
                grads[0] = Some(match op {
                    Op::Mul => elementwise(&|p| b.data()[bidx(mode, p / c, p % c, c)]),
                    _ => g.clone(),
                });
            }
            if needs[1] {
                let mut gb = vec![0.0f64; b.len()];
                for i in 0..r {
                    for j in 0..c {
                        let p = i * c + j;
                        let contrib = match op {
                            Op::Add => g.data()[p],
                            Op::Sub => -g.data()[p],
                            _ => g.data()[p] * x.data()[p],
                        };
                        gb[bidx(mode, i, j, c)] += contrib as f64;
                    }
                }
                grads[1] = Some(Tensor::new(b.shape().to_vec(), gb.into_iter().map(|v| v as f32).collect()).unwrap());
            }
        }
        Op::Concat { axis } => {
            let mut offset = 0;
            for (t, input) in inputs.iter().enumerate() {
                let (ri, ci) = input.dims();
                if needs[t] {
                    let part = if *axis == 0 {
                        Tensor::from_vec(ri, ci, g.data()[offset * ci..(offset + ri) * ci].to_vec())
                    } else {
                        let gc = g.cols();
                        let mut d = Vec::with_capacity(ri * ci);
                        for i in 0..ri {
                            d.extend_from_slice(&g.data()[i * gc + offset..i * gc + offset + ci]);
                        }
                        Tensor::from_vec(ri, ci, d)
                    };
                    grads[t] = Some(part);
                }
                offset += if *axis == 0 { ri } else { ci };
            }
        }
        Op::ReduceSum { axis } | Op::ReduceMean { axis } => {
            let (count, len, os, is) = lines(r, c, *axis);
            let k = if matches!(op, Op::ReduceMean { .. }) { 1.0 / len as f32 } else { 1.0 };
            let mut d = vec![0.0f32; r * c];
            for l in 0..count {
                for t in 0..len {
                    d[l * os + t * is] = g.data()[l] * k;
                }
            }
            grads[0] = Some(Tensor::from_vec(r, c, d));
        }
        Op::ReduceMax { .. } => {
            let Saved::Argmax(arg) = saved else { unreachable!() };
            let mut d = vec![0.0f32; r * c];
            for (l, &p) in arg.iter().enumerate() {
                d[p] += g.data()[l];
            }
            grads[0] = Some(Tensor::from_vec(r, c, d));
        }
        Op::Sum => {
            grads[0] = Some(Tensor::full(r, c, g.item()));
        }
        Op::Softmax { axis } => {
            let (count, len, os, is) = lines(r, c, *axis);
            let y = out.data();
            let mut d = vec![0.0f32; r * c];
            for l in 0..count {
                let mut s = 0.0f64;
                for t in 0..len {
                    let p = l * os + t * is;
                    s += (g.data()[p] * y[p]) as f64;
                }
                let s = s as f32;
                for t in 0..len {
                    let p = l * os + t * is;
                    d[p] = y[p] * (g.data()[p] - s);
                }
            }
            grads[0] = Some(Tensor::from_vec(r, c, d));
        }
        Op::Relu => grads[0] = Some(elementwise(&|p| if x.data()[p] > 0.0 { 1.0 } else { 0.0 })),
        Op::Gelu => {
            grads[0] = Some(elementwise(&|p| {
                let v = x.data()[p];
                phi_cdf(v) + v * phi_pdf(v)
            }))
        }
        Op::Sigmoid => grads[0] = Some(elementwise(&|p| out.data()[p] * (1.0 - out.data()[p]))),
        Op::LeakyRelu { slope } => {
            grads[0] = Some(elementwise(&|p| if x.data()[p] > 0.0 { 1.0 } else { *slope }))
        }
        Op::LayerNorm { .. } => {
            let Saved::Norm { xhat, rstd } = saved else { unreachable!() };
            let gamma = inputs[1].data();
            if needs[0] {
                let mut d = vec![0.0f32; r * c];
                for i in 0..r {
                    let gi = g.row(i);
                    let hi = &xhat[i * c..(i + 1) * c];
                    let mut s1 = 0.0f64;
                    let mut s2 = 0.0f64;
                    for j in 0..c {
                        let dh = (gi[j] * gamma[j]) as f64;
                        s1 += dh;
                        s2 += dh * hi[j] as f64;
                    }
                    let (m1, m2) = ((s1 / c as f64) as f32, (s2 / c as f64) as f32);
                    for j in 0..c {
                        d[i * c + j] = rstd[i] * (gi[j] * gamma[j] - m1 - hi[j] * m2);
                    }
                }
                grads[0] = Some(Tensor::from_vec(r, c, d));
            }
            affine_grads(&mut grads, needs, g, xhat, r, c);
        }
        Op::BatchNorm { running, .. } => {
            let Saved::Norm { xhat, rstd } = saved else { unreachable!() };
            let gamma = inputs[1].data();
            if needs[0] {
                let mut d = vec![0.0f32; r * c];
                if running.is_some() {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = g.data()[i * c + j] * gamma[j] * rstd[j];
                        }
                    }
                } else {
                    let mut s1 = vec![0.0f64; c];
                    let mut s2 = vec![0.0f64; c];
                    for i in 0..r {
                        for j in 0..c {
                            let dh = (g.data()[i * c + j] * gamma[j]) as f64;
                            s1[j] += dh;
                            s2[j] += dh * xhat[i * c + j] as f64;
                        }
                    }
                    let n = r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            let p = i * c + j;
                            let dh = g.data()[p] * gamma[j];
                            d[p] = rstd[j] * (dh - (s1[j] / n) as f32 - xhat[p] * (s2[j] / n) as f32);
                        }
                    }
                }
                grads[0] = Some(Tensor::from_vec(r, c, d));
            }
            affine_grads(&mut grads, needs, g, xhat, r, c);
        }
        Op::Dropout { mask } => {
            grads[0] = Some(match mask {
                None => g.clone(),
                Some(m) => elementwise(&|p| m[p]),
            })
        }
        Op::Linear => {
            let w = inputs[1];
            let o = w.cols();
            if needs[0] {
                grads[0] = Some(Tensor::from_vec(r, c, matmul_nt(g.data(), w.data(), r, o, c)));
            }
            if needs[1] {
                grads[1] = Some(Tensor::from_vec(c, o, matmul_tn(x.data(), g.data(), r, c, o)));
            }
            if needs[2] {
                grads[2] = Some(column_sums(g));
            }
        }
        Op::Gather { index } => {
            let mut d = vec![0.0f32; r * c];
            for (e, &src) in index.iter().enumerate() {
                axpy(1.0, g.row(e), &mut d[src * c..(src + 1) * c]);
            }
            grads[0] = Some(Tensor::from_vec(r, c, d));
        }
        Op::ScatterSum { index, .. } => {
            grads[0] = Some(g.select_rows(index));
        }
        Op::SegmentSoftmax { index, size } => {
            let y = out.data();
            let mut d = vec![0.0f32; r * c];
            let mut s = vec![0.0f64; *size];
            for j in 0..c {
                s.iter_mut().for_each(|v| *v = 0.0);
                for (e, &seg) in index.iter().enumerate() {
                    s[seg] += (g.data()[e * c + j] * y[e * c + j]) as f64;
                }
                for (e, &seg) in index.iter().enumerate() {
                    let p = e * c + j;
                    d[p] = y[p] * (g.data()[p] - s[seg] as f32);
                }
            }
            grads[0] = Some(Tensor::from_vec(r, c, d));
        }
        Op::Transpose => grads[0] = Some(g.transpose()),
        Op::Scale { factor } => grads[0] = Some(g.map(|v| v * factor)),
        Op::Attention { heads } => {
            let Saved::Probs(probs) = saved else { unreachable!() };
            let gs = attention_backward(inputs[0], inputs[1], inputs[2], *heads, probs, g);
            for (t, gt) in gs.into_iter().enumerate() {
                if needs[t] {
                    grads[t] = Some(gt);
                }
            }
        }
        Op::LinearAttention { heads, floor } => {
            let gs = linear_attention_backward(inputs[0], inputs[1], inputs[2], *heads, *floor, g);
            for (t, gt) in gs.into_iter().enumerate() {
                if needs[t] {
                    grads[t] = Some(gt);
                }
            }
        }
        Op::BceWithLogits { targets } => {
            let k = g.item() / x.len().max(1) as f32;
            grads[0] = Some(Tensor::from_vec(
                r,
                c,
                x.data()
                    .iter()
                    .zip(targets.iter())
                    .map(|(&z, &t)| k * (sigmoid(z) - t))
                    .collect(),
            ));
        }
    }
    grads
}

fn column_sums(g: &Tensor) -> Tensor {
    let (r, c) = g.dims();
    let mut s = vec![0.0f64; c];
    for i in 0..r {
        for (acc, &v) in s.iter_mut().zip(g.row(i)) {
            *acc += v as f64;
        }
    }
    Tensor::from_vec(1, c, s.into_iter().map(|v| v as f32).collect())
}

fn affine_grads(grads: &mut [Option<Tensor>], needs: &[bool], g: &Tensor, xhat: &[f32], r: usize, c: usize) {
    if needs[1] {
        let mut s = vec![0.0f64; c];
        for i in 0..r {
            for j in 0..c {
                s[j] += (g.data()[i * c + j] * xhat[i * c + j]) as f64;
            }
        }
        grads[1] = Some(Tensor::from_vec(1, c, s.into_iter().map(|v| v as f32).collect()));
    }
    if needs[2] {
        grads[2] = Some(column_sums(g));
    }
}

fn attention_backward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, probs: &[f32], g: &Tensor) -> [Tensor; 3] {
    let (nq, d) = q.dims();
    let nk = k.rows();
    let dv = v.cols();
    let (dh, dvh) = (d / heads, dv / heads);
    let scale = 1.0 / (dh as f32).sqrt();
    let (qh, kh, vh, gh) = (
        split_heads(q, heads),
        split_heads(k, heads),
        split_heads(v, heads),
        split_heads(g, heads),
    );
    let mut dq = Vec::with_capacity(heads);
    let mut dk = Vec::with_capacity(heads);
    let mut dvs = Vec::with_capacity(heads);
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        // dP = dO V^T
        let mut ds = matmul_nt(&gh[h], &vh[h], nq, dvh, nk);
        for i in 0..nq {
            let prow = &p[i * nk..(i + 1) * nk];
            let drow = &mut ds[i * nk..(i + 1) * nk];
            let s: f32 = dot(prow, drow);
            for (dv_, &pv) in drow.iter_mut().zip(prow) {
                *dv_ = pv * (*dv_ - s) * scale;
            }
        }
        dq.push(matmul(&ds, &kh[h], nq, nk, dh));
        dk.push(matmul_tn(&ds, &qh[h], nq, nk, dh));
        dvs.push(matmul_tn(p, &gh[h], nq, nk, dvh));
    }
    [merge_heads(&dq, nq, dh), merge_heads(&dk, nk, dh), merge_heads(&dvs, nk, dvh)]
}

fn linear_attention_backward(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, floor: f32, g: &Tensor) -> [Tensor; 3] {
    let (n, nk) = (q.rows(), k.rows());
    let (dh, dvh) = (q.cols() / heads, v.cols() / heads);
    let (qh, kh, vh, gh) = (
        split_heads(q, heads),
        split_heads(k, heads),
        split_heads(v, heads),
        split_heads(g, heads),
    );
    let mut dqs = Vec::with_capacity(heads);
    let mut dks = Vec::with_capacity(heads);
    let mut dvs = Vec::with_capacity(heads);
    for h in 0..heads {
        let st = linear_attention_head(&qh[h], &kh[h], &vh[h], n, nk, dh, dvh);
        let gv = &gh[h];
        let mut dnum = vec![0.0f32; n * dvh];
        let mut dden = vec![0.0f32; n];
        for i in 0..n {
            let den = st.den_raw[i].max(floor);
            let gi = &gv[i * dvh..(i + 1) * dvh];
            let ni = &st.num[i * dvh..(i + 1) * dvh];
            for b in 0..dvh {
                dnum[i * dvh + b] = gi[b] / den;
            }
            if st.den_raw[i] >= floor {
                dden[i] = -dot(gi, ni) / (den * den);
            }
        }
        // d relu(Q)
        let mut dqf = matmul_nt(&dnum, &st.kv, n, dvh, dh);
        for i in 0..n {
            axpy(dden[i], &st.ksum, &mut dqf[i * dh..(i + 1) * dh]);
        }
        let dkv = matmul_tn(&st.qf, &dnum, n, dh, dvh);
        let mut dksum = vec![0.0f32; dh];
        for i in 0..n {
            axpy(dden[i], &st.qf[i * dh..(i + 1) * dh], &mut dksum);
        }
        let mut dkf = matmul_nt(&vh[h], &dkv, nk, dvh, dh);
        for j in 0..nk {
            axpy(1.0, &dksum, &mut dkf[j * dh..(j + 1) * dh]);
        }
        let dv = matmul(&st.kf, &dkv, nk, dh, dvh);
        for (d, &x) in dqf.iter_mut().zip(&qh[h]) {
            if x <= 0.0 {
                *d = 0.0;
            }
        }
        for (d, &x) in dkf.iter_mut().zip(&kh[h]) {
            if x <= 0.0 {
                *d = 0.0;
            }
        }
        dqs.push(dqf);
        dks.push(dkf);
        dvs.push(dv);
    }
    [merge_heads(&dqs, n, dh), merge_heads(&dks, nk, dh), merge_heads(&dvs, nk, dvh)]
}
