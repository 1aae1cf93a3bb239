use std::sync::Arc;

use super::ops::{self, Op, Saved};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Option<(Op, Vec<Var>)>,
    saved: Saved,
    requires_grad: bool,
}

/// Append-only record of a forward pass. Inputs always precede their
/// consumers, so reverse append order is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`]. Only leaf
/// gradients are retained; intermediate ones are consumed by the pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let shape = self.shapes[v.0].clone();
                let n = shape.iter().product();
                Tensor::new(shape, vec![0.0; n]).expect("shape product")
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf value. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            saved: Saved::None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v`'s current value with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Evaluates `op` on `inputs` and records it when any input requires a gradient.
    pub fn forward_op(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::InvalidArgument(format!("var {} is not on this tape", bad.0)));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = ops::forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let (op, saved) = if requires_grad {
            (Some((op, inputs.to_vec())), saved)
        } else {
            (None, Saved::None)
        };
        self.nodes.push(Node {
            value,
            op,
            saved,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_with(loss, Tensor::new(shape, vec![1.0]).unwrap())
    }

    /// Reverse pass seeded with an explicit cotangent for `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} for output {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some((op, inputs)) = &node.op else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let input_grads = ops::backward(op, &values, &node.value, &node.saved, &g, &needs);
            for (v, gi) in inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    // Convenience wrappers over `forward_op`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::Mul, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.forward_op(Op::Concat { axis }, parts)
    }

    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.forward_op(Op::ReduceSum { axis }, &[x])
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.forward_op(Op::ReduceMean { axis }, &[x])
    }

    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.forward_op(Op::ReduceMax { axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.forward_op(Op::Sum, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.forward_op(Op::Softmax { axis }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.forward_op(Op::Relu, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.forward_op(Op::Gelu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.forward_op(Op::Sigmoid, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        self.forward_op(Op::LeakyRelu { slope }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.forward_op(Op::LayerNorm { eps: 1e-5 }, &[x, gamma, beta])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.forward_op(Op::Linear, &[x, w, b])
    }

    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        self.forward_op(Op::Gather { index }, &[x])
    }

    pub fn scatter_sum(&mut self, x: Var, index: Arc<Vec<usize>>, size: usize) -> Result<Var> {
        self.forward_op(Op::ScatterSum { index, size }, &[x])
    }

    pub fn segment_softmax(&mut self, x: Var, index: Arc<Vec<usize>>, size: usize) -> Result<Var> {
        self.forward_op(Op::SegmentSoftmax { index, size }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.forward_op(Op::Transpose, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        self.forward_op(Op::Scale { factor }, &[x])
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.forward_op(Op::Attention { heads }, &[q, k, v])
    }

    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        self.forward_op(Op::LinearAttention { heads, floor: 1e-6 }, &[q, k, v])
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Vec<f32>>) -> Result<Var> {
        self.forward_op(Op::BceWithLogits { targets }, &[logits])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
        let i = t.constant(Tensor::eye(2));
        let av = t.constant(a.clone());
        let out = t.matmul(i, av).unwrap();
        assert_eq!(t.value(out), &a);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(1, 2, vec![0.0, 0.0]));
        let y = t.softmax(x, 1).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn reduce_max_over_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap());
        let y = t.reduce_max(x, 0).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 5.0]);
    }

    #[test]
    fn grad_of_square() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0), true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[6.0]);
    }

    #[test]
    fn grad_of_relu_sum() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(vec![-1.0, 2.0]), true);
        let r = t.relu(x).unwrap();
        let loss = t.sum(r).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0), true);
        let r = t.relu(x).unwrap();
        let g = t.backward(r).unwrap();
        assert_eq!(g.get(x).item(), 0.0);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(2.0), true);
        let unused = t.leaf(Tensor::from_vec(2, 3, vec![1.0; 6]), true);
        let loss = t.mul(x, x).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros(2, 3));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row_vector(vec![1.0, 2.0]), true);
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn unknown_op_kind() {
        let err = "conv2d".parse::<super::super::OpKind>().unwrap_err();
        assert!(matches!(err, Error::UnknownOp(_)));
    }

    #[test]
    fn scatter_then_gather_on_permutation_is_identity() {
        let mut t = Tape::new();
        let x = Tensor::from_vec(4, 2, (0..8).map(|v| v as f32).collect());
        let perm = Arc::new(vec![2, 0, 3, 1]);
        let xv = t.constant(x.clone());
        let s = t.scatter_sum(xv, perm.clone(), 4).unwrap();
        let back = t.gather(s, perm).unwrap();
        assert_eq!(t.value(back), &x);
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(3, 4, (0..12).map(|v| (v as f32 * 1.7).sin() * 5.0).collect()));
        let y = t.softmax(x, 1).unwrap();
        for i in 0..3 {
            let row = t.value(y).row(i);
            assert!(row.iter().all(|&p| p >= 0.0));
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_vec(3, 8, (0..24).map(|v| (v as f32 * 0.9).cos() * 3.0 + 1.0).collect()));
        let g = t.constant(Tensor::full(1, 8, 1.0));
        let b = t.constant(Tensor::zeros(1, 8));
        let y = t.layer_norm(x, g, b).unwrap();
        for i in 0..3 {
            let row = t.value(y).row(i);
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn bce_matches_closed_form() {
        let mut t = Tape::new();
        let z = t.leaf(Tensor::column(vec![0.0, 2.0]), true);
        let loss = t.bce_with_logits(z, Arc::new(vec![1.0, 0.0])).unwrap();
        let want = (2f64.ln() + (1.0 + 2f64.exp()).ln()) / 2.0;
        assert!((t.value(loss).item() as f64 - want).abs() < 1e-6);
    }
}
