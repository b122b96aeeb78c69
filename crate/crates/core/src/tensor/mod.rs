//! Dense tensors and a tape-based reverse-mode automatic differentiation graph.
//!
//! A [`Graph`] records every operation applied to its nodes. Values are
//! immutable once recorded; [`Graph::backward`] walks the tape from a scalar
//! loss to the front, visiting every node exactly once, and accumulates
//! gradients into the leaves that were created with `requires_grad`.
//!
//! The graph is generic over the scalar type. Models run in `f32`; the same
//! operations instantiated with `f64` are used to tighten gradient checks.

mod kernels;
mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
pub use ops::{Reduction, MASK_VALUE};

/// Floating-point scalar usable inside a [`Graph`].
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Build from an `f64` slice, converting to `F`.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| F::lit(x)).collect())
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::lit(x.to_f64_lossy())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: ops::Op<F>,
    needs_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// the tape is always topologically sorted.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
    training: bool,
    footprint: usize,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            training: false,
            footprint: 0,
        }
    }

    /// A graph in training mode applies dropout.
    pub fn training() -> Self {
        Graph {
            training: true,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of scalars held by node values and saved buffers.
    pub fn footprint(&self) -> usize {
        self.footprint
    }

    /// Insert a leaf. Its `requires_grad` flag decides whether backward
    /// accumulates into it.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        let needs_grad = tensor.requires_grad;
        self.push(tensor, ops::Op::Leaf, needs_grad)
    }

    /// Insert a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<F>) -> Var {
        tensor.requires_grad = false;
        self.push(tensor, ops::Op::Leaf, false)
    }

    /// Insert a trainable leaf.
    pub fn param(&mut self, mut tensor: Tensor<F>) -> Var {
        tensor.requires_grad = true;
        tensor.grad = None;
        self.push(tensor, ops::Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value.data
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    /// Attention probabilities `[b, h, m, n]` saved by an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<Tensor<F>> {
        self.nodes[v.0].op.attention_probs().map(|(shape, probs)| Tensor {
            shape,
            data: probs.to_vec(),
            requires_grad: false,
            grad: None,
        })
    }

    fn push(&mut self, value: Tensor<F>, op: ops::Op<F>, needs_grad: bool) -> Var {
        self.footprint += value.data.len() + op.saved_len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse-mode sweep from a scalar node.
    ///
    /// Intermediate gradients live only for the duration of the call, so
    /// running backward twice accumulates exactly twice the leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = &self.nodes[loss.0].value.shape;
        if self.nodes[loss.0].value.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                ops::Op::Leaf => leaf_grads.push((i, gout)),
                op => op.backward(&self.nodes, &node.value, &gout, &mut grads),
            }
        }

        for (i, g) in leaf_grads {
            let t = &mut self.nodes[i].value;
            match &mut t.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                None => t.grad = Some(g),
            }
        }
        Ok(())
    }
}

/// Accumulate `src` into the gradient slot of node `idx`.
fn accumulate<F: Real>(grads: &mut [Option<Vec<F>>], idx: usize, len: usize) -> &mut Vec<F> {
    grads[idx].get_or_insert_with(|| vec![F::zero(); len])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_inconsistent_shape() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn backward_on_non_scalar_is_contract_error() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_accumulates_exactly_twice() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
        let w = g.param(Tensor::from_f64(&[3, 2], &[1.0, 0.5, -0.3, 0.2, 0.7, -1.1]).unwrap());
        let x2 = g.reshape(x, vec![1, 3]).unwrap();
        let y = g.linear(x2, w, None).unwrap();
        let y = g.sigmoid(y);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let first: Vec<f64> = g.grad(w).unwrap().to_vec();
        g.backward(s).unwrap();
        let second = g.grad(w).unwrap();
        for (a, b) in first.iter().zip(second) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn unreachable_leaves_keep_no_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let unused = g.param(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(unused).is_none());
    }
}
