//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is a define-by-run Wengert tape: every operation appends a node
//! holding its forward value plus the information needed to push gradients
//! back to its inputs. A fresh [`Tape`] is built per forward pass; parameters
//! are mounted as gradient-tracked leaves, everything else as constants.
//!
//! Design points that matter downstream:
//!
//! * generic over [`Scalar`] — networks train in `f32`, gradient checks and
//!   mass ledgers run the same code in `f64`;
//! * gradients accumulate additively, so a node feeding several consumers
//!   (residual connections, squared terms) needs no special casing;
//! * linear operators (e.g. spherical-harmonic transforms) register on the
//!   tape through [`LinOp`], whose backward is the operator's adjoint;
//! * all reindexing (window partition, rolls, permutes) is one [`gather`]
//!   rule whose backward is scatter-add — [`Tape::gather`].
//!
//! Shapes are row-major; the last axis is contiguous. Scalars have shape
//! `[1]`.

mod gradcheck;
mod layers;
mod rules;

pub use gradcheck::{finite_diff_grad, grad_check, layer_battery, BatteryEntry, GradCheckReport};
pub use layers::{
    linear, mlp, window_attention, Activation, AttentionParams, WindowPlan,
};
pub use rules::PadMode;

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward already consumed this tape")]
    BackwardTwice,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Element type of tensors: `f32` for training/inference, `f64` for gradient
/// checks and mass accounting.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for `S::from_f64` in numeric code.
#[inline(always)]
pub(crate) fn sc<S: Scalar>(x: f64) -> S {
    S::from_f64(x)
}

/// Plain tensor value: shape + row-major data. Used for parameters, model
/// I/O, and checkpoints; computation happens on the [`Tape`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.is_empty() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {shape:?} (len {n}) vs data len {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![S::zero(); n] }
    }

    pub fn scalar(x: S) -> Self {
        Self { shape: vec![1], data: vec![x] }
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Self { shape, data: (0..n).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Lossy-precision cast between scalar types (via f64).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64(x.to_f64())).collect(),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Linear operator pluggable into the tape; its backward is the adjoint.
/// Applied independently over leading batch chunks of `in_len()` elements.
pub trait LinOp<S>: Send + Sync {
    fn in_len(&self) -> usize;
    fn out_len(&self) -> usize;
    /// y = A·x (y is zeroed by the caller).
    fn apply(&self, x: &[S], y: &mut [S]);
    /// out += Aᵀ·g.
    fn apply_adjoint(&self, g: &[S], out: &mut [S]);
}

pub(crate) struct Node<S: Scalar> {
    pub data: Vec<S>,
    pub shape: Vec<usize>,
    pub needs_grad: bool,
    pub rule: rules::Rule<S>,
}

/// Gradients of a scalar loss with respect to tape leaves, by node id.
pub struct Gradients<S: Scalar> {
    pub(crate) grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient buffer for a leaf, if it was reached by backward.
    pub fn get(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Define-by-run reverse-mode tape.
pub struct Tape<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor<S> {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            data: self.nodes[id.0].data.clone(),
        }
    }

    pub(crate) fn push(
        &mut self,
        data: Vec<S>,
        shape: Vec<usize>,
        needs_grad: bool,
        rule: rules::Rule<S>,
    ) -> NodeId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { data, shape, needs_grad, rule });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant (no gradient) leaf from a tensor value.
    pub fn constant(&mut self, t: &Tensor<S>) -> NodeId {
        self.push(t.data.clone(), t.shape.clone(), false, rules::Rule::Leaf)
    }

    /// Constant leaf taking ownership of the buffer.
    pub fn constant_owned(&mut self, data: Vec<S>, shape: Vec<usize>) -> Result<NodeId> {
        if data.len() != shape.iter().product::<usize>() || shape.is_empty() {
            return Err(TensorError::ShapeMismatch(format!(
                "constant shape {shape:?} vs len {}",
                data.len()
            )));
        }
        Ok(self.push(data, shape, false, rules::Rule::Leaf))
    }

    /// Gradient-tracked leaf (parameter or differentiated input).
    pub fn leaf(&mut self, t: &Tensor<S>) -> NodeId {
        self.push(t.data.clone(), t.shape.clone(), true, rules::Rule::Leaf)
    }

    /// Reverse sweep from a scalar loss. Each tape can be swept once; the
    /// returned [`Gradients`] holds buffers for every gradient-tracked leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<S>> {
        if self.consumed {
            return Err(TensorError::BackwardTwice);
        }
        self.consumed = true;
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let keep = matches!(self.nodes[i].rule, rules::Rule::Leaf) && self.nodes[i].needs_grad;
            rules::backward_step(&self.nodes, i, &g, &mut grads);
            if keep {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_shape_validation() {
        assert!(Tensor::new(vec![2, 3], vec![0.0f64; 5]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0f64; 4]).is_ok());
    }

    #[test]
    fn backward_accumulates_over_shared_consumer() {
        // y = sum(x·x): dy/dx = 2x must come out of two Mul contributions.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[2], &[1.0, 2.0]));
        let c = tape.constant(&t64(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[1], &[2.0]));
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(TensorError::BackwardTwice)));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn cast_round_trip_through_f32_loses_precision_gracefully() {
        let t = t64(&[2], &[1.0 + 1e-12, 2.0]);
        let back: Tensor<f64> = t.cast::<f32>().cast::<f64>();
        assert_eq!(back.data()[1], 2.0);
        assert!((back.data()[0] - 1.0).abs() < 1e-7);
    }
}
