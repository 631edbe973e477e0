//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Every node refers only to nodes
//! recorded before it, so the parent relation is acyclic by construction and
//! backward is a single reverse sweep.

mod gradcheck;
mod ops;
mod params;

pub use gradcheck::gradient_check;
pub use ops::{Op, Padding, ARCCOS_CLAMP, ARCCOS_TOLERANCE, BATCHNORM_EPS, NORM_FLOOR};
pub use params::{sgd_step, ParamEntry, ParamStore};

use ops::Aux;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
pub struct GradNode<T> {
    pub op: Op,
    pub parents: Vec<Var>,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    aux: Aux<T>,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<GradNode<T>>,
    tracking: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    /// A graph that records what backward needs.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            tracking: true,
        }
    }

    /// A graph used for forward evaluation only; `backward` is rejected.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            tracking: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, parents: Vec<Var>, value: Tensor<T>, aux: Aux<T>) -> Var {
        let aux = if self.tracking { aux } else { Aux::None };
        self.nodes.push(GradNode {
            op,
            parents,
            value,
            grad: None,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, op: Op, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(self.push(op, Vec::new(), value, Aux::None))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(Op::Constant, value)
    }

    /// Records the current value of parameter `name`; `backward` routes its
    /// gradient back into the store entry of the same name.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        self.leaf(Op::Param(name.to_owned()), value)
    }

    pub fn node(&self, v: Var) -> &GradNode<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Applies a primitive to previously recorded nodes.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::domain(op.name(), format!("input {bad:?} does not belong to this graph")));
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, aux) = ops::forward(&op, &values)?;
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(self.push(op, inputs.to_vec(), value, aux))
    }

    /// Populates `grad` on every node the scalar `loss` depends on, then
    /// overwrites the gradient accumulators in `store`: parameters reached
    /// from `loss` receive d(loss)/d(param), all others are zeroed.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward_nodes(loss)?;
        store.zero_grads();
        for node in &self.nodes[..=loss.0] {
            if let (Op::Param(name), Some(grad)) = (&node.op, &node.grad) {
                store.accumulate(name, grad)?;
            }
        }
        Ok(())
    }

    /// Backward sweep without a parameter store; read results via [`Graph::grad`].
    pub fn backward_nodes(&mut self, loss: Var) -> Result<()> {
        if !self.tracking {
            return Err(Error::TrackingDisabled);
        }
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::full(shape, T::one())?);
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else { continue };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.parents.is_empty() {
                let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &before[p.0].value).collect();
                let parent_grads = ops::backward(&node.op, &inputs, &node.value, &node.aux, &grad)?;
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    if !pg.is_finite() {
                        return Err(Error::NonFinite { op: node.op.name() });
                    }
                    let slot = &mut before[p.0].grad;
                    match slot {
                        Some(acc) => acc.data_mut().iter_mut().zip(pg.data()).for_each(|(a, &b)| *a = *a + b),
                        None => *slot = Some(pg),
                    }
                }
            }
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var> {
        self.apply(Op::Conv2d { padding }, &[x, w, b])
    }

    pub fn maxpool(&mut self, x: Var, size: usize) -> Result<Var> {
        self.apply(Op::MaxPool { size }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.apply(Op::BatchNorm { eps: BATCHNORM_EPS }, &[x, gamma, beta])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Op::ScalarMul(s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Op::AddScalar(s), &[a])
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::ReduceSum { axis }, &[a])
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.apply(Op::ReduceMean { axis }, &[a])
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::L2Normalize, &[a])
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Cos, &[a])
    }

    pub fn arccos(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Arccos, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::LogSoftmax, &[a])
    }

    pub fn negate(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Negate, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Flatten, &[a])
    }

    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        self.apply(Op::SelectRows(rows), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Op::Clamp { lo, hi }, &[a])
    }

    pub fn pairwise_sq_dist(&mut self, x: Var, p: Var) -> Result<Var> {
        self.apply(Op::PairwiseSqDist, &[x, p])
    }
}
