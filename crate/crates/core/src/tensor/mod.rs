//! Dense `f64` tensors and reverse-mode differentiation.
//!
//! [`Tensor`] is a plain value: a shape plus a flat row-major buffer.
//! Differentiation happens through a [`Graph`] tape: leaves are inserted
//! with [`Graph::param`] (tracked) or [`Graph::constant`] (untracked),
//! operations append nodes, and [`Graph::backward`] walks the tape in
//! reverse to populate per-leaf gradients. A graph is consumed by its
//! backward pass; running a second backward without rebuilding the
//! forward pass is an error.

mod ops;

pub mod gradcheck;

use crate::error::{Error, Result};

/// Dense row-major tensor. A scalar has the empty shape `[]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                reason: format!("shape wants {expect} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// 2-D convenience constructor (row-major).
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidShape {
                op: "item",
                shape: self.shape.clone(),
                reason: "expected a scalar".into(),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    GlobalAvgPool(Var),
    L2NormalizeRows(Var, f64),
    LogSumExpRows(Var),
    ScalarMean(Var),
    SumAll(Var),
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
}

/// Reverse-mode tape. Build a forward pass, call [`Graph::backward`] once,
/// then read gradients with [`Graph::grad`].
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    /// Insert a tracked leaf; its gradient is available after `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Insert an untracked leaf (input data, masks, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse pass from a scalar `loss`, accumulating gradients by the
    /// chain rule into every tracked node. Consumes the graph: a second
    /// call returns [`Error::GraphConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        if !loss_node.requires_grad {
            return Err(Error::DetachedVariable);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            self.nodes[loss.0].value.shape().to_vec(),
            vec![1.0],
        )?);

        // Tape order is topological: node inputs always precede the node.
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad_out) = grads[i].take() else {
                continue;
            };
            ops::accumulate_backward(&self.nodes, i, &grad_out, &mut grads)?;
            grads[i] = Some(grad_out);
        }

        self.grads = grads;
        Ok(())
    }
}

pub(crate) fn accumulate(target: &mut Option<Tensor>, shape: &[usize], update: impl FnOnce(&mut [f64])) {
    let t = target.get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    update(t.data_mut());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_product_must_match() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(2.5);
        assert!(s.is_scalar());
        assert_eq!(s.item().unwrap(), 2.5);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let r = g.relu(w).unwrap();
        let loss = g.scalar_mean(r).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let r = g.relu(w).unwrap();
        assert!(matches!(g.backward(r), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn detached_loss_is_rejected() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let loss = g.scalar_mean(c).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::DetachedVariable)));
    }

    // loss = mean(relu(w)) with w = [1, -1] -> grad(w) = [0.5, 0]
    #[test]
    fn mean_relu_grad_is_piecewise_linear() {
        let mut g = Graph::new();
        let w = g.param(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let r = g.relu(w).unwrap();
        let loss = g.scalar_mean(r).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[0.5, 0.0]);
    }
}
