//! Reverse-mode differentiation tape.
//!
//! Every value produced during a forward pass is appended to the [`Tape`]
//! together with the [`Function`] that knows how to push gradients back to
//! its inputs. Since inputs always exist before the operation that consumes
//! them, the tape is already in topological order and [`Tape::backward`] is a
//! single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a [f64]>,
    pub input_shapes: Vec<&'a [usize]>,
    pub output: &'a [f64],
    pub output_shape: &'a [usize],
    pub grad_output: &'a [f64],
    /// Whether each input wants a gradient; rules may return `None` otherwise.
    pub needs_grad: Vec<bool>,
}

/// Backward rule of a recorded operation.
pub trait Function {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, each the length of that input.
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Result<Vec<Option<Vec<f64>>>>;
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<dyn Function>>,
}

/// Arithmetic used inside convolutions. Values on the tape are always
/// `f64`; `F32` narrows the operands of each convolution, runs it in single
/// precision and widens the result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Single-use recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    conv_precision: Precision,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_conv_precision(precision: Precision) -> Self {
        Self { conv_precision: precision, ..Self::default() }
    }

    pub fn conv_precision(&self) -> Precision {
        self.conv_precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a copy of `t`; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Vec::new(), None)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("constant of shape {shape:?} with {} values", data.len())));
        }
        Ok(self.push(shape, data, false, Vec::new(), None))
    }

    /// Records the output of an operation over `inputs`.
    pub fn record(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Box<dyn Function>,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(shape, data, requires_grad, inputs.to_vec(), Some(op))
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        inputs: Vec<Var>,
        op: Option<Box<dyn Function>>,
    ) -> Var {
        self.nodes.push(Node { shape, data, requires_grad, inputs, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value out as a plain tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape nodes are well formed")
    }

    /// Propagates `∂loss/∂·` to every leaf that requires a gradient.
    ///
    /// A tape can be differentiated once; intermediate gradients are freed as
    /// soon as they have been pushed to their inputs, only leaf gradients are
    /// kept for [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = &self.nodes[loss.0].shape;
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad_output) = self.grads[idx].take() else { continue };
            let needs_grad: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| self.nodes[v.0].data.as_slice()).collect(),
                input_shapes: node.inputs.iter().map(|v| self.nodes[v.0].shape.as_slice()).collect(),
                output: &node.data,
                output_shape: &node.shape,
                grad_output: &grad_output,
                needs_grad,
            };
            let input_grads = op.backward(&ctx)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::shape(format!(
                    "{} returned {} gradients for {} inputs",
                    op.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            let inputs = node.inputs.clone();
            for (input, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                if g.len() != self.nodes[input.0].data.len() {
                    return Err(Error::shape(format!("{} produced a gradient of wrong length", op.name())));
                }
                match &mut self.grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Gradient of the loss with respect to a leaf, after [`Tape::backward`].
    /// `None` when the leaf is not connected to the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_scale_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new([2], vec![1.0, 2.0]).unwrap().with_grad());
        let y = tape.scale(x, 2.0);
        let loss = tape.sum(y);
        assert_eq!(tape.value(loss), &[6.0]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn disconnected_leaf_gets_nothing() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new([2], vec![1.0, 2.0]).unwrap().with_grad());
        let unused = tape.leaf(&Tensor::new([3], vec![1.0; 3]).unwrap().with_grad());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_some());
        assert!(tape.grad(unused).is_none());
    }

    #[test]
    fn shared_use_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new([1], vec![3.0]).unwrap().with_grad());
        let a = tape.scale(x, 2.0);
        let b = tape.add(a, x).unwrap();
        let loss = tape.sum(b);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_is_single_shot() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(1.0).with_grad());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
    }

    #[test]
    fn rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros([2]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }
}
