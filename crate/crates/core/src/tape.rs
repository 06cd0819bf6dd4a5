//! Explicit reverse-mode tape over the registered [`Op`]s.

use crate::error::{invalid, Result};
use crate::ops::{self, Op};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<T> {
    value: Tensor<T>,
    op: Option<(Op, Vec<Var>)>,
    needs_grad: bool,
}

/// Append-only record of a forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None, true)
    }

    /// Records a leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Option<(Op, Vec<Var>)>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = ops::forward(&op, &values)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(out, Some((op, inputs.to_vec())), needs_grad))
    }

    pub fn apply1(&mut self, op: Op, x: Var) -> Result<Var> {
        self.apply(op, &[x])
    }

    /// Reverse sweep from the scalar `root`, seeded with gradient 1.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let seed = self.value(root);
        if seed.len() != 1 {
            return invalid(format!("backward root must be a scalar, got {:?}", seed.shape()));
        }
        self.backward_with(root, Tensor::full(seed.shape(), T::one())?)
    }

    /// Reverse sweep from `root` seeded with an explicit upstream gradient.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.value(root).expect_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some((op, inputs)) = &node.op else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let local = ops::backward(op, &values, &node.value, &g)?;
            for (v, gi) in inputs.iter().zip(local) {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot => *slot = Some(gi),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| like.zeros_like())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap());
        let sq = tape.apply(Op::Mul, &[x, x]).unwrap();
        let s = tape.apply1(Op::Sum, sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let c = tape.constant(Tensor::full(&[3], 2.0).unwrap());
        let p = tape.param(Tensor::full(&[3], 1.0).unwrap());
        let y = tape.apply(Op::Mul, &[c, p]).unwrap();
        let m = tape.apply1(Op::Mean, y).unwrap();
        let g = tape.backward(m).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_some());
    }
}
