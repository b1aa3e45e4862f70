//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each recorded node keeps
//! its value and the [`Function`] that produced it; [`Tape::backward`] walks
//! the nodes once in reverse insertion order, which is a valid reverse
//! topological order because a node can only reference earlier nodes.
//!
//! The same walk with [`Function::bound_backward`] in place of the adjoint
//! propagates element-wise Jacobian upper bounds (absolute coefficients for
//! linear layers, derivative bound 1 for the supported nonlinearities).

mod gradcheck;
mod ops;

use std::collections::HashMap;

pub use gradcheck::{finite_diff_check, finite_diff_check_coords, GradCheck};
pub use ops::{add, linear, mul, scale, select_channel, sub, sum, weighted_sum};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    /// Handle for the node at `index` on some tape.
    pub fn from_index(index: usize) -> Self {
        Self(index)
    }
}

/// Per-input gradient contributions; `None` where no gradient is wanted.
pub type InputGrads<T> = Vec<Option<Tensor<T>>>;

/// A recorded primitive with its adjoint rule.
pub trait Function<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<Var>;

    /// Vector-Jacobian product: given `d(out)`, return `d(input)` for every
    /// input flagged in `wanted` (same order as [`Function::inputs`]).
    fn backward(
        &self,
        ctx: &Ctx<'_, T>,
        grad: &Tensor<T>,
        wanted: &[bool],
    ) -> Result<InputGrads<T>>;

    /// Same contract as `backward`, but with every Jacobian entry replaced by
    /// an input-independent upper bound on its magnitude. `bound` is
    /// non-negative and so is every returned tensor.
    fn bound_backward(
        &self,
        _ctx: &Ctx<'_, T>,
        _bound: &Tensor<T>,
        _wanted: &[bool],
    ) -> Result<InputGrads<T>> {
        Err(Error::UnsupportedBound(self.name()))
    }
}

/// Read access to recorded values during a backward walk.
pub struct Ctx<'a, T> {
    tape: &'a Tape<T>,
    output: Var,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn value(&self, var: Var) -> &'a Tensor<T> {
        self.tape.value(var)
    }

    pub fn output(&self) -> &'a Tensor<T> {
        self.tape.value(self.output)
    }
}

struct Node<T> {
    value: Tensor<T>,
    func: Option<Box<dyn Function<T>>>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node; gradients are reported for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            func: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that takes part in differentiation.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Record `func` as having produced `value`.
    pub fn push(&mut self, value: Tensor<T>, func: Box<dyn Function<T>>) -> Var {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            panic!("{}", Error::NonFinite(func.name().to_string()));
        }
        let requires_grad = func.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            func: Some(func),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of `<seed, output>` with respect to every leaf that requires
    /// grad. Consumes the tape.
    pub fn backward(self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.walk(output, seed, false)
    }

    /// Element-wise Jacobian upper bound of `sum(output)` with respect to
    /// every leaf that requires grad (seed of all ones). Consumes the tape.
    pub fn backward_bound(self, output: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let seed = Tensor::ones(self.value(output).shape());
        self.walk(output, seed, true)
    }

    fn walk(self, output: Var, seed: Tensor<T>, bound: bool) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::contract("output var does not belong to this tape"));
        }
        seed.expect_shape(self.value(output).shape(), "backward seed")?;

        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut leaves = HashMap::new();

        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(func) = &node.func else {
                leaves.insert(Var(idx), grad);
                continue;
            };
            let inputs = func.inputs();
            let wanted: Vec<bool> = inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let ctx = Ctx {
                tape: &self,
                output: Var(idx),
            };
            let contributions = if bound {
                func.bound_backward(&ctx, &grad, &wanted)?
            } else {
                func.backward(&ctx, &grad, &wanted)?
            };
            for ((var, contrib), want) in inputs.iter().zip(contributions).zip(&wanted) {
                let (Some(contrib), true) = (contrib, *want) else {
                    continue;
                };
                contrib.expect_shape(self.nodes[var.0].value.shape(), func.name())?;
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { map: leaves })
    }
}

/// Leaf gradients produced by one backward walk.
#[derive(Debug)]
pub struct Gradients<T> {
    map: HashMap<Var, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.map.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.map.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
