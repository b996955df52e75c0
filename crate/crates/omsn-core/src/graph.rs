//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns an append-only arena of nodes. Leaves hold parameters,
//! buffers, and inputs; every operation appends a node recording its parents
//! and a backward rule. Since parents always precede children on the tape,
//! walking it in reverse index order is a valid topological sweep.
//!
//! Training reuses one graph: parameters occupy a permanent prefix, each step
//! appends activation nodes, and [`Graph::truncate`] drops them afterwards.

use crate::element::Element;
use crate::tensor::{shape_err, Tensor, TensorError};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for one operation.
///
/// Given the gradient flowing into the node and the parent values, returns
/// one gradient contribution per parent. Entries where `needs` is false may
/// be `None`; producing them anyway is allowed but wasted work.
pub trait Backward<T: Element> {
    fn backward(
        &self,
        grad_out: &Tensor<T>,
        parents: &[&Tensor<T>],
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Element> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<VarId>,
    backward: Option<Box<dyn Backward<T>>>,
}

/// Computation tape.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tape position marker; pass to [`Graph::truncate`] to drop nodes
    /// appended after it.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    /// New leaf that participates in differentiation.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> VarId {
        self.push(value, requires_grad, Vec::new(), None)
    }

    /// New leaf excluded from differentiation (inputs, targets, buffers).
    pub fn constant(&mut self, value: Tensor<T>) -> VarId {
        self.push(value, false, Vec::new(), None)
    }

    pub(crate) fn push_op(
        &mut self,
        value: Tensor<T>,
        parents: Vec<VarId>,
        backward: Box<dyn Backward<T>>,
    ) -> VarId {
        let requires = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, requires, parents, if requires { Some(backward) } else { None })
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        parents: Vec<VarId>,
        backward: Option<Box<dyn Backward<T>>>,
    ) -> VarId {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            parents,
            backward,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Replace a node's value in place (optimizer updates, running statistics).
    /// The new value must keep the node's shape.
    pub fn set_value(&mut self, id: VarId, value: Tensor<T>) {
        assert_eq!(
            self.nodes[id.0].value.shape(),
            value.shape(),
            "set_value must preserve shape"
        );
        self.nodes[id.0].value = value;
    }

    pub fn value_mut(&mut self, id: VarId) -> &mut Tensor<T> {
        &mut self.nodes[id.0].value
    }

    pub fn grad(&self, id: VarId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Whether any parent of a prospective op needs gradients.
    pub(crate) fn any_requires_grad(&self, parents: &[VarId]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar root. Accumulates gradients into every
    /// reachable node with `requires_grad`.
    pub fn backward(&mut self, root: VarId) -> Result<(), TensorError> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(shape_err(
                "backward",
                "a scalar (single-element) root",
                format!("{:?}", root_value.shape()),
            ));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(TensorError::InvalidArgument(
                "backward root does not require gradients".into(),
            ));
        }
        let seed = Tensor::full(self.nodes[root.0].value.shape(), T::one());
        self.accumulate(root, seed);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let Some(op) = self.nodes[i].backward.take() else {
                continue;
            };
            let grad = self.nodes[i].grad.take().expect("grad checked above");
            let parent_ids = self.nodes[i].parents.clone();
            let contributions = {
                let parent_vals: Vec<&Tensor<T>> =
                    parent_ids.iter().map(|p| &self.nodes[p.0].value).collect();
                let needs: Vec<bool> = parent_ids
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect();
                op.backward(&grad, &parent_vals, &needs)
            };
            assert_eq!(
                contributions.len(),
                parent_ids.len(),
                "backward rule must answer for every parent"
            );
            for (pid, contrib) in parent_ids.iter().zip(contributions) {
                if let Some(c) = contrib {
                    if self.nodes[pid.0].requires_grad {
                        self.accumulate(*pid, c);
                    }
                }
            }
            self.nodes[i].grad = Some(grad);
            self.nodes[i].backward = Some(op);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: VarId, contribution: Tensor<T>) {
        let node = &mut self.nodes[id.0];
        assert_eq!(
            node.value.shape(),
            contribution.shape(),
            "gradient shape must match value shape"
        );
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contribution.data()) {
                    *a += *b;
                }
            }
            None => node.grad = Some(contribution),
        }
    }
}
