//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the tape; node creation order is a valid
//! topological order, so backward simply walks the tape in reverse.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::element::Element;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::TensorError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to a node's backward rule.
pub(crate) struct BackwardArgs<'a, T> {
    pub parents: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// Which parents need a gradient; rules may skip the others.
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

#[derive(Debug, Clone, PartialEq, Eq)]
enum NodeKind {
    Input { requires_grad: bool },
    Param(String),
    Op(&'static str),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    kind: NodeKind,
}

/// Options restricting a backward pass.
#[derive(Default)]
pub struct BackwardOptions<'a> {
    /// Nodes treated as constants: gradients do not flow through them.
    pub stop: &'a [Var],
    /// When set, only parameters whose name passes the filter receive gradients.
    pub param_filter: Option<&'a dyn Fn(&str) -> bool>,
}

/// Gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a leaf node (input with `requires_grad` or parameter).
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var.0)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Leaf gradients in tape order.
    pub fn leaves(&self) -> Vec<(Var, &Tensor<T>)> {
        let mut v: Vec<_> = self.leaves.iter().map(|(&i, t)| (Var(i), t)).collect();
        v.sort_by_key(|(var, _)| *var);
        v
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    param_nodes: BTreeMap<String, usize>,
    trainable: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_nodes: BTreeMap::new(), trainable: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters registered while this is `false` enter the tape as constants.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Constant data input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf input, optionally tracked for gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            kind: NodeKind::Input { requires_grad },
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers parameter `name` from `store`; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, TensorError> {
        if let Some(&idx) = self.param_nodes.get(name) {
            return Ok(Var(idx));
        }
        let value = store
            .shared(name)
            .ok_or_else(|| TensorError::MissingParameter(name.to_string()))?;
        let kind = if self.trainable {
            NodeKind::Param(name.to_string())
        } else {
            NodeKind::Input { requires_grad: false }
        };
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, kind });
        let idx = self.nodes.len() - 1;
        self.param_nodes.insert(name.to_string(), idx);
        Ok(Var(idx))
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        parents: &[Var],
        backward: BackwardFn<T>,
    ) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: Some(backward),
            kind: NodeKind::Op(name),
        });
        Var(self.nodes.len() - 1)
    }

    /// Name of the operation that produced `var`, for diagnostics.
    pub fn op_name(&self, var: Var) -> &str {
        match &self.nodes[var.0].kind {
            NodeKind::Input { .. } => "input",
            NodeKind::Param(name) => name,
            NodeKind::Op(name) => name,
        }
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        self.backward_with(loss, &BackwardOptions::default())
    }

    /// Reverse-mode accumulation from the scalar `loss`.
    pub fn backward_with(&self, loss: Var, opts: &BackwardOptions<'_>) -> Result<Gradients<T>, TensorError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut stopped = vec![false; n];
        for s in opts.stop {
            if s.0 < n {
                stopped[s.0] = true;
            }
        }
        // Forward sweep: which nodes lead back to a differentiable leaf.
        let mut needs = vec![false; n];
        for i in 0..n {
            if stopped[i] {
                continue;
            }
            let node = &self.nodes[i];
            needs[i] = match &node.kind {
                NodeKind::Input { requires_grad } => *requires_grad,
                NodeKind::Param(name) => opts.param_filter.is_none_or(|f| f(name)),
                NodeKind::Op(_) => node.parents.iter().any(|&p| needs[p]),
            };
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if needs[loss.0] {
            grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        }
        let mut leaves = HashMap::new();
        let mut params = BTreeMap::new();
        for i in (0..n).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.kind {
                NodeKind::Input { .. } => {
                    leaves.insert(i, grad);
                    continue;
                }
                NodeKind::Param(name) => {
                    params.insert(name.clone(), grad.clone());
                    leaves.insert(i, grad);
                    continue;
                }
                NodeKind::Op(_) => {}
            }
            let backward = node.backward.as_ref().expect("op nodes carry a backward rule");
            let args = BackwardArgs {
                parents: node.parents.iter().map(|&p| self.nodes[p].value.as_ref()).collect(),
                output: &node.value,
                grad: &grad,
                needs: node.parents.iter().map(|&p| needs[p]).collect(),
            };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !needs[p] {
                    continue;
                }
                if g.shape() != self.nodes[p].value.shape() {
                    return Err(TensorError::ShapeMismatch(format!(
                        "gradient shape {:?} does not match node shape {:?} in {:?}",
                        g.shape(),
                        self.nodes[p].value.shape(),
                        node.kind
                    )));
                }
                match &mut grads[p] {
                    Some(acc) => acc.accumulate(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { leaves, params })
    }
}
