use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees: the forward inputs and output plus the
/// incoming gradient of the output.
pub(crate) struct BackCtx<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a [T],
    pub needs: Vec<bool>,
}

impl<T> BackCtx<'_, T> {
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

/// Reverse rule of a recorded op. Returns one gradient per input, `None`
/// for inputs that do not need one.
pub(crate) trait Backward<T: Real>: Send {
    fn backward(&self, ctx: &BackCtx<'_, T>) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
    name: &'static str,
}

/// Tape of recorded operations. Nodes are appended in execution order, so
/// the node list is always topologically sorted.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    first_non_finite: Option<usize>,
    check_finite: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), first_non_finite: None, check_finite: false }
    }

    /// Scan every produced value for NaN/Inf as it is recorded.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, "input")
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, "param")
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, name: &'static str) -> Var {
        self.record(Node { value, inputs: Vec::new(), rule: None, requires_grad, name })
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        inputs: &[Var],
        rule: impl Backward<T> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let rule: Option<Box<dyn Backward<T>>> =
            if requires_grad { Some(Box::new(rule)) } else { None };
        self.record(Node {
            value,
            inputs: inputs.iter().map(|v| v.0).collect(),
            rule,
            requires_grad,
            name,
        })
    }

    fn record(&mut self, node: Node<T>) -> Var {
        let id = self.nodes.len();
        if self.check_finite && self.first_non_finite.is_none() && !node.value.is_finite() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(node);
        self.grads.push(None);
        Var(id)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].name
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }

    /// First recorded node holding a NaN or infinity, with its op name.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        let id = match self.first_non_finite {
            Some(id) => Some(id),
            None => self.nodes.iter().position(|n| !n.value.is_finite()),
        }?;
        Some((id, self.nodes[id].name))
    }

    /// Propagate `d loss / d node` to every node that requires a gradient.
    /// Gradients of nodes used more than once are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.dims()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(grad) = self.grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(rule) = &node.rule {
                let needs: Vec<bool> =
                    node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
                let ctx = BackCtx {
                    inputs: node.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                    output: &node.value,
                    grad: &grad,
                    needs,
                };
                let input_grads = rule.backward(&ctx);
                debug_assert_eq!(input_grads.len(), node.inputs.len());
                let inputs = node.inputs.clone();
                for (&input, g) in inputs.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !self.nodes[input].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(g.len(), self.nodes[input].value.len());
                    match &mut self.grads[input] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        slot => *slot = Some(g),
                    }
                }
            }
            // leaves keep their gradient
            if self.nodes[id].rule.is_none() && self.nodes[id].requires_grad {
                self.grads[id] = Some(grad);
            }
        }
        Ok(())
    }
}
