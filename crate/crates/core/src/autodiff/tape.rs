use crate::error::{shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

use super::conv::ConvAlgo;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs handed to an op's backward rule.
pub struct BackwardCtx<'a, T> {
    pub grad_out: &'a Tensor<T>,
    pub inputs: &'a [&'a Tensor<T>],
    pub output: &'a Tensor<T>,
    /// Which inputs need a gradient. Rules may return `None` for the others.
    pub needs: &'a [bool],
}

/// Hand-derived vector-Jacobian product of one recorded op.
pub trait Backward<T: Element>: Send + Sync {
    fn name(&self) -> &'static str;

    /// One entry per input, each shaped like that input.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Element> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Records values and backward rules in creation order; creation order is a
/// topological order of the graph, so backward is a single reverse sweep.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    recording: bool,
    conv_algo: ConvAlgo,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), recording: true, conv_algo: ConvAlgo::Blocked }
    }

    /// A tape that never records backward rules; every value is a constant.
    pub fn inference() -> Self {
        Tape { recording: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn conv_algo(&self) -> ConvAlgo {
        self.conv_algo
    }

    pub fn set_conv_algo(&mut self, algo: ConvAlgo) {
        self.conv_algo = algo;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.nodes.push(Node { value, inputs: Vec::new(), op: None, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn op_name(&self, var: Var) -> &'static str {
        self.nodes[var.0].op.as_ref().map_or("leaf", |op| op.name())
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads[var.0].as_ref()
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads[var.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Record the result of an op. Fails if `value` holds NaN or infinity.
    pub fn push_op(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        op: impl Backward<T> + 'static,
    ) -> Result<Var> {
        value.ensure_finite(op.name())?;
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Backward<T>>> =
            if requires_grad { Some(Box::new(op)) } else { None };
        let inputs = if requires_grad { inputs.to_vec() } else { Vec::new() };
        self.nodes.push(Node { value, inputs, op, requires_grad });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(shape_err!("backward root must be scalar, got {:?}", root_value.shape()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut adjoints: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        adjoints[root.0] = Some(Tensor::ones(root_value.shape().to_vec()));

        for id in (0..=root.0).rev() {
            let Some(grad_out) = adjoints[id].take() else { continue };
            let node = &self.nodes[id];
            let Some(op) = node.op.as_ref() else {
                if node.requires_grad {
                    match &mut self.grads[id] {
                        Some(g) => g.add_assign(&grad_out)?,
                        slot => *slot = Some(grad_out),
                    }
                }
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> =
                node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let ctx = BackwardCtx { grad_out: &grad_out, inputs: &inputs, output: &node.value, needs: &needs };
            let input_grads = op.backward(&ctx)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::State(format!(
                    "{} returned {} gradients for {} inputs",
                    op.name(),
                    input_grads.len(),
                    node.inputs.len()
                )));
            }
            for ((input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                if g.shape() != self.nodes[input.0].value.shape() {
                    return Err(shape_err!(
                        "{} produced gradient {:?} for input {:?}",
                        op.name(),
                        g.shape(),
                        self.nodes[input.0].value.shape()
                    ));
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("{} backward", op.name())));
                }
                match &mut adjoints[input.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
