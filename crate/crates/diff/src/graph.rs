use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this crate.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; the tape only needs the vector-Jacobian product.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// corresponding slot may then be `None`.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>>;

    /// Discrete choices of the forward pass, such as the cell each sample
    /// point falls in. Gradient checks skip probes that change them.
    fn branches(&self, _inputs: &[&Tensor<T>]) -> Vec<i64> {
        Vec::new()
    }
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    AddChannel,
    Scale(T),
    AddScalar,
    Sum,
    Mean,
    Elu,
    Sigmoid,
    Tanh,
    Abs,
    Exp,
    LogClamp(T),
    Reshape,
    Concat,
    Slice { start: usize },
    Crop { top: usize, left: usize },
    Conv2d(ops::conv::ConvGeom),
    ConvTranspose2d(ops::conv::ConvGeom),
    MaxPool { argmax: Vec<usize> },
    AvgPool { k: usize },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    SoftmaxCe { probs: Vec<T>, labels: Vec<usize> },
    Custom(Box<dyn CustomOp<T>>),
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::AddChannel => "add_channel",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Elu => "elu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Abs => "abs",
            Op::Exp => "exp",
            Op::LogClamp(_) => "log",
            Op::Reshape => "reshape",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Crop { .. } => "crop",
            Op::Conv2d(_) => "conv2d",
            Op::ConvTranspose2d(_) => "conv_transpose2d",
            Op::MaxPool { .. } => "maxpool2d",
            Op::AvgPool { .. } => "avgpool2d",
            Op::BatchNorm { .. } => "batchnorm",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Custom(op) => op.name(),
        }
    }
}

/// Identity of a parameter leaf: owning store, index, and whether the
/// binding asked for gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub(crate) struct ParamKey {
    pub store: u64,
    pub index: usize,
    pub tracked: bool,
}

pub(crate) struct Node<T: Scalar> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub inputs: Vec<usize>,
    pub requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so the node
/// list is already topologically sorted.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) param_vars: HashMap<ParamKey, Var>,
    fault: Option<String>,
}

fn sign<T: Scalar>(v: T) -> i64 {
    if v > T::zero() {
        1
    } else if v < T::zero() {
        -1
    } else {
        0
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Corrupts the backward pass of every op named `op_name` by scaling its
    /// input gradients by 1.5. Only meant for exercising gradient checkers.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, op_name: &str) {
        self.fault = Some(op_name.to_string());
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked value: no gradient ever flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Tracked leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub(crate) fn param_leaf(&mut self, key: ParamKey, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.param_vars.get(&key) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad: key.tracked,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(key, v);
        v
    }

    pub(crate) fn push(&mut self, op: Op<T>, inputs: &[Var], value: Tensor<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Saved backward state is dead weight on untracked paths.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Discrete choices made by every recorded op that is only piecewise
    /// smooth (max-pool winners, abs signs, active log clamps, custom-op
    /// branches). Two evaluations with equal signatures lie on the same
    /// smooth piece. Ops on untracked paths are not recorded.
    pub fn branch_signature(&self) -> Vec<i64> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let input = |k: usize| &self.nodes[n.inputs[k]].value;
            let part: Vec<i64> = match &n.op {
                Op::MaxPool { argmax } => argmax.iter().map(|&a| a as i64).collect(),
                Op::Abs => input(0).data().iter().map(|&v| sign(v)).collect(),
                Op::LogClamp(eps) => input(0).data().iter().map(|&v| (v < *eps) as i64).collect(),
                Op::Custom(op) => {
                    let inputs: Vec<&Tensor<T>> = n.inputs.iter().map(|&k| &self.nodes[k].value).collect();
                    op.branches(&inputs)
                }
                _ => continue,
            };
            out.push(i as i64);
            out.push(part.len() as i64);
            out.extend(part);
        }
        out
    }

    /// Records an externally defined op whose forward value is `value`.
    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var], value: Tensor<T>) -> Var {
        self.push(Op::Custom(op), inputs, value)
    }

    /// Reverse sweep from a scalar `loss`. Every node reachable from the
    /// loss is visited exactly once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        let mut leaves: HashMap<usize, Tensor<T>> = HashMap::new();
        if !root.requires_grad {
            return Ok(Gradients { leaves });
        }
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.inputs.is_empty() {
                leaves.insert(id, Tensor::new(node.value.shape(), g)?);
                continue;
            }
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let mut input_grads = self.op_backward(node, &g, &needs);
            if self.fault.as_deref() == Some(node.op.name()) {
                let k = T::lit(1.5);
                for ig in input_grads.iter_mut().flatten() {
                    ig.iter_mut().for_each(|v| *v *= k);
                }
            }
            for (slot, ig) in input_grads.into_iter().enumerate() {
                let Some(ig) = ig else { continue };
                let input = node.inputs[slot];
                if !needs[slot] {
                    continue;
                }
                debug_assert_eq!(ig.len(), self.nodes[input].value.numel(), "{}", node.op.name());
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(Gradients { leaves })
    }

    fn op_backward(&self, node: &Node<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let input = |k: usize| &self.nodes[node.inputs[k]].value;
        let out = &node.value;
        use ops::{conv, elementwise as ew, linalg, loss, norm, pool, shape};
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul => linalg::matmul_backward(input(0), input(1), g, needs),
            Op::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
            Op::Sub => vec![Some(g.to_vec()), Some(g.iter().map(|&v| -v).collect())],
            Op::Mul => ew::mul_backward(input(0), input(1), g, needs),
            Op::AddRow => ew::add_row_backward(input(1), g),
            Op::AddChannel => ew::add_channel_backward(input(0), input(1), g),
            Op::Scale(c) => vec![Some(g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar => vec![Some(g.to_vec())],
            Op::Sum => vec![Some(vec![g[0]; input(0).numel()])],
            Op::Mean => {
                let n = input(0).numel();
                vec![Some(vec![g[0] / T::from_usize(n).unwrap(); n])]
            }
            Op::Elu => ew::elu_backward(input(0), out, g),
            Op::Sigmoid => ew::sigmoid_backward(out, g),
            Op::Tanh => ew::tanh_backward(out, g),
            Op::Abs => ew::abs_backward(input(0), g),
            Op::Exp => vec![Some(out.data().iter().zip(g).map(|(&y, &g)| y * g).collect())],
            Op::LogClamp(eps) => ew::log_clamp_backward(input(0), *eps, g),
            Op::Reshape => vec![Some(g.to_vec())],
            Op::Concat => {
                let shapes: Vec<&[usize]> = node.inputs.iter().map(|&i| self.nodes[i].value.shape()).collect();
                shape::concat_backward(&shapes, g)
            }
            Op::Slice { start } => shape::slice_backward(input(0), out, *start, g),
            Op::Crop { top, left } => shape::crop_backward(input(0), out, *top, *left, g),
            Op::Conv2d(geom) => conv::conv2d_backward(input(0), input(1), geom, g, needs),
            Op::ConvTranspose2d(geom) => conv::conv_transpose2d_backward(input(0), input(1), geom, g, needs),
            Op::MaxPool { argmax } => pool::maxpool_backward(input(0), argmax, g),
            Op::AvgPool { k } => pool::avgpool_backward(input(0), *k, g),
            Op::BatchNorm { xhat, inv_std, train } => {
                norm::batch_norm_backward(input(0), input(1), xhat, inv_std, *train, g, needs)
            }
            Op::SoftmaxCe { probs, labels } => loss::softmax_ce_backward(probs, labels, g),
            Op::Custom(op) => {
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                op.backward(&inputs, out, g, needs)
            }
        }
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub(crate) leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. a tracked leaf; `None` when the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    /// Like [`Gradients::get`] but materializes zeros for unreached leaves.
    pub fn wrt(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
