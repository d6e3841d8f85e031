use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation whose backward rule is supplied by the caller rather than derived
/// from the forward computation. The forward value is computed eagerly by the
/// caller and handed to [`Graph::custom`] together with this rule.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// One entry per input, in the order the inputs were registered. `None`
    /// means the input receives no gradient from this op.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

pub(super) enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRowBias {
        x: usize,
        bias: usize,
    },
    Sum(usize),
    Mean(usize),
    Silu(usize),
    SoftmaxRows(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<T>,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        seq: usize,
        probs: Vec<T>,
    },
    Custom {
        inputs: Vec<usize>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRowBias { x, bias } => vec![*x, *bias],
            Op::Scale(a, _) | Op::Sum(a) | Op::Mean(a) | Op::Silu(a) | Op::SoftmaxRows(a) => {
                vec![*a]
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::GatherRows { x, .. } => vec![*x],
            Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

pub(super) struct Node<T: Scalar> {
    pub(super) value: Tensor<T>,
    pub(super) op: Op<T>,
    pub(super) requires_grad: bool,
}

/// Eager computation record. Nodes are appended in execution order, so the
/// node list is already topologically sorted.
pub struct Graph<T: Scalar> {
    pub(super) nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    retained: Vec<usize>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            retained: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that will receive a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant by backward.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Keep the gradient of an interior node after backward. Leaf gradients
    /// are always kept.
    pub fn retain_grad(&mut self, v: Var) {
        self.retained.push(v.0);
    }

    /// Gradient of the backward root with respect to a requires-grad leaf or a
    /// retained interior node. `None` before backward, for constants, and for
    /// nodes the root does not depend on.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Records an operation whose value was computed by the caller and whose
    /// backward rule is `op`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = ids.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(output, Op::Custom { inputs: ids, op }, rg)
    }

    pub(super) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(super) fn push_op(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.push(value, op, rg)
    }

    /// Reverse-mode sweep from a scalar root. Each node is visited once, in
    /// reverse creation order; gradients from multiple consumers are summed.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[root.0] = Some(Tensor::full(root_value.shape().to_vec(), T::one()));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let g = if self.retained.contains(&id) {
                grads[id].clone()
            } else {
                grads[id].take()
            };
            let Some(g) = g else {
                continue;
            };
            for (parent, pg) in self.node_backward(id, &g) {
                if !self.nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap());
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(TensorError::BackwardTwice));
    }

    #[test]
    fn retained_interior_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(vec![2], &[1.0, -2.0]).unwrap());
        let a = g.scale(x, 3.0);
        let b = g.mul(a, a).unwrap();
        let s = g.sum(b);
        g.retain_grad(a);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[6.0, -12.0]);
        assert!(g.grad(b).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[18.0, -36.0]);
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(vec![2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_gives_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = sum(3x) + sum(x*x); using x twice sums the two single-use gradients.
        let data = [0.5, -1.5, 2.0];
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(vec![3], &data).unwrap());
        let a = g.scale(x, 3.0);
        let sa = g.sum(a);
        let b = g.mul(x, x).unwrap();
        let sb = g.sum(b);
        let f = g.add(sa, sb).unwrap();
        g.backward(f).unwrap();
        let got = g.grad(x).unwrap().data().to_vec();
        for (gi, xi) in got.iter().zip(data) {
            assert_eq!(*gi, 3.0 + 2.0 * xi);
        }
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::from_f64(vec![2], &[3.0, 4.0]).unwrap());
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    struct DoubleGrad;

    impl CustomOp<f64> for DoubleGrad {
        fn name(&self) -> &'static str {
            "double_grad"
        }

        fn backward(
            &self,
            _inputs: &[&Tensor<f64>],
            _output: &Tensor<f64>,
            grad: &Tensor<f64>,
        ) -> Vec<Option<Tensor<f64>>> {
            let mut g = grad.clone();
            g.data_mut().iter_mut().for_each(|v| *v *= 2.0);
            vec![Some(g)]
        }
    }

    #[test]
    fn custom_op_supplies_its_own_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        // Forward is the identity, backward doubles: a surrogate, not the true derivative.
        let y = g.custom(&[x], g.value(x).clone(), Box::new(DoubleGrad));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
    }
}
