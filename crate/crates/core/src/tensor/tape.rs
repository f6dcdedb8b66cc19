//! Recording tape for reverse-mode differentiation. Every primitive
//! application appends a node holding the output value, its parents and
//! whatever the backward pass needs; `backward` replays the tape once in
//! reverse and accumulates vector-Jacobian products.

use super::ops::{Op, Saved};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

struct Node {
    value: Tensor,
    requires_grad: bool,
    parents: Vec<Var>,
    op: Option<Op>,
    saved: Saved,
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    check_finite: bool,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            check_finite: false,
            grad_enabled: true,
        }
    }

    /// Error out of any primitive whose output contains NaN or infinity.
    pub fn with_finite_checks() -> Self {
        Tape {
            check_finite: true,
            ..Tape::new()
        }
    }

    /// Forward-only tape: `param` registers plain constants, so no node
    /// tracks gradients and backward is unavailable.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: Vec::new(),
            op: None,
            saved: Saved::None,
        });
        Var(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: &Tensor) -> Var {
        let trainable = self.grad_enabled;
        self.leaf(value.clone(), trainable)
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record one primitive application.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(TensorError::UnknownVar(v.0));
            }
        }
        let tensors: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, saved) = op.forward(&tensors)?;
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            parents: inputs.to_vec(),
            op: Some(op),
            saved,
        });
        Ok(Var(id))
    }

    /// Reverse sweep from a scalar root. Consumes the tape: a second call
    /// (or further recording) is an error.
    pub fn backward(&mut self, root: Var) -> Result<GradientMap> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if root.0 >= self.nodes.len() {
            return Err(TensorError::UnknownVar(root.0));
        }
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::NonScalarRoot { shape: root_shape });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(root_shape, vec![1.0]).expect("scalar seed"));

        for id in (0..=root.0).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                if let Some(op) = &node.op {
                    let parents = node.parents.clone();
                    let inputs: Vec<&Tensor> =
                        parents.iter().map(|v| &self.nodes[v.0].value).collect();
                    let needs: Vec<bool> = parents
                        .iter()
                        .map(|v| self.nodes[v.0].requires_grad)
                        .collect();
                    let partials = op.vjp(&grad, &inputs, &node.value, &node.saved, &needs)?;
                    for (parent, partial) in parents.iter().zip(partials) {
                        let Some(partial) = partial else { continue };
                        match &mut grads[parent.0] {
                            Some(existing) => {
                                for (dst, src) in
                                    existing.data_mut().iter_mut().zip(partial.data())
                                {
                                    *dst += src;
                                }
                            }
                            slot @ None => *slot = Some(partial),
                        }
                    }
                }
            }
            grads[id] = Some(grad);
        }

        // Leaves never reached by the sweep get zero gradients.
        for (id, node) in self.nodes.iter().enumerate() {
            if node.op.is_none() && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(GradientMap { grads })
    }

    // ---- convenience builders -------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        self.apply(Op::Conv2d, &[x, kernel])
    }

    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::MaxPool2d, &[x])
    }

    pub fn upsample2d(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::NearestUpsample2d, &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, inputs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x])
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Mean { axes: axes.to_vec() }, &[x])
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.apply(Op::Sum { axes: axes.to_vec() }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank == 0 {
            return Ok(x);
        }
        let axes: Vec<usize> = (0..rank).collect();
        self.sum(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank == 0 {
            return Ok(x);
        }
        let axes: Vec<usize> = (0..rank).collect();
        self.mean(x, &axes)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Square, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[x])
    }

    pub fn log(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.apply(Op::Log { floor }, &[x])
    }

    pub fn pow_scalar(&mut self, x: Var, exponent: f64) -> Result<Var> {
        self.apply(Op::PowScalar { exponent }, &[x])
    }

    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Broadcast { shape: shape.to_vec() }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Op::Transpose { perm: perm.to_vec() }, &[x])
    }

    pub fn slice(&mut self, x: Var, starts: &[usize], ends: &[usize]) -> Result<Var> {
        self.apply(
            Op::Slice {
                starts: starts.to_vec(),
                ends: ends.to_vec(),
            },
            &[x],
        )
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        self.apply(
            Op::GatherRows {
                indices: indices.to_vec(),
            },
            &[x],
        )
    }

    /// a * x + b with plain scalar coefficients.
    pub fn scale_add(&mut self, x: Var, a: f64, b: f64) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let mut out = x;
        if a != 1.0 {
            let c = self.scalar_const(a);
            let c = self.broadcast(c, &shape)?;
            out = self.mul(out, c)?;
        }
        if b != 0.0 {
            let c = self.scalar_const(b);
            let c = self.broadcast(c, &shape)?;
            out = self.add(out, c)?;
        }
        Ok(out)
    }
}

/// Gradients keyed by tape variable, produced by one backward sweep.
#[derive(Debug)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 4.0, 0.0, -0.5]).unwrap(),
            true,
        );
        let s = tape.sum_all(x).unwrap();
        let grads = tape.backward(s).unwrap();
        let gx = grads.grad(x).unwrap();
        assert_eq!(gx.shape(), &[2, 3]);
        assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mse_at_minimum_has_zero_gradient() {
        let mut tape = Tape::new();
        let vals = vec![0.5, -0.25, 1.5, 0.0];
        let x = tape.leaf(Tensor::new(vec![4], vals.clone()).unwrap(), true);
        let y = tape.constant(Tensor::new(vec![4], vals).unwrap());
        let d = tape.sub(x, y).unwrap();
        let sq = tape.square(d).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_dot_gradient_matches_hand_chain_rule() {
        // d/dw sigmoid(w . x) at w = 0, x = [1, 2]: sigma'(0) * x = [0.25, 0.5]
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), true);
        let x = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let dot = tape.matmul(w, x).unwrap();
        let y = tape.sigmoid(dot).unwrap();
        let root = tape.sum_all(y).unwrap();
        let grads = tape.backward(root).unwrap();
        let gw = grads.grad(w).unwrap();
        assert!((gw.data()[0] - 0.25).abs() < 1e-12);
        assert!((gw.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarRoot { .. }));
    }

    #[test]
    fn tape_is_consumed_by_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::TapeConsumed)));
        assert!(matches!(tape.square(x), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let unused = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let y = tape.square(x).unwrap();
        let grads = tape.backward(y).unwrap();
        let gu = grads.grad(unused).unwrap();
        assert_eq!(gu.shape(), &[3]);
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // y = x*x + x*x -> dy/dx = 4x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let a = tape.mul(x, x).unwrap();
        let b = tape.mul(x, x).unwrap();
        let y = tape.add(a, b).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.grad(x).unwrap().item(), 12.0);
    }

    #[test]
    fn finite_check_catches_non_finite_output() {
        let mut tape = Tape::with_finite_checks();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        // log of a clamped zero is finite; log of true zero without floor errors early
        let y = tape.log(x, 1e-12).unwrap();
        assert!(tape.value(y).is_finite());
        let big = tape.constant(Tensor::scalar(1e308));
        let sq = tape.mul(big, big);
        assert!(matches!(sq, Err(TensorError::NonFinite { .. })));
    }
}
