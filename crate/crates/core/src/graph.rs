//! Tape-style reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] walks it once in reverse.

use crate::error::{Error, Result};
use crate::tensor::{Activation, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Activate(Var, Activation),
    AddRow(Var, Var),
    SubCol(Var, Var),
    Diag(Var),
    Sum(Var),
    Mean(Var),
    LogSoftmaxRows(Var),
    /// Saves the per-row input norms.
    L2NormalizeRows(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::SubCol(a, b) => self.requires(*a) || self.requires(*b),
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Activate(a, _)
            | Op::Diag(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::LogSoftmaxRows(a)
            | Op::L2NormalizeRows(a, _) => self.requires(*a),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds an input tensor. Gradients are reported only for leaves with
    /// `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).add_scalar(s);
        self.push(Op::AddScalar(a), value)
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Var {
        let value = self.value(a).activate(act);
        self.push(Op::Activate(a, act), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activate(a, Activation::Relu)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(Op::AddRow(a, bias), value))
    }

    pub fn sub_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let value = self.value(a).sub_col(self.value(col))?;
        Ok(self.push(Op::SubCol(a, col), value))
    }

    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).diag()?;
        Ok(self.push(Op::Diag(a), value))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mean()?);
        Ok(self.push(Op::Mean(a), value))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).log_softmax_rows()?;
        Ok(self.push(Op::LogSoftmaxRows(a), value))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let norms = x
            .data()
            .chunks(x.cols().max(1))
            .map(crate::tensor::norm)
            .collect();
        let value = x.l2_normalize_rows()?;
        Ok(self.push(Op::L2NormalizeRows(a, norms), value))
    }

    /// Propagates `∂root/∂node` back through the graph.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::contract(format!(
                "backward from non-scalar root of shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(root_value.shape(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads)?;
            grads[idx] = Some(upstream);
        }

        // Only leaves that asked for gradients keep them.
        for (idx, g) in grads.iter_mut().enumerate() {
            let node = &self.nodes[idx];
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                *g = None;
            } else if g.is_none() {
                *g = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.requires(v) {
            return Ok(());
        }
        grads[v.0] = Some(match grads[v.0].take() {
            Some(existing) => existing.add(&g)?,
            None => g,
        });
        Ok(())
    }

    fn propagate(
        &self,
        node: &Node<T>,
        up: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires(*a) {
                    let g = up.matmul(&self.value(*b).transpose()?)?;
                    self.accumulate(grads, *a, g)?;
                }
                if self.requires(*b) {
                    let g = self.value(*a).transpose()?.matmul(up)?;
                    self.accumulate(grads, *b, g)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, up.transpose()?)?,
            Op::Add(a, b) => {
                self.accumulate(grads, *a, up.clone())?;
                self.accumulate(grads, *b, up.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, up.clone())?;
                self.accumulate(grads, *b, up.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    self.accumulate(grads, *a, up.mul(self.value(*b))?)?;
                }
                if self.requires(*b) {
                    self.accumulate(grads, *b, up.mul(self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, up.scale(*s))?,
            Op::AddScalar(a) => self.accumulate(grads, *a, up.clone())?,
            Op::Activate(a, act) => {
                let g = match act {
                    Activation::Tanh => up.mul(&node.value.map(|y| T::one() - y * y))?,
                    // Subgradient 0 at the kink.
                    Activation::Relu => up.mul(&self.value(*a).map(|x| {
                        if x > T::zero() {
                            T::one()
                        } else {
                            T::zero()
                        }
                    }))?,
                };
                self.accumulate(grads, *a, g)?;
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, up.clone())?;
                if self.requires(*bias) {
                    let n = up.cols();
                    let mut col_sums = vec![0.0f64; n];
                    for row in up.data().chunks(n) {
                        for (s, v) in col_sums.iter_mut().zip(row) {
                            *s += v.as_f64();
                        }
                    }
                    let g = Tensor::new(
                        self.value(*bias).shape().to_vec(),
                        col_sums.into_iter().map(T::from_f64).collect(),
                    )?;
                    self.accumulate(grads, *bias, g)?;
                }
            }
            Op::SubCol(a, col) => {
                self.accumulate(grads, *a, up.clone())?;
                if self.requires(*col) {
                    let n = up.cols();
                    let sums = up
                        .data()
                        .chunks(n)
                        .map(|row| {
                            let mut s = 0.0f64;
                            for v in row {
                                s += v.as_f64();
                            }
                            T::from_f64(-s)
                        })
                        .collect();
                    let g = Tensor::new(self.value(*col).shape().to_vec(), sums)?;
                    self.accumulate(grads, *col, g)?;
                }
            }
            Op::Diag(a) => {
                let n = up.len();
                let mut g = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    g.data_mut()[i * n + i] = up.data()[i];
                }
                self.accumulate(grads, *a, g)?;
            }
            Op::Sum(a) => {
                let g = Tensor::full(self.value(*a).shape(), up.item()?);
                self.accumulate(grads, *a, g)?;
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let v = T::from_f64(up.item()?.as_f64() / x.len() as f64);
                self.accumulate(grads, *a, Tensor::full(x.shape(), v))?;
            }
            Op::LogSoftmaxRows(a) => {
                // dx = dy − softmax · Σ dy, per row.
                let y = &node.value;
                let n = y.cols();
                let mut g = Vec::with_capacity(y.len());
                for (y_row, up_row) in y.data().chunks(n).zip(up.data().chunks(n)) {
                    let mut total = 0.0f64;
                    for v in up_row {
                        total += v.as_f64();
                    }
                    for (yv, uv) in y_row.iter().zip(up_row) {
                        g.push(T::from_f64(uv.as_f64() - yv.as_f64().exp() * total));
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), g)?)?;
            }
            Op::L2NormalizeRows(a, norms) => {
                // dx = (dy − y·⟨y, dy⟩) / ‖x‖, per row.
                let y = &node.value;
                let n = y.cols().max(1);
                let mut g = Vec::with_capacity(y.len());
                for ((y_row, up_row), &nrm) in
                    y.data().chunks(n).zip(up.data().chunks(n)).zip(norms)
                {
                    let proj = crate::tensor::dot(y_row, up_row);
                    for (yv, uv) in y_row.iter().zip(up_row) {
                        g.push(T::from_f64((uv.as_f64() - yv.as_f64() * proj) / nrm));
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), g)?)?;
            }
        }
        Ok(())
    }
}

/// Gradients of a scalar root with respect to the graph's trainable leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a `requires_grad` leaf; `None` for anything else.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn product_rule() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.param(Tensor::scalar(-2.0));
        let z = g.mul(x, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item().unwrap(), -2.0);
        assert_eq!(grads.get(y).unwrap().item().unwrap(), 3.0);
    }

    #[test]
    fn constant_root_gives_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let c = g.constant(Tensor::scalar(5.0));
        let grads = g.backward(c).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.0));
        let c = g.constant(Tensor::scalar(2.0));
        let z = g.mul(x, c).unwrap();
        let grads = g.backward(z).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(z).is_none());
    }

    fn two_layer(
        g: &mut Graph<f64>,
        x: Var,
        w1: Var,
        b1: Var,
        w2: Var,
        readout: Var,
        act: Activation,
    ) -> Result<Var> {
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.activate(h, act);
        let o = g.matmul(h, w2)?;
        let o = g.l2_normalize_rows(o)?;
        let weighted = g.mul(o, readout)?;
        Ok(g.sum(weighted))
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand_t = |shape: &[usize]| {
                let n: usize = shape.iter().product();
                Tensor::<f64>::new(
                    shape.to_vec(),
                    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            };
            // Small inputs keep third derivatives, and so the O(h²) truncation
            // error, well below the gradient scale.
            let x = rand_t(&[3, 4]).scale(0.2);
            let w1 = rand_t(&[4, 5]);
            let b1 = rand_t(&[5]);
            let w2 = rand_t(&[5, 3]);
            let readout = rand_t(&[3, 3]);
            let f = |w: &Tensor<f64>| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let w1v = g.param(w.clone());
                let b1v = g.constant(b1.clone());
                let w2v = g.constant(w2.clone());
                let rv = g.constant(readout.clone());
                let root = two_layer(&mut g, xv, w1v, b1v, w2v, rv, Activation::Tanh).unwrap();
                let v = g.value(root).item().unwrap();
                let grads = g.backward(root).unwrap();
                (v, grads.get(w1v).unwrap().clone())
            };
            let err = grad_check(f, &w1, 1e-3);
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn loss_pieces_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = Tensor::<f64>::matrix(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let f = |s: &Tensor<f64>| {
            let mut g = Graph::new();
            let sv = g.param(s.clone());
            let ls = g.log_softmax_rows(sv).unwrap();
            let d = g.diag(ls).unwrap();
            let lm = g.mean(d).unwrap();
            let h = g.add_scalar(sv, 0.3);
            let h = g.sub_col(h, d).unwrap();
            let t = g.transpose(h).unwrap();
            let r = g.sub(t, sv).unwrap();
            let r = g.scale(r, 0.5);
            let r = g.sum(r);
            let root = g.add(lm, r).unwrap();
            let v = g.value(root).item().unwrap();
            (v, g.backward(root).unwrap().get(sv).unwrap().clone())
        };
        let err = grad_check(f, &s, 1e-4);
        assert!(err < 1e-6, "{err}");
    }
}
