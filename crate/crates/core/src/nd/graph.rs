//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in evaluation order, so the node list
//! is topologically sorted by construction. [`Graph::backward`] replays it in
//! reverse and accumulates vector-Jacobian products into each node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nd::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative at `x`; the ReLU kink takes derivative 0.
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Softplus => sigmoid(x),
        }
    }

    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::Relu)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// sign with sign(0) = 0.
pub fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Log-softmax of one row, computed with max subtraction.
pub fn log_softmax<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

pub fn softmax<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// KL(softmax(p) || softmax(q)) for one pair of logit rows.
pub fn kl_logits<T: Real>(p: &[T], q: &[T]) -> T {
    let lp = log_softmax(p);
    let lq = log_softmax(q);
    lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum()
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MulConst(NodeId, Tensor<T>),
    Activate(NodeId, Activation),
    Abs(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropyRows(NodeId, Vec<usize>),
    SqDistRows(NodeId, NodeId),
    KlRows(NodeId, NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Activate(..) => "activate",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropyRows(..) => "cross_entropy_rows",
            Op::SqDistRows(..) => "sq_dist_rows",
            Op::KlRows(..) => "kl_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Computation record: an append-only list of nodes in evaluation order.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `id`, or `None` if the output does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// Gradient for `id`, with zeros substituted when it was not reached.
    pub fn take_or_zeros(&mut self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        self.take(id).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Declares an input (data or parameter).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.shape().len() != 2 || bv.len() != av.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        let b = bv.data();
        for i in 0..out.rows() {
            for (o, &bb) in out.row_mut(i).iter_mut().zip(b) {
                *o += bb;
            }
        }
        Ok(self.push(Op::AddBias(a, bias), out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let value = self.value(a).scale(s);
        self.push(Op::Scale(a, s), value)
    }

    /// Elementwise product with a tensor that is not differentiated.
    pub fn mul_const(&mut self, a: NodeId, c: Tensor<T>) -> Result<NodeId> {
        let value = self.value(a).zip_map(&c, |x, y| x * y)?;
        Ok(self.push(Op::MulConst(a, c), value))
    }

    pub fn activate(&mut self, a: NodeId, act: Activation) -> NodeId {
        let value = self.value(a).map(|v| act.apply(v));
        self.push(Op::Activate(a, act), value)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(T::abs);
        self.push(Op::Abs(a), value)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / T::lit(v.len() as f64));
        self.push(Op::Mean(a), value)
    }

    /// Per-row softmax cross-entropy of an `m x C` logit matrix; yields `[m]`.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.rows() != labels.len() {
            return Err(Error::shape(
                "cross_entropy_rows",
                format!("logits {:?} with {} labels", lv.shape(), labels.len()),
            ));
        }
        let c = lv.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::shape(
                "cross_entropy_rows",
                format!("label {bad} outside {c} classes"),
            ));
        }
        let losses = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -log_softmax(lv.row(i))[y])
            .collect();
        let value = Tensor::vector(losses);
        Ok(self.push(Op::CrossEntropyRows(logits, labels.to_vec()), value))
    }

    /// Per-row squared Euclidean distance between two `m x C` matrices.
    pub fn sq_dist_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        av.same_shape(bv, "sq_dist_rows")?;
        let value = Tensor::vector(
            (0..av.rows())
                .map(|i| {
                    av.row(i)
                        .iter()
                        .zip(bv.row(i))
                        .map(|(&x, &y)| (x - y) * (x - y))
                        .sum()
                })
                .collect(),
        );
        Ok(self.push(Op::SqDistRows(a, b), value))
    }

    /// Per-row KL(softmax(p) || softmax(q)).
    pub fn kl_rows(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let (pv, qv) = (self.value(p), self.value(q));
        pv.same_shape(qv, "kl_rows")?;
        let value = Tensor::vector(
            (0..pv.rows())
                .map(|i| kl_logits(pv.row(i), qv.row(i)))
                .collect(),
        );
        Ok(self.push(Op::KlRows(p, q), value))
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0].value;
        if seed.shape() != out.shape() {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} vs output {:?}", seed.shape(), out.shape()),
            ));
        }
        for (i, node) in self.nodes[..=output.0].iter().enumerate() {
            if !node.value.all_finite() {
                return Err(Error::NonFinite {
                    location: format!("node {i} ({})", node.op.name()),
                });
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            // leaves keep their gradient so callers can read it back
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // da = g * b^T
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        (n, 1),
                        bv.data(),
                        (1, n),
                        T::zero(),
                        &mut da,
                        (k, 1),
                    );
                    // db = a^T * g
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        av.data(),
                        (1, k),
                        g.data(),
                        (n, 1),
                        T::zero(),
                        &mut db,
                        (n, 1),
                    );
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), da)?)?;
                    accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?)?;
                }
                Op::AddBias(a, bias) => {
                    let bshape = self.value(*bias).shape().to_vec();
                    let cols = g.cols();
                    let mut db = vec![T::zero(); cols];
                    for i in 0..g.rows() {
                        for (d, &v) in db.iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *bias, Tensor::new(bshape, db)?)?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone())?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|v| v * s))?;
                }
                Op::MulConst(a, c) => {
                    accumulate(&mut grads, *a, g.zip_map(c, |x, y| x * y)?)?;
                }
                Op::Activate(a, act) => {
                    let act = *act;
                    let ga = g.zip_map(self.value(*a), |x, pre| x * act.derivative(pre))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(self.value(*a), |x, v| x * sign(v))?;
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::filled(&shape, g.item()))?;
                }
                Op::Mean(a) => {
                    let av = self.value(*a);
                    let each = g.item() / T::lit(av.len() as f64);
                    accumulate(&mut grads, *a, Tensor::filled(av.shape(), each))?;
                }
                Op::CrossEntropyRows(logits, labels) => {
                    let lv = self.value(*logits);
                    let mut gl = Tensor::zeros(lv.shape());
                    for (i, &y) in labels.iter().enumerate() {
                        let p = softmax(lv.row(i));
                        let gi = g.data()[i];
                        for (j, (o, pj)) in gl.row_mut(i).iter_mut().zip(p).enumerate() {
                            let t = if j == y { pj - T::one() } else { pj };
                            *o = gi * t;
                        }
                    }
                    accumulate(&mut grads, *logits, gl)?;
                }
                Op::SqDistRows(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(av.shape());
                    let two = T::lit(2.0);
                    for i in 0..av.rows() {
                        let gi = g.data()[i];
                        for ((o, &x), &y) in ga.row_mut(i).iter_mut().zip(av.row(i)).zip(bv.row(i))
                        {
                            *o = two * gi * (x - y);
                        }
                    }
                    let gb = ga.map(|v| -v);
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::KlRows(p, q) => {
                    let (pv, qv) = (self.value(*p), self.value(*q));
                    let mut gp = Tensor::zeros(pv.shape());
                    let mut gq = Tensor::zeros(qv.shape());
                    for i in 0..pv.rows() {
                        let gi = g.data()[i];
                        let lp = log_softmax(pv.row(i));
                        let lq = log_softmax(qv.row(i));
                        let kl = node.value.data()[i];
                        for (j, (&a, &b)) in lp.iter().zip(&lq).enumerate() {
                            let pj = a.exp();
                            gp.row_mut(i)[j] = gi * pj * ((a - b) - kl);
                            gq.row_mut(i)[j] = gi * (b.exp() - pj);
                        }
                    }
                    accumulate(&mut grads, *p, gp)?;
                    accumulate(&mut grads, *q, gq)?;
                }
            }
        }

        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        location: format!("gradient of node {i} ({})", self.nodes[i].op.name()),
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.axpy(T::one(), &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::finite_diff_gradient;

    #[test]
    fn square_derivative() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(-1.7));
        let zero = g.scale(x, 0.0);
        let c = g.input(Tensor::scalar(5.0));
        let y = g.add(zero, c).unwrap();
        let grads = g.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn duplicated_inputs_accumulate() {
        // f(x) = x + x + x*x, f'(x) = 2 + 2x
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::vector(vec![1.5, -2.0]));
        let s = g.add(x, x).unwrap();
        let sq = g.mul(x, x).unwrap();
        let y0 = g.add(s, sq).unwrap();
        let y = g.sum(y0);
        let grads = g.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, -2.0]);
    }

    #[test]
    fn abs_gradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::vector(vec![0.0, -3.0, 2.0]));
        let a = g.abs(x);
        let y = g.sum(a);
        let grads = g.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, -1.0, 1.0]);
    }

    #[test]
    fn seed_shape_checked() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        let err = g.backward(x, Tensor::scalar(1.0)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn non_finite_node_is_reported() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::vector(vec![1.0, f64::INFINITY]));
        let y = g.sum(x);
        let err = g.backward(y, Tensor::scalar(1.0)).unwrap_err();
        match err {
            Error::NonFinite { location } => assert!(location.contains("node 0"), "{location}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let p0 = Tensor::matrix(2, 3, vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4]).unwrap();
        let q0 = Tensor::matrix(2, 3, vec![-0.5, 0.4, 1.1, 0.0, 0.9, 0.2]).unwrap();
        let eval = |p: &Tensor<f64>, q: &Tensor<f64>| -> f64 {
            (0..2).map(|i| kl_logits(p.row(i), q.row(i))).sum()
        };
        let mut g = Graph::new();
        let p = g.input(p0.clone());
        let q = g.input(q0.clone());
        let k = g.kl_rows(p, q).unwrap();
        let s = g.sum(k);
        let grads = g.backward(s, Tensor::scalar(1.0)).unwrap();
        let fp = finite_diff_gradient(|t: &Tensor<f64>| Ok(eval(t, &q0)), &p0, 1e-5).unwrap();
        let fq = finite_diff_gradient(|t: &Tensor<f64>| Ok(eval(&p0, t)), &q0, 1e-5).unwrap();
        for (a, b) in grads.get(p).unwrap().data().iter().zip(fp.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
        for (a, b) in grads.get(q).unwrap().data().iter().zip(fq.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
