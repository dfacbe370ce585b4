//! Tape-based reverse-mode differentiation over the [`Ops`] vocabulary, and
//! a central finite-difference oracle to check it against.
//!
//! Values are computed eagerly as nodes are recorded; insertion order is a
//! topological order, so `backward` is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::Ops;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Gather { src: NodeId, indices: Vec<isize> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Add(NodeId, NodeId),
    AddConst(NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Softmax(NodeId),
    LeakyRelu(NodeId, f64),
    Mse(NodeId, Tensor),
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    is_param: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every parameter node.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let needs_grad = self.needs(inputs);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            is_param: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, is_param: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: is_param,
            is_param,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let p = self.get(pred);
        let diff = p.zip_with(target, "mse", |a, b| a - b)?;
        let v = diff.data().iter().map(|d| d * d).sum::<f64>() / diff.numel().max(1) as f64;
        Ok(self.push(Op::Mse(pred, target.clone()), Tensor::scalar(v), &[pred]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.get(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(v), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.get(a);
        let v = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Op::Mean(a), Tensor::scalar(v), &[a])
    }

    /// Reverse sweep from a scalar `loss`. Every parameter gets an entry;
    /// parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.get(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.get(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.get(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if node.is_param {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.grads.insert(NodeId(idx), g);
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
        if !self.nodes[id.0].needs_grad {
            return Ok(());
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_inplace(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.get(*a), self.get(*b));
                if self.nodes[a.0].needs_grad {
                    let da = tensor::matmul_batched(g, &bv.transpose_last2()?)?;
                    self.accumulate(grads, *a, da)?;
                }
                if self.nodes[b.0].needs_grad {
                    let db = tensor::matmul_batched(&av.transpose_last2()?, g)?;
                    self.accumulate(grads, *b, db)?;
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose_last2()?)?,
            Op::Reshape(a) => {
                let shape = self.get(*a).shape().to_vec();
                self.accumulate(grads, *a, g.clone().reshape(&shape)?)?;
            }
            Op::Gather { src, indices } => {
                let s = self.get(*src);
                let (n, d) = s.dims2("gather backward")?;
                let mut acc = Tensor::zeros(&[n, d]);
                for (k, &i) in indices.iter().enumerate() {
                    if i >= 0 && (i as usize) < n {
                        let dst = &mut acc.data_mut()[i as usize * d..(i as usize + 1) * d];
                        dst.iter_mut().zip(g.row(k)).for_each(|(x, y)| *x += y);
                    }
                }
                self.accumulate(grads, *src, acc)?;
            }
            Op::ConcatRows(parts) => {
                let (_, d) = g.dims2("concat backward")?;
                let mut offset = 0;
                for p in parts {
                    let rows = self.get(*p).shape()[0];
                    let chunk = g.data()[offset * d..(offset + rows) * d].to_vec();
                    self.accumulate(grads, *p, Tensor::from_parts(vec![rows, d], chunk))?;
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let (n, _) = g.dims2("concat backward")?;
                let mut offset = 0;
                for p in parts {
                    let w = self.get(*p).shape()[1];
                    let mut chunk = Vec::with_capacity(n * w);
                    for i in 0..n {
                        chunk.extend_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    self.accumulate(grads, *p, Tensor::from_parts(vec![n, w], chunk))?;
                    offset += w;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone())?,
            Op::AddBias(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.nodes[b.0].needs_grad {
                    let bshape = self.get(*b).shape().to_vec();
                    let q = *g.shape().last().unwrap();
                    let mut db = vec![0.0; q];
                    for row in g.data().chunks(q) {
                        db.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(bshape, db))?;
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c))?,
            Op::Softmax(a) => {
                // dx = y ⊙ (dy − Σ dy·y); masked entries have y = 0 and get no gradient.
                let y = &node.value;
                let c = *y.shape().last().unwrap();
                let mut dx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                }
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), dx))?;
            }
            Op::LeakyRelu(a, alpha) => {
                let x = self.get(*a);
                let dx = x.zip_with(g, "leaky_relu backward", |xv, gv| {
                    if xv >= 0.0 {
                        gv
                    } else {
                        alpha * gv
                    }
                })?;
                self.accumulate(grads, *a, dx)?;
            }
            Op::Mse(p, target) => {
                let pv = self.get(*p);
                let scale = 2.0 * g.data()[0] / pv.numel().max(1) as f64;
                let dp = pv.zip_with(target, "mse backward", |a, b| scale * (a - b))?;
                self.accumulate(grads, *p, dp)?;
            }
            Op::Sum(a) => {
                let shape = self.get(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.data()[0]))?;
            }
            Op::Mean(a) => {
                let t = self.get(*a);
                let v = g.data()[0] / t.numel().max(1) as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape(), v))?;
            }
        }
        Ok(())
    }
}

impl Ops for Graph {
    type Value = NodeId;

    fn value<'a>(&'a self, v: &'a NodeId) -> &'a Tensor {
        self.get(*v)
    }

    fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    fn param(&mut self, t: &Tensor) -> NodeId {
        self.leaf(t.clone(), true)
    }

    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = tensor::matmul_batched(self.get(*a), self.get(*b))?;
        Ok(self.push(Op::MatMul(*a, *b), v, &[*a, *b]))
    }

    fn transpose(&mut self, a: &NodeId) -> Result<NodeId> {
        let v = self.get(*a).transpose_last2()?;
        Ok(self.push(Op::Transpose(*a), v, &[*a]))
    }

    fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.get(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(a), v, &[a]))
    }

    fn gather_rows(&mut self, a: &NodeId, indices: &[isize], pad: f64) -> Result<NodeId> {
        let v = tensor::gather_rows_padded(self.get(*a), indices, pad)?;
        let op = Op::Gather {
            src: *a,
            indices: indices.to_vec(),
        };
        Ok(self.push(op, v, &[*a]))
    }

    fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<Tensor> = parts.iter().map(|p| self.get(*p).clone()).collect();
        let v = tensor::concat_axis0(&vals)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v, parts))
    }

    fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<Tensor> = parts.iter().map(|p| self.get(*p).clone()).collect();
        let v = tensor::concat_cols(&vals)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, parts))
    }

    fn add(&mut self, a: NodeId, b: &NodeId) -> Result<NodeId> {
        let v = self.get(a).zip_with(self.get(*b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, *b), v, &[a, *b]))
    }

    fn add_const(&mut self, a: NodeId, c: &Tensor) -> Result<NodeId> {
        let v = self.get(a).zip_with(c, "add_const", |x, y| x + y)?;
        Ok(self.push(Op::AddConst(a), v, &[a]))
    }

    fn add_bias(&mut self, a: NodeId, b: &NodeId) -> Result<NodeId> {
        let v = crate::ops::Eager::default().add_bias(self.get(a).clone(), self.get(*b))?;
        Ok(self.push(Op::AddBias(a, *b), v, &[a, *b]))
    }

    fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.get(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v, &[a])
    }

    fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_lastdim(self.get(a))?;
        Ok(self.push(Op::Softmax(a), v, &[a]))
    }

    fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let v = self.get(a).map(|x| tensor::leaky_relu(x, alpha));
        self.push(Op::LeakyRelu(a, alpha), v, &[a])
    }
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step h must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "f is not finite around coordinate {i} (f+ = {up}, f- = {down})"
            )));
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `‖analytic − numeric‖∞ / max(1, ‖numeric‖∞)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> Result<f64> {
    Ok(analytic.max_abs_diff(numeric)? / numeric.max_abs().max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_gradient_example() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let loss = g.mse(x, &Tensor::scalar(0.0)).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn identity_affine_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0., -1.]).unwrap());
        let w = g.constant(Tensor::eye(3));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = crate::ops::affine(&mut g, &x, &w, &b, tensor::Activation::None).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn masked_softmax_entry_has_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::new(vec![1, 2], vec![0.3, 0.0]).unwrap());
        let masked = g
            .add_const(
                a,
                &Tensor::new(vec![1, 2], vec![0.0, f64::NEG_INFINITY]).unwrap(),
            )
            .unwrap();
        let s = g.softmax(masked).unwrap();
        let loss = g
            .mse(s, &Tensor::new(vec![1, 2], vec![0.2, 0.7]).unwrap())
            .unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(2.0));
        let unused = g.param(&Tensor::zeros(&[3]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn shared_node_accumulates() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(1.5));
        let y = g.add(x, &x).unwrap();
        let loss = g.sum(y);
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn finite_diff_examples() {
        let g =
            finite_diff_grad(|t| t.data()[0] * t.data()[0], &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() <= 1e-9);

        let x = Tensor::new(vec![3], vec![0.1, -4.0, 2.0]).unwrap();
        let g = finite_diff_grad(|_| 7.0, &x, 1e-5).unwrap();
        assert_eq!(g, Tensor::zeros(&[3]));

        let g = finite_diff_grad(|t| t.data().iter().sum(), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn finite_diff_errors() {
        let x = Tensor::scalar(0.0);
        assert!(finite_diff_grad(|t| t.data()[0], &x, 0.0).is_err());
        assert!(matches!(
            finite_diff_grad(
                |t| 1.0 / t.data()[0].abs().max(0.0) - 1e300 * 1e300,
                &x,
                1e-5
            ),
            Err(Error::NonFinite(_))
        ));
    }
}
