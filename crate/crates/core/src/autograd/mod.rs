//! Reverse-mode differentiation tape over tensor-core operations.
//!
//! A [`Graph`] records every operation eagerly: values are computed at
//! record time and kept on the node together with whatever context the
//! backward pass needs (pooling argmax, normalized activations, softmax
//! probabilities). Nodes are appended in execution order, so the node list
//! is a topological order and backward is a single reverse sweep.

mod check;

use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::tensor::{
    self, BatchNormState, BnMode, BnSaved, ConvSpec, PoolMode, PoolSpec, Real, Shape, Tensor,
};

pub use check::{finite_diff_check, max_rel_error, Evaluation, FdReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Conv { spec: ConvSpec, bias: bool },
    Pool { spec: PoolSpec, argmax: Vec<u32> },
    BatchNorm { saved: BnSaved<T> },
    Relu,
    Concat,
    Linear { bias: bool },
    GlobalAvgPool,
    SoftmaxCe { probs: Vec<Vec<T>>, labels: Vec<usize> },
    Add,
    Sum,
    Dot { weights: Tensor<T> },
    GroupMean { group: usize },
    Detach,
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv { .. } => "conv3d",
            Op::Pool { spec, .. } => match spec.mode {
                PoolMode::Max => "max_pool3d",
                PoolMode::Avg => "avg_pool3d",
            },
            Op::BatchNorm { .. } => "batchnorm3d",
            Op::Relu => "relu",
            Op::Concat => "concat",
            Op::Linear { .. } => "linear",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Add => "add",
            Op::Sum => "sum",
            Op::Dot { .. } => "dot",
            Op::GroupMean { .. } => "group_mean",
            Op::Detach => "detach",
        }
    }
}

#[derive(Debug)]
struct Node<T: Real> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Tape of recorded operations; see the module docs.
#[derive(Debug, Default)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let requires_grad = match op {
            Op::Detach => false,
            _ => inputs.iter().any(|&i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter or probed input).
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient accumulated by [`Graph::backward`]; `None` for nodes the
    /// root does not depend on (or that do not require gradients).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    /// Inputs of each node, in recording order.
    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    fn row(&self, id: Option<NodeId>) -> Option<&[T]> {
        id.map(|b| self.value(b).data())
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: &ConvSpec) -> Result<NodeId> {
        let value = tensor::conv3d(self.value(x), spec, self.value(w), self.row(b))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Op::Conv {
                spec: *spec,
                bias: b.is_some(),
            },
            inputs,
            value,
        ))
    }

    pub fn pool3d(&mut self, x: NodeId, spec: &PoolSpec) -> Result<NodeId> {
        let (value, argmax) = tensor::pool3d(self.value(x), spec)?;
        Ok(self.push(Op::Pool { spec: *spec, argmax }, vec![x], value))
    }

    /// Batch normalization with `gamma`/`beta` leaves of shape `(1, c, 1, 1, 1)`.
    /// In train mode `state` receives the running-statistics update.
    pub fn batchnorm3d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: BatchNormState<'_, T>,
        mode: BnMode,
    ) -> Result<NodeId> {
        let (value, saved) = tensor::batchnorm3d(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            state,
            mode,
        )?;
        Ok(self.push(Op::BatchNorm { saved }, vec![x, gamma, beta], value))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = tensor::relu(self.value(x));
        self.push(Op::Relu, vec![x], value)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.len() == 1 {
            // a one-input concat is a copy; record it so shapes/grads stay uniform
            let value = self.value(xs[0]).clone();
            return Ok(self.push(Op::Concat, xs.to_vec(), value));
        }
        let parts: Vec<&Tensor<T>> = xs.iter().map(|&i| self.value(i)).collect();
        let value = tensor::concat_channels(&parts)?;
        Ok(self.push(Op::Concat, xs.to_vec(), value))
    }

    /// `w` of shape `(out, in, 1, 1, 1)`, `b` of shape `(1, out, 1, 1, 1)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let value = tensor::linear(self.value(x), self.value(w), self.row(b))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Linear { bias: b.is_some() }, inputs, value))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let value = tensor::global_avg_pool(self.value(x));
        self.push(Op::GlobalAvgPool, vec![x], value)
    }

    /// Mean cross-entropy of `(n, k, 1, 1, 1)` logits against class labels;
    /// a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let shape = self.shape(logits);
        let (n, k) = (shape.n(), shape.sample());
        if labels.len() != n {
            return Err(Error::dim("softmax_cross_entropy", 0, n, labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract {
                op: "softmax_cross_entropy",
                msg: format!("label {bad} out of range for {k} classes"),
            });
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n);
        let mut loss = 0.0f64;
        for (row, &label) in z.chunks(k).zip(labels) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            loss += lse - row[label].as_f64();
            probs.push(row.iter().map(|v| T::lit((v.as_f64() - lse).exp())).collect());
        }
        let value = Tensor::scalar(T::lit(loss / n as f64));
        Ok(self.push(
            Op::SoftmaxCe {
                probs,
                labels: labels.to_vec(),
            },
            vec![logits],
            value,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Contract {
                op: "add",
                msg: format!("shape {sa} != {sb}"),
            });
        }
        let value = self.value(a).axpby(T::one(), self.value(b), T::one());
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum, vec![x], value)
    }

    /// `Σ x ⊙ weights` for a constant weight tensor; a scalar node.
    pub fn dot(&mut self, x: NodeId, weights: Tensor<T>) -> Result<NodeId> {
        if weights.shape() != self.shape(x) {
            return Err(Error::Contract {
                op: "dot",
                msg: format!("weights {} != input {}", weights.shape(), self.shape(x)),
            });
        }
        let s: T = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        Ok(self.push(Op::Dot { weights }, vec![x], Tensor::scalar(s)))
    }

    /// Averages consecutive runs of `group` batch entries:
    /// `(g·n, …) → (n, …)`.
    pub fn group_mean(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let shape = self.shape(x);
        if group == 0 || shape.n() % group != 0 {
            return Err(Error::Contract {
                op: "group_mean",
                msg: format!("batch {} not divisible into groups of {group}", shape.n()),
            });
        }
        let s = shape.sample();
        let out_shape = shape.with_n(shape.n() / group);
        let inv = T::one() / T::lit(group as f64);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); out_shape.numel()];
        for (i, chunk) in src.chunks(s).enumerate() {
            let dst = &mut data[(i / group) * s..(i / group + 1) * s];
            for (d, &v) in dst.iter_mut().zip(chunk) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(Op::GroupMean { group }, vec![x], value))
    }

    /// Identity on values; blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(Op::Detach, vec![x], value)
    }

    /// Hash of every discrete branch decision taken during the forward pass
    /// (ReLU active sets, max-pool winners). Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    let mut word = 0u64;
                    for (i, v) in x.data().iter().enumerate() {
                        word = (word << 1) | u64::from(*v > T::zero());
                        if i % 64 == 63 {
                            h.write_u64(word);
                            word = 0;
                        }
                    }
                    h.write_u64(word);
                }
                Op::Pool { argmax, .. } => {
                    for &a in argmax {
                        h.write_u32(a);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `root`. Gradients accumulate over every
    /// consumer of a value.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.shape(root).is_scalar() {
            return Err(Error::Contract {
                op: "backward",
                msg: format!("root must be scalar, got {}", self.shape(root)),
            });
        }
        if self.backward_done {
            return Err(Error::Contract {
                op: "backward",
                msg: "graph already differentiated".into(),
            });
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=root.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                self.grads[id] = Some(g);
                continue;
            }
            let contributions = self.input_grads(id, &g)?;
            self.grads[id] = Some(g);
            for (input, grad) in contributions {
                match &mut self.grads[input.0] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn input_grads(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let val = |i: usize| &self.nodes[ins[i].0].value;
        let mut out = Vec::with_capacity(ins.len());
        match &node.op {
            Op::Leaf => {}
            Op::Conv { spec, bias } => {
                let grads = tensor::conv3d_backward(
                    val(0),
                    spec,
                    val(1),
                    g,
                    self.wants(ins[0]),
                    self.wants(ins[1]),
                    *bias && self.wants(ins[2]),
                )?;
                if let Some(dx) = grads.input {
                    out.push((ins[0], dx));
                }
                if let Some(dw) = grads.weight {
                    out.push((ins[1], dw));
                }
                if let Some(db) = grads.bias {
                    out.push((ins[2], Tensor::from_vec(val(2).shape(), db)?));
                }
            }
            Op::Pool { spec, argmax } => {
                if self.wants(ins[0]) {
                    out.push((ins[0], tensor::pool3d_backward(val(0).shape(), spec, argmax, g)?));
                }
            }
            Op::BatchNorm { saved } => {
                let (dx, dgamma, dbeta) = tensor::batchnorm3d_backward(saved, val(1).data(), g);
                if self.wants(ins[0]) {
                    out.push((ins[0], dx));
                }
                if self.wants(ins[1]) {
                    out.push((ins[1], Tensor::from_vec(val(1).shape(), dgamma)?));
                }
                if self.wants(ins[2]) {
                    out.push((ins[2], Tensor::from_vec(val(2).shape(), dbeta)?));
                }
            }
            Op::Relu => {
                if self.wants(ins[0]) {
                    let x = val(0);
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    out.push((ins[0], Tensor::from_vec(x.shape(), data)?));
                }
            }
            Op::Concat => {
                let mut start = 0;
                for &input in ins {
                    let c = self.nodes[input.0].value.shape().c();
                    if self.wants(input) {
                        out.push((input, tensor::slice_channels(g, start, c)?));
                    }
                    start += c;
                }
            }
            Op::Linear { bias } => {
                let (dx, dw, db) = tensor::linear_backward(val(0), val(1), g);
                if self.wants(ins[0]) {
                    out.push((ins[0], dx));
                }
                if self.wants(ins[1]) {
                    out.push((ins[1], dw));
                }
                if *bias && self.wants(ins[2]) {
                    out.push((ins[2], Tensor::from_vec(val(2).shape(), db)?));
                }
            }
            Op::GlobalAvgPool => {
                if self.wants(ins[0]) {
                    let shape = val(0).shape();
                    let plane = shape.plane();
                    let inv = T::one() / T::lit(plane as f64);
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&gv| std::iter::repeat_n(gv * inv, plane))
                        .collect();
                    out.push((ins[0], Tensor::from_vec(shape, data)?));
                }
            }
            Op::SoftmaxCe { probs, labels } => {
                if self.wants(ins[0]) {
                    let scale = g.data()[0] / T::lit(labels.len() as f64);
                    let mut data = Vec::with_capacity(val(0).len());
                    for (p, &label) in probs.iter().zip(labels) {
                        for (j, &pj) in p.iter().enumerate() {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            data.push((pj - onehot) * scale);
                        }
                    }
                    out.push((ins[0], Tensor::from_vec(val(0).shape(), data)?));
                }
            }
            Op::Add => {
                for &input in ins {
                    if self.wants(input) {
                        out.push((input, g.clone()));
                    }
                }
            }
            Op::Sum => {
                if self.wants(ins[0]) {
                    out.push((ins[0], Tensor::full(val(0).shape(), g.data()[0])));
                }
            }
            Op::Dot { weights } => {
                if self.wants(ins[0]) {
                    out.push((ins[0], weights.scale(g.data()[0])));
                }
            }
            Op::GroupMean { group } => {
                if self.wants(ins[0]) {
                    let shape = val(0).shape();
                    let s = shape.sample();
                    let inv = T::one() / T::lit(*group as f64);
                    let mut data = Vec::with_capacity(shape.numel());
                    for i in 0..shape.n() {
                        let j = i / group;
                        data.extend(g.data()[j * s..(j + 1) * s].iter().map(|&v| v * inv));
                    }
                    out.push((ins[0], Tensor::from_vec(shape, data)?));
                }
            }
            Op::Detach => {}
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::from_rows(&[v.to_vec()]).unwrap()
    }

    #[test]
    fn relu_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[-1.0, 2.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn concat_passes_gradients_through() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::zeros(Shape::new(2, 3, 1, 2, 2)));
        let y = g.leaf(Tensor::<f64>::zeros(Shape::new(2, 1, 1, 2, 2)));
        let c = g.concat(&[x, y]).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::ones(Shape::new(2, 3, 1, 2, 2)));
        assert_eq!(g.grad(y).unwrap(), &Tensor::ones(Shape::new(2, 1, 1, 2, 2)));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[1.0, 2.0]));
        let r = g.relu(x);
        assert!(matches!(g.backward(r), Err(Error::Contract { op: "backward", .. })));
    }

    #[test]
    fn second_backward_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[1.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn shared_value_accumulates() {
        // f = sum(relu(x)) + sum(x) → grad = 1[x>0] + 1
        let mut g = Graph::new();
        let x = g.leaf(row(&[-1.0, 2.0, 0.5]));
        let r = g.relu(x);
        let a = g.add(r, x).unwrap();
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_and_detach_receive_nothing() {
        let mut g = Graph::new();
        let x = g.leaf(row(&[1.0, 2.0]));
        let c = g.constant(row(&[3.0, 4.0]));
        let d = g.detach(x);
        let a = g.add(c, d).unwrap();
        let b = g.add(a, x).unwrap();
        let s = g.sum(b);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(d).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::<f64>::zeros(Shape::vector(3, 5)));
        let l = g.softmax_cross_entropy(z, &[0, 4, 2]).unwrap();
        assert_eq!(g.value(l).data()[0], 5f64.ln());
        g.backward(l).unwrap();
        let dz = g.grad(z).unwrap();
        assert!((dz[[0, 0, 0, 0, 0]] - (0.2 - 1.0) / 3.0).abs() < 1e-15);
        assert!((dz[[0, 1, 0, 0, 0]] - 0.2 / 3.0).abs() < 1e-15);
        assert!(g.softmax_cross_entropy(z, &[0, 5, 1]).is_err());
    }

    #[test]
    fn group_mean_averages() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::<f64>::from_rows(&[vec![1.0], vec![3.0], vec![5.0], vec![9.0]]).unwrap());
        let m = g.group_mean(x, 2).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 7.0]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.5; 4]);
        assert!(g.group_mean(x, 3).is_err());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
            let mut g = Graph::<f32>::new();
            let x = g.leaf(Tensor::randn(Shape::new(2, 2, 3, 4, 4), 1.0, &mut rng));
            let spec = ConvSpec::same(2, 3, [3, 3, 3]);
            let w = g.leaf(Tensor::randn(spec.weight_shape(), 0.3, &mut rng));
            let y = g.conv3d(x, w, None, &spec).unwrap();
            let r = g.relu(y);
            let s = g.sum(r);
            g.backward(s).unwrap();
            (g.grad(x).unwrap().clone(), g.grad(w).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
