//! Define-by-run computation graph.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`]
//! walks the nodes in reverse creation order, which is a valid reverse
//! topological order because a node can only reference earlier nodes.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, Axis, Ix2, Ix3, IxDyn, Zip};

use crate::tensor::{reduce_to_shape, reshape, Tensor};

/// Sentinel used in gather tables for "this output element is zero".
pub const GATHER_ZERO: u32 = u32::MAX;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    SoftmaxLast(Var),
    LayerNormLast { input: Var, inv_std: Tensor },
    SumAll(Var),
    SumAxis { input: Var, axis: usize, keepdim: bool },
    Gather { input: Var, table: Arc<[u32]> },
    Concat { inputs: Vec<Var>, axis: usize },
    CrossEntropy { logits: Var, labels: Arc<[usize]>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu_inner(x: f64) -> (f64, f64) {
    // tanh approximation; returns (value, derivative)
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = K * (x + A * x * x * x);
    let t = u.tanh();
    let du = K * (1.0 + 3.0 * A * x * x);
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (value, deriv)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn as_matrix(t: &Tensor) -> Array2<f64> {
    let k = *t.shape().last().expect("matmul operand must have rank >= 1");
    let rows = t.len() / k.max(1);
    reshape(t, &[rows, k])
        .into_dimensionality::<Ix2>()
        .expect("rank 2")
}

fn bmm_forward(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Tensor {
    let a3 = a.view().into_dimensionality::<Ix3>().expect("bmm lhs rank 3");
    let b3 = b.view().into_dimensionality::<Ix3>().expect("bmm rhs rank 3");
    let batch = a3.shape()[0];
    assert_eq!(batch, b3.shape()[0], "bmm batch mismatch");
    let m = if trans_a { a3.shape()[2] } else { a3.shape()[1] };
    let n = if trans_b { b3.shape()[1] } else { b3.shape()[2] };
    let mut out = ndarray::Array3::<f64>::zeros((batch, m, n));
    for i in 0..batch {
        let mut lhs = a3.index_axis(Axis(0), i);
        let mut rhs = b3.index_axis(Axis(0), i);
        if trans_a {
            lhs = lhs.reversed_axes();
        }
        if trans_b {
            rhs = rhs.reversed_axes();
        }
        let mut dst = out.index_axis_mut(Axis(0), i);
        general_mat_mul(1.0, &lhs, &rhs, 0.0, &mut dst);
    }
    out.into_dyn()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        assert_eq!(t.len(), 1, "scalar() on tensor of shape {:?}", t.shape());
        *t.iter().next().expect("one element")
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf (gradients will be produced for it).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.as_standard_layout().into_owned(), Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `a[..., k] x b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(bv.ndim(), 2, "matmul rhs must be rank 2, got {:?}", bv.shape());
        let k = *av.shape().last().expect("rank >= 1");
        assert_eq!(k, bv.shape()[0], "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let a2 = as_matrix(av);
        let b2 = bv.view().into_dimensionality::<Ix2>().expect("rank 2");
        let out = a2.dot(&b2);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = bv.shape()[1];
        let value = reshape(&out.into_dyn(), &shape);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a[b, m, k] x b[b, k, n] -> [b, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape()[2], bv.shape()[1], "bmm inner dims {:?} x {:?}", av.shape(), bv.shape());
        let value = bmm_forward(av, bv, false, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::BatchMatMul(a, b), rg)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(a);
        self.push(value, Op::Permute(a, axes.to_vec()), rg)
    }

    /// Swap the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Var {
        let nd = self.value(a).ndim();
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = reshape(self.value(a), shape);
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| gelu_inner(x).0);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        let rg = self.rg(a);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let last = value.ndim() - 1;
        for mut lane in value.lanes_mut(Axis(last)) {
            let max = lane.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            lane.mapv_inplace(|x| (x - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|x| x / sum);
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxLast(a), rg)
    }

    /// Normalize over the last axis to zero mean and unit (biased) variance.
    pub fn layer_norm_last(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let last = x.ndim() - 1;
        let mut value = x.clone();
        let mut inv_std_shape = x.shape().to_vec();
        inv_std_shape[last] = 1;
        let mut inv_std = Tensor::zeros(IxDyn(&inv_std_shape));
        for (mut lane, s) in value.lanes_mut(Axis(last)).into_iter().zip(inv_std.iter_mut()) {
            let n = lane.len() as f64;
            let mean = lane.sum() / n;
            let var = lane.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = 1.0 / (var + eps).sqrt();
            lane.mapv_inplace(|v| (v - mean) * is);
            *s = is;
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNormLast { input: a, inv_std }, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Var {
        let mut value = self.value(a).sum_axis(Axis(axis));
        if keepdim {
            value.insert_axis_inplace(Axis(axis));
        }
        let rg = self.rg(a);
        self.push(value, Op::SumAxis { input: a, axis, keepdim }, rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Var {
        let n = self.value(a).shape()[axis] as f64;
        let s = self.sum_axis(a, axis, keepdim);
        self.scale(s, 1.0 / n)
    }

    /// `out.flat[i] = a.flat[table[i]]`, or zero where `table[i] == GATHER_ZERO`.
    pub fn gather(&mut self, a: Var, table: Arc<[u32]>, out_shape: &[usize]) -> Var {
        let src = self.value(a);
        let src = src.as_slice().expect("graph values are contiguous");
        assert_eq!(table.len(), out_shape.iter().product::<usize>(), "gather table size");
        let data: Vec<f64> = table
            .iter()
            .map(|&j| if j == GATHER_ZERO { 0.0 } else { src[j as usize] })
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(out_shape), data).expect("gather shape");
        let rg = self.rg(a);
        self.push(value, Op::Gather { input: a, table }, rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        let views: Vec<_> = inputs.iter().map(|&v| self.value(v).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views)
            .expect("concat shapes")
            .as_standard_layout()
            .into_owned();
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `logits[B, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.ndim(), 2, "cross_entropy expects [B, K] logits");
        assert_eq!(lv.shape()[0], labels.len(), "cross_entropy batch size");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (mut row, &y) in probs.lanes_mut(Axis(1)).into_iter().zip(labels) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = row.fold(0.0, |acc, &x| acc + (x - max).exp()).ln() + max;
            loss += lse - row[y];
            row.mapv_inplace(|x| (x - lse).exp());
        }
        let value = ArrayD::from_elem(IxDyn(&[]), loss / labels.len() as f64);
        let rg = self.rg(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.into(),
                probs,
            },
            rg,
        )
    }

    /// Reverse-mode sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(self.value(root).raw_dim()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g.clone(), self.shape(*a)));
                self.accumulate(grads, *b, reduce_to_shape(g.clone(), self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to_shape(g.clone(), self.shape(*a)));
                self.accumulate(grads, *b, reduce_to_shape(g.mapv(|x| -x), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = g * self.value(*b);
                    self.accumulate(grads, *a, reduce_to_shape(ga, self.shape(*a)));
                }
                if self.rg(*b) {
                    let gb = g * self.value(*a);
                    self.accumulate(grads, *b, reduce_to_shape(gb, self.shape(*b)));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.rg(*a) {
                    let ga = g / bv;
                    self.accumulate(grads, *a, reduce_to_shape(ga, self.shape(*a)));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let gb = -(g * &node.value) / bv;
                    self.accumulate(grads, *b, reduce_to_shape(gb, self.shape(*b)));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.mapv(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b).view().into_dimensionality::<Ix2>().expect("rank 2");
                let g2 = as_matrix(g);
                if self.rg(*a) {
                    let ga = g2.dot(&bv.t());
                    let ga = reshape(&ga.into_dyn(), av.shape());
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let a2 = as_matrix(av);
                    self.accumulate(grads, *b, a2.t().dot(&g2).into_dyn());
                }
            }
            Op::BatchMatMul(a, b) => {
                if self.rg(*a) {
                    let ga = bmm_forward(g, self.value(*b), false, true);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = bmm_forward(self.value(*a), g, true, false);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let ga = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .into_owned();
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, reshape(g, self.shape(*a))),
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= gelu_inner(x).1);
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|d, &x| *d *= if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxLast(a) => {
                let y = &node.value;
                let last = y.ndim() - 1;
                let mut ga = g * y;
                for (mut lane, ylane) in ga.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                    let dot = lane.sum();
                    Zip::from(&mut lane).and(&ylane).for_each(|d, &yv| *d -= yv * dot);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNormLast { input, inv_std } => {
                let xhat = &node.value;
                let last = xhat.ndim() - 1;
                let mut ga = g.clone();
                for ((mut lane, xl), &is) in ga
                    .lanes_mut(Axis(last))
                    .into_iter()
                    .zip(xhat.lanes(Axis(last)))
                    .zip(inv_std.iter())
                {
                    let n = lane.len() as f64;
                    let mean_g = lane.sum() / n;
                    let mean_gx = lane.iter().zip(xl.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                    Zip::from(&mut lane)
                        .and(&xl)
                        .for_each(|d, &xh| *d = is * (*d - mean_g - xh * mean_gx));
                }
                self.accumulate(grads, *input, ga);
            }
            Op::SumAll(a) => {
                let s = *g.iter().next().expect("scalar grad");
                self.accumulate(grads, *a, Tensor::from_elem(self.value(*a).raw_dim(), s));
            }
            Op::SumAxis { input, axis, keepdim } => {
                let mut gk = g.clone();
                if !keepdim {
                    gk.insert_axis_inplace(Axis(*axis));
                }
                let ga = gk
                    .broadcast(self.value(*input).raw_dim())
                    .expect("sum_axis broadcast")
                    .to_owned();
                self.accumulate(grads, *input, ga);
            }
            Op::Gather { input, table } => {
                let mut ga = Tensor::zeros(self.value(*input).raw_dim());
                {
                    let dst = ga.as_slice_mut().expect("contiguous");
                    let src = g.as_slice().expect("contiguous");
                    for (&j, &gv) in table.iter().zip(src) {
                        if j != GATHER_ZERO {
                            dst[j as usize] += gv;
                        }
                    }
                }
                self.accumulate(grads, *input, ga);
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for &v in inputs {
                    let width = self.shape(v)[*axis];
                    let part = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + width))
                        .as_standard_layout()
                        .into_owned();
                    self.accumulate(grads, v, part);
                    start += width;
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = *g.iter().next().expect("scalar grad") / labels.len() as f64;
                let mut ga = probs.clone();
                for (mut row, &y) in ga.lanes_mut(Axis(1)).into_iter().zip(labels.iter()) {
                    row[y] -= 1.0;
                    row.mapv_inplace(|x| x * scale);
                }
                self.accumulate(grads, *logits, ga);
            }
        }
    }
}
