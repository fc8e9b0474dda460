//! Recorded computation graphs with reverse-mode differentiation.
//!
//! Every op is evaluated when it is appended, so building a graph is also its
//! first forward pass. [`Graph::forward`] replays the recorded ops after leaf
//! values change, and [`Graph::backward`] propagates adjoints from a scalar
//! loss to every trainable parameter.
//!
//! ReLU has derivative 0 at exactly 0.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, channel_layout, ConvGeom};
use crate::pyramid::{level_weight, LaplacianPyramid};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param { trainable: bool },
    Const,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    AddBias(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: NodeId,
        eps: f64,
    },
    ChannelAffine {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    Upsample2x(NodeId),
    Reshape(NodeId, Vec<usize>),
    MeanRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Lap1(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Square(_) => "square",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::AddBias(..) => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Upsample2x(_) => "upsample2x",
            Op::Reshape(..) => "reshape",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Lap1(..) => "lap1",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input | Op::Param { .. } | Op::Const => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::AddBias(a, b) | Op::Lap1(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Square(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Upsample2x(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::Reshape(a, _) => vec![a],
            Op::Conv2d { x, w, .. } | Op::ConvTranspose2d { x, w, .. } => vec![x, w],
            Op::BatchNorm { x, .. } => vec![x],
            Op::ChannelAffine { x, scale, shift } => vec![x, scale, shift],
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op,
    value: Tensor<T>,
    /// Per-op saved state (batch-norm inverse std).
    aux: Vec<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    leaves: BTreeMap<String, NodeId>,
    pyramids: BTreeMap<(usize, usize), LaplacianPyramid>,
}

fn mismatch(node: usize, op: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        node,
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: BTreeMap::new(),
            pyramids: BTreeMap::new(),
        }
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

    /// Named non-differentiable input, fed through [`forward`](Self::forward).
    pub fn input(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push_leaf(Op::Input, value, false);
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Named parameter. Re-registering a name returns the existing node.
    pub fn param(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push_leaf(Op::Param { trainable }, value, trainable);
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(Op::Const, value, false)
    }

    fn push_leaf(&mut self, op: Op, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            aux: Vec::new(),
            requires_grad,
        });
        id
    }

    /// Names and ids of trainable parameters, in name order.
    pub fn trainable_params(&self) -> Vec<(String, NodeId)> {
        self.leaves
            .iter()
            .filter(|(_, id)| {
                matches!(self.nodes[id.0].op, Op::Param { trainable: true, .. })
            })
            .map(|(n, &id)| (n.clone(), id))
            .collect()
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let index = self.nodes.len();
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.cache_pyramid(&op);
        let (value, aux) = self.eval(index, &op)?;
        self.nodes.push(Node {
            op,
            value,
            aux,
            requires_grad,
        });
        Ok(NodeId(index))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }
    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square(a))
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }
    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }
    /// Adds `bias[c]` along axis 1 of a `[N, C, ...]` tensor.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddBias(x, bias))
    }
    /// NCHW convolution with explicit zero padding; weight `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        self.push(Op::Conv2d { x, w, stride, pad })
    }
    /// NCHW transposed convolution; weight `[Cin, Cout, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        self.push(Op::ConvTranspose2d { x, w, stride, pad })
    }
    /// Normalises each channel with statistics of the current batch.
    pub fn batch_norm(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        self.push(Op::BatchNorm { x, eps })
    }
    /// `x * scale[c] + shift[c]` along axis 1.
    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        self.push(Op::ChannelAffine { x, scale, shift })
    }
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Upsample2x(x))
    }
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(x, shape.to_vec()))
    }
    /// Flattens `[N, ...]` to `[N, d]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape();
        let n = shape[0];
        let d = shape[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, d])
    }
    /// Mean over the leading axis.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::MeanRows(x))
    }
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(x))
    }
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(x))
    }
    /// Batch mean of the weighted Laplacian-pyramid L1 distance between
    /// two `[N, C, H, W]` tensors.
    pub fn lap1(&mut self, x: NodeId, target: NodeId) -> Result<NodeId> {
        self.push(Op::Lap1(x, target))
    }
    /// `sum(a * b)`.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    fn pyramid(&self, h: usize, w: usize) -> &LaplacianPyramid {
        &self.pyramids[&(h, w)]
    }

    fn cache_pyramid(&mut self, op: &Op) {
        if let Op::Lap1(x, _) = op {
            let s = self.nodes[x.0].value.shape();
            if s.len() == 4 && s[2] >= 4 && s[3] >= 4 {
                let key = (s[2], s[3]);
                self.pyramids
                    .entry(key)
                    .or_insert_with(|| LaplacianPyramid::new(key.0, key.1));
            }
        }
    }

    fn eval(&self, index: usize, op: &Op) -> Result<(Tensor<T>, Vec<T>)> {
        let name = op.name();
        let val = |id: NodeId| &self.nodes[id.0].value;
        let same_shape = |a: NodeId, b: NodeId| -> Result<()> {
            if val(a).shape() != val(b).shape() {
                return Err(mismatch(index, name, val(a).shape(), val(b).shape()));
            }
            Ok(())
        };
        let elementwise = |a: NodeId, b: NodeId, f: fn(T, T) -> T| -> Result<Tensor<T>> {
            same_shape(a, b)?;
            let data = val(a)
                .data()
                .iter()
                .zip(val(b).data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(val(a).shape(), data)
        };
        let out = match op {
            Op::Input | Op::Param { .. } | Op::Const => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                    let expected = [sa.get(1).copied().unwrap_or(0), sb.get(1).copied().unwrap_or(0)];
                    return Err(mismatch(index, name, &expected, sb));
                }
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let data = kernels::matmul(val(*a).data(), val(*b).data(), m, k, n);
                Tensor::new(&[m, n], data)?
            }
            Op::Add(a, b) => elementwise(*a, *b, |x, y| x + y)?,
            Op::Sub(a, b) => elementwise(*a, *b, |x, y| x - y)?,
            Op::Mul(a, b) => elementwise(*a, *b, |x, y| x * y)?,
            Op::Scale(a, f) => {
                let f = T::from_f64(*f);
                val(*a).map(|x| x * f)
            }
            Op::Square(a) => val(*a).map(|x| x * x),
            Op::Relu(a) => val(*a).map(|x| if x > T::zero() { x } else { T::zero() }),
            Op::Tanh(a) => val(*a).map(|x| x.tanh()),
            Op::AddBias(x, b) => {
                let (xs, bs) = (val(*x).shape(), val(*b).shape());
                if xs.len() < 2 || bs != [xs[1]] {
                    return Err(mismatch(index, name, &xs[1.min(xs.len() - 1)..2.min(xs.len())], bs));
                }
                let (_, c, inner) = channel_layout(xs);
                let bias = val(*b).data();
                let data = val(*x)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v + bias[(i / inner) % c])
                    .collect();
                Tensor::new(xs, data)?
            }
            Op::Conv2d { x, w, stride, pad } => {
                let g = conv_geom(index, name, val(*x).shape(), val(*w).shape(), *stride, *pad, false)?;
                let data = kernels::conv2d(val(*x).data(), val(*w).data(), &g);
                Tensor::new(&[g.batch, g.out_ch, g.out_h, g.out_w], data)?
            }
            Op::ConvTranspose2d { x, w, stride, pad } => {
                let g = conv_geom(index, name, val(*x).shape(), val(*w).shape(), *stride, *pad, true)?;
                let data = kernels::conv_transpose2d(val(*x).data(), val(*w).data(), &g);
                Tensor::new(&[g.batch, g.out_ch, g.out_h, g.out_w], data)?
            }
            Op::BatchNorm { x, eps } => {
                let xs = val(*x).shape();
                if xs.len() < 2 {
                    return Err(mismatch(index, name, &[0, 0], xs));
                }
                let (n, c, inner) = channel_layout(xs);
                let count = (n * inner) as f64;
                let xd = val(*x).data();
                let mut out = vec![T::zero(); xd.len()];
                let mut inv = Vec::with_capacity(c);
                for ch in 0..c {
                    let (mut s, mut s2) = (0.0f64, 0.0f64);
                    for b in 0..n {
                        for v in &xd[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                            let v = v.as_f64();
                            s += v;
                            s2 += v * v;
                        }
                    }
                    let mean = s / count;
                    let var = (s2 / count - mean * mean).max(0.0);
                    let invstd = 1.0 / libm::sqrt(var + eps);
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        for i in base..base + inner {
                            out[i] = T::from_f64((xd[i].as_f64() - mean) * invstd);
                        }
                    }
                    inv.push(T::from_f64(invstd));
                }
                return Ok((Tensor::new(xs, out)?, inv));
            }
            Op::ChannelAffine { x, scale, shift } => {
                let xs = val(*x).shape();
                if xs.len() < 2 {
                    return Err(mismatch(index, name, &[0, 0], xs));
                }
                for p in [scale, shift] {
                    if val(*p).shape() != [xs[1]] {
                        return Err(mismatch(index, name, &[xs[1]], val(*p).shape()));
                    }
                }
                let (_, c, inner) = channel_layout(xs);
                let (sc, sh) = (val(*scale).data(), val(*shift).data());
                let data = val(*x)
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = (i / inner) % c;
                        v * sc[ch] + sh[ch]
                    })
                    .collect();
                Tensor::new(xs, data)?
            }
            Op::Upsample2x(x) => {
                let xs = val(*x).shape();
                if xs.len() != 4 {
                    return Err(mismatch(index, name, &[0, 0, 0, 0], xs));
                }
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let xd = val(*x).data();
                Tensor::<T>::from_fn(&[n, c, 2 * h, 2 * w], |i| {
                    let ox = i % (2 * w);
                    let oy = (i / (2 * w)) % (2 * h);
                    let plane = i / (4 * h * w);
                    xd[plane * h * w + (oy / 2) * w + ox / 2]
                })
            }
            Op::Reshape(x, shape) => {
                let v = val(*x);
                let n: usize = shape.iter().product();
                if n != v.len() {
                    return Err(mismatch(index, name, shape, v.shape()));
                }
                v.clone().reshape(shape)?
            }
            Op::MeanRows(x) => {
                let v = val(*x);
                let rows = v.shape()[0];
                let width = v.len() / rows;
                let mut acc = vec![0.0f64; width];
                for r in 0..rows {
                    for (a, x) in acc.iter_mut().zip(&v.data()[r * width..(r + 1) * width]) {
                        *a += x.as_f64();
                    }
                }
                let shape: Vec<usize> = if v.rank() > 1 { v.shape()[1..].to_vec() } else { vec![1] };
                Tensor::new(&shape, acc.into_iter().map(|a| T::from_f64(a / rows as f64)).collect())?
            }
            Op::Sum(x) => Tensor::scalar(T::from_f64(sum_f64(val(*x).data()))),
            Op::Mean(x) => {
                let v = val(*x);
                Tensor::scalar(T::from_f64(sum_f64(v.data()) / v.len() as f64))
            }
            Op::Lap1(x, y) => {
                same_shape(*x, *y)?;
                let xs = val(*x).shape();
                if xs.len() != 4 || xs[2] < 4 || xs[3] < 4 {
                    return Err(mismatch(index, name, &[xs[0], xs.get(1).copied().unwrap_or(1), 4, 4], xs));
                }
                let (n, h, w) = (xs[0], xs[2], xs[3]);
                let pyr = self.pyramid(h, w);
                let (xd, yd) = (val(*x).data(), val(*y).data());
                let mut total = 0.0;
                for (px, py) in xd.chunks(h * w).zip(yd.chunks(h * w)) {
                    let diff: Vec<f64> = px.iter().zip(py).map(|(a, b)| a.as_f64() - b.as_f64()).collect();
                    total += weighted_l1(&pyr.analyze(&diff));
                }
                Tensor::scalar(T::from_f64(total / n as f64))
            }
        };
        Ok((out, Vec::new()))
    }

    /// Replaces the named leaf values and re-evaluates every recorded op.
    pub fn forward(&mut self, feeds: &[(&str, Tensor<T>)]) -> Result<()> {
        for (name, value) in feeds {
            self.set_leaf(name, value.clone())?;
        }
        self.reevaluate()
    }

    pub fn set_leaf(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = *self
            .leaves
            .get(name)
            .ok_or_else(|| Error::UnknownLeaf(name.to_string()))?;
        let node = &mut self.nodes[id.0];
        if node.value.shape() != value.shape() {
            return Err(mismatch(id.0, node.op.name(), node.value.shape(), value.shape()));
        }
        node.value = value;
        Ok(())
    }

    fn reevaluate(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input | Op::Param { .. } | Op::Const) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.cache_pyramid(&op);
            let (value, aux) = self.eval(i, &op)?;
            let node = &mut self.nodes[i];
            node.value = value;
            node.aux = aux;
        }
        Ok(())
    }

    /// Copy of this graph evaluated in another precision.
    pub fn cast<U: Element>(&self) -> Graph<U> {
        let mut g = Graph {
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    op: n.op.clone(),
                    value: n.value.cast(),
                    aux: Vec::new(),
                    requires_grad: n.requires_grad,
                })
                .collect(),
            leaves: self.leaves.clone(),
            pyramids: self.pyramids.clone(),
        };
        g.reevaluate().expect("graph re-evaluation in another precision");
        g
    }

    /// Hash of the side taken at every non-differentiable point (ReLU inputs,
    /// Lap1 band signs). Two evaluations with equal signatures lie on the same
    /// smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |s: u8| {
            h ^= s as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        let sign = |v: f64| -> u8 {
            if v > 0.0 {
                2
            } else if v < 0.0 {
                0
            } else {
                1
            }
        };
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => {
                    for v in self.nodes[a.0].value.data() {
                        mix(sign(v.as_f64()));
                    }
                }
                Op::Lap1(x, y) => {
                    let xs = self.nodes[x.0].value.shape();
                    let (h, w) = (xs[2], xs[3]);
                    let pyr = self.pyramid(h, w);
                    let (xd, yd) = (self.nodes[x.0].value.data(), self.nodes[y.0].value.data());
                    for (px, py) in xd.chunks(h * w).zip(yd.chunks(h * w)) {
                        let diff: Vec<f64> =
                            px.iter().zip(py).map(|(a, b)| a.as_f64() - b.as_f64()).collect();
                        for level in pyr.analyze(&diff) {
                            level.iter().for_each(|&v| mix(sign(v)));
                        }
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse-mode gradients of a scalar `loss`. Trainable parameters that do
    /// not influence the loss receive zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: lv.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Param { .. } = node.op {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        let mut params = BTreeMap::new();
        for (name, id) in self.trainable_params() {
            let shape = self.nodes[id.0].value.shape();
            let grad = match adj.get_mut(id.0).and_then(Option::take) {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(shape),
            };
            params.insert(name, grad);
        }
        Ok(Gradients { params })
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut acc = |id: NodeId, contrib: Vec<T>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut adj[id.0] {
                Some(a) => a.iter_mut().zip(contrib).for_each(|(a, c)| *a = *a + c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let two = T::from_f64(2.0);
        match node.op {
            Op::Input | Op::Param { .. } | Op::Const => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(a) {
                    acc(a, kernels::matmul_nt(g, val(b).data(), m, n, k));
                }
                if needs(b) {
                    acc(b, kernels::matmul_tn(val(a).data(), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    acc(a, g.iter().zip(val(b).data()).map(|(&g, &y)| g * y).collect());
                }
                if needs(b) {
                    acc(b, g.iter().zip(val(a).data()).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, f) => {
                let f = T::from_f64(f);
                acc(a, g.iter().map(|&v| v * f).collect());
            }
            Op::Square(a) => {
                acc(a, g.iter().zip(val(a).data()).map(|(&g, &x)| g * two * x).collect());
            }
            Op::Relu(a) => {
                acc(
                    a,
                    g.iter()
                        .zip(val(a).data())
                        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Tanh(a) => {
                acc(
                    a,
                    g.iter()
                        .zip(node.value.data())
                        .map(|(&g, &y)| g * (T::one() - y * y))
                        .collect(),
                );
            }
            Op::AddBias(x, b) => {
                let (_, c, inner) = channel_layout(val(x).shape());
                if needs(b) {
                    let mut db = vec![0.0f64; c];
                    for (j, &v) in g.iter().enumerate() {
                        db[(j / inner) % c] += v.as_f64();
                    }
                    acc(b, db.into_iter().map(T::from_f64).collect());
                }
                acc(x, g.to_vec());
            }
            Op::Conv2d { x, w, stride, pad } => {
                let geom = conv_geom(i, "conv2d", val(x).shape(), val(w).shape(), stride, pad, false)
                    .expect("validated at build");
                let (dx, dw) = kernels::conv2d_backward(
                    val(x).data(),
                    val(w).data(),
                    g,
                    &geom,
                    needs(x),
                    needs(w),
                );
                if let Some(dx) = dx {
                    acc(x, dx);
                }
                if let Some(dw) = dw {
                    acc(w, dw);
                }
            }
            Op::ConvTranspose2d { x, w, stride, pad } => {
                let geom = conv_geom(i, "conv_transpose2d", val(x).shape(), val(w).shape(), stride, pad, true)
                    .expect("validated at build");
                let (dx, dw) = kernels::conv_transpose2d_backward(
                    val(x).data(),
                    val(w).data(),
                    g,
                    &geom,
                    needs(x),
                    needs(w),
                );
                if let Some(dx) = dx {
                    acc(x, dx);
                }
                if let Some(dw) = dw {
                    acc(w, dw);
                }
            }
            Op::BatchNorm { x, .. } => {
                let (n, c, inner) = channel_layout(val(x).shape());
                let count = (n * inner) as f64;
                let y = node.value.data();
                let mut dx = vec![T::zero(); g.len()];
                for ch in 0..c {
                    let (mut sg, mut sgy) = (0.0f64, 0.0f64);
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        for j in base..base + inner {
                            sg += g[j].as_f64();
                            sgy += g[j].as_f64() * y[j].as_f64();
                        }
                    }
                    let (mg, mgy) = (sg / count, sgy / count);
                    let invstd = node.aux[ch].as_f64();
                    for b in 0..n {
                        let base = (b * c + ch) * inner;
                        for j in base..base + inner {
                            dx[j] = T::from_f64(invstd * (g[j].as_f64() - mg - y[j].as_f64() * mgy));
                        }
                    }
                }
                acc(x, dx);
            }
            Op::ChannelAffine { x, scale, shift } => {
                let (_, c, inner) = channel_layout(val(x).shape());
                let sc = val(scale).data();
                if needs(scale) || needs(shift) {
                    let (mut ds, mut db) = (vec![0.0f64; c], vec![0.0f64; c]);
                    for (j, (&gv, &xv)) in g.iter().zip(val(x).data()).enumerate() {
                        let ch = (j / inner) % c;
                        ds[ch] += gv.as_f64() * xv.as_f64();
                        db[ch] += gv.as_f64();
                    }
                    acc(scale, ds.into_iter().map(T::from_f64).collect());
                    acc(shift, db.into_iter().map(T::from_f64).collect());
                }
                if needs(x) {
                    acc(
                        x,
                        g.iter()
                            .enumerate()
                            .map(|(j, &gv)| gv * sc[(j / inner) % c])
                            .collect(),
                    );
                }
            }
            Op::Upsample2x(x) => {
                let xs = val(x).shape();
                let (h, w) = (xs[2], xs[3]);
                let mut dx = vec![0.0f64; val(x).len()];
                for (j, &gv) in g.iter().enumerate() {
                    let ox = j % (2 * w);
                    let oy = (j / (2 * w)) % (2 * h);
                    let plane = j / (4 * h * w);
                    dx[plane * h * w + (oy / 2) * w + ox / 2] += gv.as_f64();
                }
                acc(x, dx.into_iter().map(T::from_f64).collect());
            }
            Op::Reshape(x, _) => acc(x, g.to_vec()),
            Op::MeanRows(x) => {
                let rows = val(x).shape()[0];
                let inv = T::from_f64(1.0 / rows as f64);
                let scaled: Vec<T> = g.iter().map(|&v| v * inv).collect();
                let mut dx = Vec::with_capacity(val(x).len());
                for _ in 0..rows {
                    dx.extend_from_slice(&scaled);
                }
                acc(x, dx);
            }
            Op::Sum(x) => acc(x, vec![g[0]; val(x).len()]),
            Op::Mean(x) => {
                let n = val(x).len();
                acc(x, vec![T::from_f64(g[0].as_f64() / n as f64); n]);
            }
            Op::Lap1(x, y) => {
                let xs = val(x).shape();
                let (n, h, w) = (xs[0], xs[2], xs[3]);
                let pyr = self.pyramid(h, w);
                let scale = g[0].as_f64() / n as f64;
                let mut dx = Vec::with_capacity(val(x).len());
                for (px, py) in val(x).data().chunks(h * w).zip(val(y).data().chunks(h * w)) {
                    let diff: Vec<f64> = px.iter().zip(py).map(|(a, b)| a.as_f64() - b.as_f64()).collect();
                    let cot: Vec<Vec<f64>> = pyr
                        .analyze(&diff)
                        .iter()
                        .enumerate()
                        .map(|(j, level)| {
                            let wj = level_weight(j) * scale;
                            level.iter().map(|&v| wj * signum0(v)).collect()
                        })
                        .collect();
                    dx.extend(pyr.analyze_adjoint(&cot).into_iter().map(T::from_f64));
                }
                if needs(y) {
                    acc(y, dx.iter().map(|&v| -v).collect());
                }
                acc(x, dx);
            }
        }
    }
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn sum_f64<T: Element>(xs: &[T]) -> f64 {
    xs.iter().map(|v| v.as_f64()).sum()
}

/// `sum_j 2^{-2j} |L_j|_1` over pyramid levels.
pub fn weighted_l1(levels: &[Vec<f64>]) -> f64 {
    levels
        .iter()
        .enumerate()
        .map(|(j, l)| level_weight(j) * l.iter().map(|v| v.abs()).sum::<f64>())
        .sum()
}

fn conv_geom(
    index: usize,
    name: &'static str,
    xs: &[usize],
    ws: &[usize],
    stride: usize,
    pad: usize,
    transpose: bool,
) -> Result<ConvGeom> {
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
        return Err(mismatch(index, name, &[0, 0, 0, 0], ws));
    }
    let (w_in, w_out) = if transpose { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
    if xs[1] != w_in {
        let mut expected = xs.to_vec();
        expected[1] = w_in;
        return Err(mismatch(index, name, &expected, xs));
    }
    let k = ws[2];
    let len = |n| {
        if transpose {
            kernels::conv_transpose_out_len(n, k, stride, pad)
        } else {
            kernels::conv_out_len(n, k, stride, pad)
        }
    };
    let (Some(out_h), Some(out_w)) = (len(xs[2]), len(xs[3])) else {
        return Err(mismatch(index, name, &[k, k], &xs[2..]));
    };
    Ok(ConvGeom {
        batch: xs[0],
        in_ch: xs[1],
        in_h: xs[2],
        in_w: xs[3],
        out_ch: w_out,
        out_h,
        out_w,
        kernel: k,
        stride,
        pad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_tanh_values() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.input("z", t(&[1], &[0.0]));
        let th = g.tanh(z).unwrap();
        assert_eq!(g.value(th).data(), &[0.0]);
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.param("w", Tensor::full(&[1, 1, 3, 3], 1.0), true);
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn mean_square_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = g.square(x).unwrap();
        let loss = g.mean(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.get("x").unwrap().data();
        let expected = [2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, b) in gx.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tanh_gradient_at_origin() {
        let mut g = Graph::new();
        let w = g.param("w", t(&[1], &[0.0]), true);
        let one = g.constant(t(&[1], &[1.0]));
        let wx = g.mul(w, one).unwrap();
        let y = g.tanh(wx).unwrap();
        let loss = g.sum(y).unwrap();
        assert_eq!(g.backward(loss).unwrap().get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn unreachable_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param("a", t(&[2], &[1.0, 2.0]), true);
        g.param("b", t(&[2, 2], &[1.0; 4]), true);
        let loss = g.sum(a).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("b").unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(grads.get("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let a = g.param("a", t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut g = Graph::<f32>::new();
        let a = g.input("a", Tensor::zeros(&[2]));
        let b = g.input("b", Tensor::zeros(&[3]));
        match g.add(a, b) {
            Err(Error::ShapeMismatch { node, op, expected, actual }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "add");
                assert_eq!(expected, [2]);
                assert_eq!(actual, [3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let x = g.input("x", Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.param("w", Tensor::zeros(&[3, 5, 3, 3]), true);
        assert!(matches!(g.conv2d(x, w, 1, 1), Err(Error::ShapeMismatch { op: "conv2d", .. })));
    }

    #[test]
    fn forward_replays_with_new_inputs() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[2], &[1.0, 2.0]));
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.value(s).item(), 5.0);
        g.forward(&[("x", t(&[2], &[3.0, 4.0]))]).unwrap();
        assert_eq!(g.value(s).item(), 25.0);
        assert!(matches!(
            g.forward(&[("nope", t(&[1], &[0.0]))]),
            Err(Error::UnknownLeaf(_))
        ));
        assert!(matches!(
            g.forward(&[("x", t(&[3], &[0.0; 3]))]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn conv_transpose_doubles_extent() {
        let mut g = Graph::<f32>::new();
        let x = g.input("x", Tensor::full(&[2, 3, 4, 4], 1.0));
        let w = g.param("w", Tensor::full(&[3, 5, 4, 4], 1.0), true);
        let y = g.conv_transpose2d(x, w, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 5, 8, 8]);
    }

    #[test]
    fn batch_norm_output_is_standardised() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::from_fn(&[4, 2, 3, 3], |i| (i * 7 % 11) as f32));
        let y = g.batch_norm(x, 1e-5).unwrap();
        let (n, c, inner) = channel_layout(g.value(y).shape());
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|b| {
                    let base = (b * c + ch) * inner;
                    g.value(y).data()[base..base + inner].iter().map(|&v| v as f64).collect::<Vec<_>>()
                })
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn lap1_of_identical_inputs_is_zero() {
        let mut g = Graph::new();
        let img = Tensor::from_fn(&[2, 1, 8, 8], |i| (i as f32 * 0.37).sin());
        let x = g.input("x", img.clone());
        let y = g.input("y", img);
        let l = g.lap1(x, y).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
