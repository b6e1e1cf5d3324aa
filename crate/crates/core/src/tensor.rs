//! Dense `f64` tensors and a tape-style reverse-mode differentiation graph.
//!
//! A [`Graph`] is an append-only list of nodes. Every node stores the tensor it
//! produced together with the primitive and the ids of its inputs, and every
//! input id is smaller than the id of the node that consumes it, so the node
//! order is already a topological order. [`Graph::backward`] walks the list in
//! reverse from a scalar root and leaves a gradient on every node.
//!
//! The primitive set is deliberately closed: matmul, conv2d, add (with bias
//! broadcast along axis 1), relu, softmax cross-entropy, the shifted squared
//! sine used by the quantization regularizer, square, mean, scalar scale,
//! reshape, and a straight-through pass used for quantized forward passes.

use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from a row-major buffer. Every dimension must be
    /// positive, the buffer length must match the shape, and all values must
    /// be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} must have at least one axis and positive extents"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for optimizer updates on parameter tensors. Callers are
    /// responsible for keeping the values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a `[1]`-shaped tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Dimension(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same values with a different shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Applies `f` elementwise; fails if any result is non-finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    Conv2d { stride: usize, padding: usize },
    Add,
    AddBias,
    Relu,
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Vec<f64> },
    SinSqAffine { period: f64, delta: f64 },
    Square,
    ReduceMean,
    Scale(f64),
    Reshape,
    StraightThrough,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Add => "add",
            Op::AddBias => "add_bias",
            Op::Relu => "relu",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SinSqAffine { .. } => "sin_sq_affine",
            Op::Square => "square",
            Op::ReduceMean => "reduce_mean",
            Op::Scale(_) => "scale",
            Op::Reshape => "reshape",
            Op::StraightThrough => "straight_through",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    root: Option<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The node last passed to [`Graph::backward`], if any.
    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let mut tensor = tensor;
        tensor.grad = None;
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: tensor,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Index(format!(
                "node {} does not exist (graph has {} nodes)",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node { op, inputs, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = match (av.shape(), bv.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => {
                return Err(Error::Dimension(format!(
                    "matmul of {sa:?} by {sb:?}: expected [m, k] x [k, n]"
                )))
            }
        };
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        self.push(Op::MatMul, vec![a, b], vec![m, n], out)
    }

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        self.check(x)?;
        self.check(kernel)?;
        let geo = ConvGeometry::new(self.value(x).shape(), self.value(kernel).shape(), stride, padding)?;
        let out = geo.forward(self.value(x).data(), self.value(kernel).data());
        self.push(Op::Conv2d { stride, padding }, vec![x, kernel], geo.out_shape(), out)
    }

    /// Elementwise sum of equal shapes, or a bias add when `b` is rank 1 and
    /// its length equals axis 1 of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            let shape = av.shape().to_vec();
            return self.push(Op::Add, vec![a, b], shape, out);
        }
        if bv.shape().len() == 1 && av.shape().len() >= 2 && av.shape()[1] == bv.len() {
            let channels = bv.len();
            let inner: usize = av.shape()[2..].iter().product();
            let out = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv.data()[(i / inner) % channels])
                .collect();
            let shape = av.shape().to_vec();
            return self.push(Op::AddBias, vec![a, b], shape, out);
        }
        Err(Error::Dimension(format!(
            "cannot add {:?} and {:?}",
            av.shape(),
            bv.shape()
        )))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x);
        let out = v.data().iter().map(|&e| if e > 0.0 { e } else { 0.0 }).collect();
        let shape = v.shape().to_vec();
        self.push(Op::Relu, vec![x], shape, out)
    }

    /// Mean negative log-likelihood of `labels` under the row-wise softmax of
    /// `logits` (`[N, C]`).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let v = self.value(logits);
        let (n, c) = match v.shape() {
            [n, c] => (*n, *c),
            s => return Err(Error::Dimension(format!("logits must be [N, C], got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = 0.0;
        for (row, &label) in v.data().chunks_exact(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let log_sum = sum.ln();
            total += log_sum - (row[label] - max);
            probs.extend(row.iter().map(|z| (z - max).exp() / sum));
        }
        let loss = total / n as f64;
        self.push(
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
            vec![1],
            vec![loss],
        )
    }

    /// Elementwise `sin²(π (x + delta) / period)`.
    pub fn sin_sq_affine(&mut self, x: NodeId, period: f64, delta: f64) -> Result<NodeId> {
        self.check(x)?;
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::Parameter(format!("period must be positive, got {period}")));
        }
        if !delta.is_finite() {
            return Err(Error::Parameter(format!("offset must be finite, got {delta}")));
        }
        let v = self.value(x);
        let out = v
            .data()
            .iter()
            .map(|&w| {
                let s = (PI * (w + delta) / period).sin();
                s * s
            })
            .collect();
        let shape = v.shape().to_vec();
        self.push(Op::SinSqAffine { period, delta }, vec![x], shape, out)
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x);
        let out = v.data().iter().map(|e| e * e).collect();
        let shape = v.shape().to_vec();
        self.push(Op::Square, vec![x], shape, out)
    }

    pub fn reduce_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let mut sum = 0.0;
        for e in v.data() {
            sum += e;
        }
        let mean = sum / v.len() as f64;
        self.push(Op::ReduceMean, vec![x], vec![1], vec![mean])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.check(x)?;
        if !factor.is_finite() {
            return Err(Error::Parameter(format!("scale factor must be finite, got {factor}")));
        }
        let v = self.value(x);
        let out = v.data().iter().map(|e| e * factor).collect();
        let shape = v.shape().to_vec();
        self.push(Op::Scale(factor), vec![x], shape, out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x);
        let n: usize = shape.iter().product();
        if n != v.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                v.shape()
            )));
        }
        let data = v.data().to_vec();
        self.push(Op::Reshape, vec![x], shape, data)
    }

    /// Produces `substitute` in the forward pass while routing the incoming
    /// gradient unchanged to `x` (identity Jacobian). Used to feed quantized
    /// weights forward and apply their gradient to the full-precision copy.
    pub fn straight_through(&mut self, x: NodeId, substitute: Tensor) -> Result<NodeId> {
        self.check(x)?;
        if self.value(x).shape() != substitute.shape() {
            return Err(Error::Dimension(format!(
                "straight-through substitute {:?} does not match {:?}",
                substitute.shape(),
                self.value(x).shape()
            )));
        }
        let shape = substitute.shape.clone();
        self.push(Op::StraightThrough, vec![x], shape, substitute.data)
    }

    /// Reverse-mode accumulation from the scalar node `root`. Afterwards every
    /// node carries a gradient; nodes the root does not depend on get zeros.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.check(root)?;
        if self.value(root).shape() != [1] {
            return Err(Error::Contract(format!(
                "backward root must have shape [1], got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = self.local_grads(node, &g);
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let g = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            node.value.grad = Some(g);
        }
        self.root = Some(root);
        Ok(())
    }

    /// Gradient contribution of `node` to each of its inputs, given the
    /// gradient `g` flowing into the node's output.
    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<Vec<f64>> {
        let input = |k: usize| &self.nodes[node.inputs[k].0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * b.data()[p * n + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                let mut gb = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for i in 0..m {
                            s += a.data()[i * k + p] * g[i * n + j];
                        }
                        gb[p * n + j] = s;
                    }
                }
                vec![ga, gb]
            }
            Op::Conv2d { stride, padding } => {
                let (x, kernel) = (input(0), input(1));
                let geo = ConvGeometry::new(x.shape(), kernel.shape(), *stride, *padding)
                    .expect("conv geometry validated at construction");
                let (gx, gk) = geo.backward(x.data(), kernel.data(), g);
                vec![gx, gk]
            }
            Op::Add => vec![g.to_vec(), g.to_vec()],
            Op::AddBias => {
                let a = input(0);
                let channels = input(1).len();
                let inner: usize = a.shape()[2..].iter().product();
                let mut gb = vec![0.0; channels];
                for (i, gi) in g.iter().enumerate() {
                    gb[(i / inner) % channels] += gi;
                }
                vec![g.to_vec(), gb]
            }
            Op::Relu => {
                let x = input(0);
                let gx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                    .collect();
                vec![gx]
            }
            Op::SoftmaxCrossEntropy { labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let upstream = g[0] / n as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * upstream).collect();
                for (row, &label) in labels.iter().enumerate() {
                    gx[row * c + label] -= upstream;
                }
                vec![gx]
            }
            Op::SinSqAffine { period, delta } => {
                let x = input(0);
                let gx = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&w, &gi)| gi * (PI / period) * (2.0 * PI * (w + delta) / period).sin())
                    .collect();
                vec![gx]
            }
            Op::Square => {
                let x = input(0);
                vec![x.data().iter().zip(g).map(|(v, gi)| 2.0 * v * gi).collect()]
            }
            Op::ReduceMean => {
                let n = input(0).len();
                vec![vec![g[0] / n as f64; n]]
            }
            Op::Scale(factor) => vec![g.iter().map(|gi| gi * factor).collect()],
            Op::Reshape | Op::StraightThrough => vec![g.to_vec()],
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    fn new(x: &[usize], k: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let ([n, c, h, w], [f, kc, kh, kw]) = (x, k) else {
            return Err(Error::Dimension(format!(
                "conv2d expects [N, C, H, W] input and [F, C, Kh, Kw] kernel, got {x:?} and {k:?}"
            )));
        };
        if c != kc {
            return Err(Error::Dimension(format!(
                "conv2d input has {c} channels, kernel expects {kc}"
            )));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be positive".into()));
        }
        let out_h = conv_out_extent(*h, *kh, stride, padding);
        let out_w = conv_out_extent(*w, *kw, stride, padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::Dimension(format!(
                "conv2d output size is not integral for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
            )));
        };
        Ok(ConvGeometry {
            batch: *n,
            channels: *c,
            height: *h,
            width: *w,
            filters: *f,
            kh: *kh,
            kw: *kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.out_h, self.out_w]
    }

    /// Input coordinate hit by output position `o` and kernel tap `t`, or
    /// `None` when it falls into the zero padding.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t).checked_sub(self.padding)?;
        (pos < extent).then_some(pos)
    }

    fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.batch * self.filters * self.out_h * self.out_w];
        let mut idx = 0;
        for n in 0..self.batch {
            for f in 0..self.filters {
                for oi in 0..self.out_h {
                    for oj in 0..self.out_w {
                        let mut s = 0.0;
                        for c in 0..self.channels {
                            for u in 0..self.kh {
                                let Some(i) = self.source(oi, u, self.height) else { continue };
                                for v in 0..self.kw {
                                    let Some(j) = self.source(oj, v, self.width) else { continue };
                                    s += x[self.x_index(n, c, i, j)] * k[self.k_index(f, c, u, v)];
                                }
                            }
                        }
                        out[idx] = s;
                        idx += 1;
                    }
                }
            }
        }
        out
    }

    fn backward(&self, x: &[f64], k: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gx = vec![0.0; x.len()];
        let mut gk = vec![0.0; k.len()];
        let mut idx = 0;
        for n in 0..self.batch {
            for f in 0..self.filters {
                for oi in 0..self.out_h {
                    for oj in 0..self.out_w {
                        let go = g[idx];
                        idx += 1;
                        for c in 0..self.channels {
                            for u in 0..self.kh {
                                let Some(i) = self.source(oi, u, self.height) else { continue };
                                for v in 0..self.kw {
                                    let Some(j) = self.source(oj, v, self.width) else { continue };
                                    let xi = self.x_index(n, c, i, j);
                                    let ki = self.k_index(f, c, u, v);
                                    gx[xi] += go * k[ki];
                                    gk[ki] += go * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
        (gx, gk)
    }

    #[inline]
    fn x_index(&self, n: usize, c: usize, i: usize, j: usize) -> usize {
        ((n * self.channels + c) * self.height + i) * self.width + j
    }

    #[inline]
    fn k_index(&self, f: usize, c: usize, u: usize, v: usize) -> usize {
        ((f * self.channels + c) * self.kh + u) * self.kw + v
    }
}
