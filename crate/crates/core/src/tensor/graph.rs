use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and dilation of a "same"-padded convolution. Padding per side is
/// `dilation * (k - 1) / 2`, which requires odd kernel extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            dilation: (1, 1),
        }
    }
}

impl Conv2dSpec {
    pub fn dilated(dh: usize, dw: usize) -> Self {
        Self {
            stride: (1, 1),
            dilation: (dh, dw),
        }
    }

    pub fn strided(sh: usize, sw: usize) -> Self {
        Self {
            stride: (sh, sw),
            dilation: (1, 1),
        }
    }
}

/// Which axis of a `[C, T, F]` map becomes the attention sequence when the
/// channels are split into heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadLayout {
    /// Positions are time frames, features are `(channels_per_head, F)`.
    Time,
    /// Positions are frequency bins, features are `(channels_per_head, T)`.
    Freq,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Reshape(NodeId),
    Narrow {
        x: NodeId,
        start: usize,
    },
    Gather {
        x: NodeId,
        index: Rc<Vec<u32>>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        rows: usize,
        fin: usize,
        fout: usize,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax {
        x: NodeId,
        cols: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cols: usize,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    StatPool {
        x: NodeId,
        channels: usize,
        mean: Vec<f64>,
        std: Vec<f64>,
    },
    ChannelScale {
        x: NodeId,
        scale: NodeId,
        channels: usize,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    SumSquaredError {
        x: NodeId,
        target: Tensor,
    },
    Dot {
        x: NodeId,
        weights: Tensor,
    },
    Sum(NodeId),
    CrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Reshape(..) => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Gather { .. } => "gather",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::StatPool { .. } => "stat_pool",
            Op::ChannelScale { .. } => "channel_scale",
            Op::MatMul { .. } => "matmul",
            Op::SumSquaredError { .. } => "sum_squared_error",
            Op::Dot { .. } => "dot",
            Op::Sum(..) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Exact value of scalar reductions, which `f32` storage would round.
    scalar: Option<f64>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Recording tape for reverse-mode differentiation.
///
/// Every op appends a node whose inputs already exist, so node order is a
/// topological order and [`Graph::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_fault: Option<f32>,
    first_non_finite: Option<&'static str>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales every linear-layer weight gradient by `factor`. Only for
    /// verifying that gradient checks detect wrong derivatives.
    #[doc(hidden)]
    pub fn inject_grad_fault(&mut self, factor: f32) {
        self.grad_fault = Some(factor);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Name of the first op that produced a NaN or infinity, if any. Only
    /// tracked in debug builds.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.first_non_finite
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push_node(value, op, requires_grad, None)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool, scalar: Option<f64>) -> NodeId {
        if cfg!(debug_assertions) && self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scalar,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, v: f64, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.push_node(Tensor::scalar(v as f32), op, requires_grad, Some(v))
    }

    /// Scalar result of combining exact scalars; keeps the input's shape.
    fn push_scalar_shaped(&mut self, v: f64, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let shape = self.shape(inputs[0]).to_vec();
        self.push_node(Tensor::full(&shape, v as f32), op, requires_grad, Some(v))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push_node(t, Op::Leaf, true, None)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_node(t, Op::Leaf, false, None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Hash of the on/off pattern of every relu on the tape. Two evaluations
    /// with equal signatures lie on the same linear piece of each relu.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in self.data(x) {
                    h = (h ^ (v > 0.0) as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Scalar value, at full precision for reductions.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let node = &self.nodes[id.0];
        node.scalar.unwrap_or_else(|| node.value.item() as f64)
    }

    fn data(&self, id: NodeId) -> &[f32] {
        self.nodes[id.0].value.data()
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn map(&mut self, x: NodeId, op: Op, f: impl Fn(f32) -> f32) -> NodeId {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&a| f(a)).collect(),
        };
        self.push(out, op, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        if let (Some(x), Some(y)) = (self.nodes[a.0].scalar, self.nodes[b.0].scalar) {
            return Ok(self.push_scalar_shaped(x + y, Op::Add(a, b), &[a, b]));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: NodeId, s: f32) -> NodeId {
        if let Some(v) = self.nodes[x.0].scalar {
            return self.push_scalar_shaped(v * s as f64, Op::Scale(x, s), &[x]);
        }
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Contiguous block `[start, start + prod(shape))` of the flattened input.
    pub fn narrow(&mut self, x: NodeId, start: usize, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        let src = self.data(x);
        if start + n > src.len() {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) out of {} values",
                start + n,
                src.len()
            )));
        }
        let out = Tensor::new(shape.to_vec(), src[start..start + n].to_vec())?;
        Ok(self.push(out, Op::Narrow { x, start }, &[x]))
    }

    fn gather(&mut self, x: NodeId, index: Vec<u32>, shape: &[usize]) -> Result<NodeId> {
        let src = self.data(x);
        let data = index.iter().map(|&i| src[i as usize]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(
            out,
            Op::Gather {
                x,
                index: Rc::new(index),
            },
            &[x],
        ))
    }

    fn head_index(c: usize, t: usize, f: usize, heads: usize, layout: HeadLayout) -> (Vec<u32>, [usize; 3]) {
        let per = c / heads;
        let mut index = Vec::with_capacity(c * t * f);
        let shape = match layout {
            HeadLayout::Time => {
                for h in 0..heads {
                    for ti in 0..t {
                        for ci in 0..per {
                            for fi in 0..f {
                                index.push((((h * per + ci) * t + ti) * f + fi) as u32);
                            }
                        }
                    }
                }
                [heads, t, per * f]
            }
            HeadLayout::Freq => {
                for h in 0..heads {
                    for fi in 0..f {
                        for ci in 0..per {
                            for ti in 0..t {
                                index.push((((h * per + ci) * t + ti) * f + fi) as u32);
                            }
                        }
                    }
                }
                [heads, f, per * t]
            }
        };
        (index, shape)
    }

    /// `[C, T, F]` to `[heads, positions, features]`; head `h` owns channels
    /// `h * C/heads .. (h + 1) * C/heads`.
    pub fn split_heads(&mut self, x: NodeId, heads: usize, layout: HeadLayout) -> Result<NodeId> {
        let &[c, t, f] = self.shape(x) else {
            return Err(Error::shape(format!(
                "split_heads expects [C,T,F], got {:?}",
                self.shape(x)
            )));
        };
        if heads == 0 || c % heads != 0 {
            return Err(Error::invalid(format!("{c} channels do not split into {heads} heads")));
        }
        let (index, shape) = Self::head_index(c, t, f, heads, layout);
        self.gather(x, index, &shape)
    }

    /// Inverse of [`Graph::split_heads`] back to `[C, T, F]`.
    pub fn merge_heads(&mut self, x: NodeId, (c, t, f): (usize, usize, usize), layout: HeadLayout) -> Result<NodeId> {
        let heads = self.shape(x).first().copied().unwrap_or(0);
        if heads == 0 || c % heads != 0 || self.value(x).len() != c * t * f {
            return Err(Error::shape(format!(
                "merge_heads: {:?} does not fold into [{c},{t},{f}]",
                self.shape(x)
            )));
        }
        let (fwd, _) = Self::head_index(c, t, f, heads, layout);
        let mut inv = vec![0u32; fwd.len()];
        for (i, &src) in fwd.iter().enumerate() {
            inv[src as usize] = i as u32;
        }
        self.gather(x, inv, &[c, t, f])
    }

    /// `x W + b` over the last axis of `x`; `w` is `[F_in, F_out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (Some(&fin), [wi, fout]) = (xs.last(), ws.as_slice()) else {
            return Err(Error::shape(format!("linear: x {xs:?}, w {ws:?}")));
        };
        let fout = *fout;
        if fin != *wi {
            return Err(Error::shape(format!("linear: x {xs:?} vs w {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(Error::shape(format!("linear: bias {:?}, want [{fout}]", self.shape(b))));
            }
        }
        let rows = self.value(x).len() / fin.max(1);
        let mut out = vec![0.0f32; rows * fout];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bias);
            }
        }
        kernels::mm_nn(self.data(x), self.data(w), &mut out, rows, fin, fout);
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = fout;
        let inputs: Vec<NodeId> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear {
                x,
                w,
                b,
                rows,
                fin,
                fout,
            },
            &inputs,
        ))
    }

    /// Zero-padded "same" cross-correlation of `x: [C_in, H, W]` with
    /// `k: [C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: Option<NodeId>, spec: Conv2dSpec) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (&[cin, h, w], &[cout, kcin, kh, kw]) = (xs.as_slice(), ks.as_slice()) else {
            return Err(Error::shape(format!("conv2d: x {xs:?}, kernel {ks:?}")));
        };
        if kcin != cin {
            return Err(Error::shape(format!("conv2d: x {xs:?} vs kernel {ks:?}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!("conv2d: even kernel {kh}x{kw} is unsupported")));
        }
        if spec.stride.0 == 0 || spec.stride.1 == 0 || spec.dilation.0 == 0 || spec.dilation.1 == 0 {
            return Err(Error::invalid("conv2d: stride and dilation must be positive"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!("conv2d: bias {:?}, want [{cout}]", self.shape(b))));
            }
        }
        let geom = ConvGeom::same(cin, h, w, cout, (kh, kw), spec.stride, spec.dilation);
        let out = kernels::conv2d_forward(self.data(x), self.data(k), b.map(|b| self.data(b)), &geom);
        let inputs: Vec<NodeId> = [Some(x), Some(k), b].into_iter().flatten().collect();
        Ok(self.push(
            Tensor::new(vec![cout, geom.ho, geom.wo], out)?,
            Op::Conv2d { x, k, b, geom },
            &inputs,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map(x, Op::Sigmoid(x), |v| (1.0 / (1.0 + (-(v as f64)).exp())) as f32)
    }

    /// Softmax over the last axis, shifted by the row maximum.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let cols = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::shape("softmax of a scalar"))?;
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(cols) {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| (v / s) as f32));
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(out, Op::Softmax { x, cols }, &[x]))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let cols = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::shape("layer_norm of a scalar"))?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::shape(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let n = self.value(x).len();
        let mut xhat = Vec::with_capacity(n);
        let mut rstd = Vec::with_capacity(n / cols);
        let mut out = Vec::with_capacity(n);
        for row in self.data(x).chunks(cols) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r as f32);
            for (j, &v) in row.iter().enumerate() {
                let xh = ((v as f64 - mean) * r) as f32;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// `[C, H, W]` to `[2C]`: per-channel means followed by population
    /// standard deviations (with `1e-8` added under the root).
    pub fn stat_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shape(x);
        if shape.len() < 2 || shape[1..].iter().product::<usize>() == 0 {
            return Err(Error::shape(format!("stat_pool: input {shape:?}")));
        }
        let channels = shape[0];
        let n = self.value(x).len() / channels;
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        for plane in self.data(x).chunks(n) {
            let m = plane.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
            mean.push(m);
            std.push((var + 1e-8).sqrt());
        }
        let data = mean.iter().chain(&std).map(|&v| v as f32).collect();
        let out = Tensor::new(vec![2 * channels], data)?;
        Ok(self.push(out, Op::StatPool { x, channels, mean, std }, &[x]))
    }

    /// Multiplies channel `c` of `x: [C, ...]` by `scale[c]`.
    pub fn channel_scale(&mut self, x: NodeId, scale: NodeId) -> Result<NodeId> {
        let channels = self.shape(x).first().copied().unwrap_or(0);
        if self.shape(scale) != [channels] {
            return Err(Error::shape(format!(
                "channel_scale: x {:?}, scale {:?}",
                self.shape(x),
                self.shape(scale)
            )));
        }
        let n = self.value(x).len() / channels.max(1);
        let s = self.data(scale);
        let data = self
            .data(x)
            .chunks(n)
            .zip(s)
            .flat_map(|(plane, &sv)| plane.iter().map(move |v| v * sv))
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::ChannelScale { x, scale, channels }, &[x, scale]))
    }

    /// Batched product of `a: [B, M, K]` with `b: [B, K, N]`, or with
    /// `b: [B, N, K]` transposed when `trans_b` is set.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[batch, m, k], &[bb, b1, b2]) = (as_.as_slice(), bs.as_slice()) else {
            return Err(Error::shape(format!("matmul: {as_:?} x {bs:?}")));
        };
        let (bk, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if bb != batch || bk != k {
            return Err(Error::shape(format!("matmul: {as_:?} x {bs:?} (trans_b={trans_b})")));
        }
        let mut out = vec![0.0f32; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            let am = &ad[i * m * k..(i + 1) * m * k];
            let bm = &bd[i * k * n..(i + 1) * k * n];
            let om = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                let bt = kernels::transpose(bm, n, k);
                kernels::mm_nn(am, &bt, om, m, k, n);
            } else {
                kernels::mm_nn(am, bm, om, m, k, n);
            }
        }
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        ))
    }

    /// `sum((x - target)^2)` as a scalar.
    pub fn sum_squared_error(&mut self, x: NodeId, target: Tensor) -> Result<NodeId> {
        if self.shape(x) != target.shape() {
            return Err(Error::shape(format!(
                "sum_squared_error: {:?} vs target {:?}",
                self.shape(x),
                target.shape()
            )));
        }
        let v = self
            .data(x)
            .iter()
            .zip(target.data())
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum();
        Ok(self.push_scalar(v, Op::SumSquaredError { x, target }, &[x]))
    }

    /// `sum(x * weights)` as a scalar, with constant weights.
    pub fn dot_const(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        if self.value(x).len() != weights.len() {
            return Err(Error::shape(format!(
                "dot_const: {:?} vs {:?}",
                self.shape(x),
                weights.shape()
            )));
        }
        let v = self
            .data(x)
            .iter()
            .zip(weights.data())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        Ok(self.push_scalar(v, Op::Dot { x, weights }, &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.data(x).iter().map(|&v| v as f64).sum();
        self.push_scalar(v, Op::Sum(x), &[x])
    }

    /// Negative log-softmax probability of `label` for a logit vector.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let n = self.value(logits).len();
        if self.shape(logits).len() != 1 || label >= n {
            return Err(Error::shape(format!(
                "cross_entropy: logits {:?}, label {label}",
                self.shape(logits)
            )));
        }
        let z = self.data(logits);
        let mx = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let e: Vec<f64> = z.iter().map(|&v| (v as f64 - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        let loss = s.ln() + mx - z[label] as f64;
        let probs = e.iter().map(|v| v / s).collect();
        Ok(self.push_scalar(loss, Op::CrossEntropy { logits, label, probs }, &[logits]))
    }

    /// Reverse sweep from a scalar `root`, seeding its gradient with 1.
    pub fn backward(&self, root: NodeId) -> Grads {
        self.backward_with_seed(root, 1.0)
    }

    /// Reverse sweep with root gradient `seed`.
    pub fn backward_with_seed(&self, root: NodeId, seed: f32) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let root_shape = self.shape(root).to_vec();
        grads[root.0] = Some(Tensor::full(&root_shape, seed));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contrib) in self.node_backward(id, &g) {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Grads { grads }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn like(&self, id: NodeId, data: Vec<f32>) -> Tensor {
        Tensor {
            shape: self.shape(id).to_vec(),
            data,
        }
    }

    fn node_backward(&self, id: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[id];
        let gd = g.data();
        let y = node.value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &i in [a, b] {
                    if self.wants(i) {
                        out.push((i, g.clone()));
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = gd.iter().zip(self.data(*b)).map(|(g, v)| g * v).collect();
                    out.push((*a, self.like(*a, d)));
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(self.data(*a)).map(|(g, v)| g * v).collect();
                    out.push((*b, self.like(*b, d)));
                }
            }
            Op::Scale(x, s) => {
                out.push((*x, self.like(*x, gd.iter().map(|g| g * s).collect())));
            }
            Op::Reshape(x) => {
                out.push((*x, self.like(*x, gd.to_vec())));
            }
            Op::Narrow { x, start } => {
                let mut d = vec![0.0f32; self.value(*x).len()];
                d[*start..*start + gd.len()].copy_from_slice(gd);
                out.push((*x, self.like(*x, d)));
            }
            Op::Gather { x, index } => {
                let mut d = vec![0.0f32; self.value(*x).len()];
                for (gv, &i) in gd.iter().zip(index.iter()) {
                    d[i as usize] += gv;
                }
                out.push((*x, self.like(*x, d)));
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                fin,
                fout,
            } => {
                let (rows, fin, fout) = (*rows, *fin, *fout);
                if self.wants(*x) {
                    let wt = kernels::transpose(self.data(*w), fin, fout);
                    let mut d = vec![0.0f32; rows * fin];
                    kernels::mm_nn(gd, &wt, &mut d, rows, fout, fin);
                    out.push((*x, self.like(*x, d)));
                }
                if self.wants(*w) {
                    let mut d = kernels::mm_tn(self.data(*x), gd, fin, rows, fout);
                    if let Some(f) = self.grad_fault {
                        d.iter_mut().for_each(|v| *v *= f);
                    }
                    out.push((*w, self.like(*w, d)));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut acc = vec![0.0f64; fout];
                    for row in gd.chunks(fout) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += *v as f64;
                        }
                    }
                    out.push((b, self.like(b, acc.into_iter().map(|v| v as f32).collect())));
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                if self.wants(*x) {
                    let d = kernels::conv2d_backward_input(gd, self.data(*k), geom);
                    out.push((*x, self.like(*x, d)));
                }
                if self.wants(*k) {
                    let d = kernels::conv2d_backward_kernel(gd, self.data(*x), geom);
                    out.push((*k, self.like(*k, d)));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    out.push((b, self.like(b, kernels::channel_sums(gd, geom.cout))));
                }
            }
            Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                out.push((*x, self.like(*x, d)));
            }
            Op::Sigmoid(x) => {
                let d = gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                out.push((*x, self.like(*x, d)));
            }
            Op::Softmax { x, cols } => {
                let mut d = Vec::with_capacity(gd.len());
                for (gr, yr) in gd.chunks(*cols).zip(y.chunks(*cols)) {
                    let s: f64 = gr.iter().zip(yr).map(|(g, y)| *g as f64 * *y as f64).sum();
                    d.extend(gr.iter().zip(yr).map(|(g, y)| ((*g as f64 - s) * *y as f64) as f32));
                }
                out.push((*x, self.like(*x, d)));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                rstd,
            } => {
                let cols = *cols;
                let gam = self.data(*gamma);
                if self.wants(*x) {
                    let mut d = Vec::with_capacity(gd.len());
                    for ((gr, xr), &r) in gd.chunks(cols).zip(xhat.chunks(cols)).zip(rstd) {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..cols {
                            let gx = gr[j] as f64 * gam[j] as f64;
                            m1 += gx;
                            m2 += gx * xr[j] as f64;
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for j in 0..cols {
                            let gx = gr[j] as f64 * gam[j] as f64;
                            d.push((r as f64 * (gx - m1 - xr[j] as f64 * m2)) as f32);
                        }
                    }
                    out.push((*x, self.like(*x, d)));
                }
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![0.0f64; cols];
                    let mut gb = vec![0.0f64; cols];
                    for (gr, xr) in gd.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += gr[j] as f64 * xr[j] as f64;
                            gb[j] += gr[j] as f64;
                        }
                    }
                    if self.wants(*gamma) {
                        out.push((*gamma, self.like(*gamma, gg.into_iter().map(|v| v as f32).collect())));
                    }
                    if self.wants(*beta) {
                        out.push((*beta, self.like(*beta, gb.into_iter().map(|v| v as f32).collect())));
                    }
                }
            }
            Op::StatPool { x, channels, mean, std } => {
                let n = self.value(*x).len() / channels;
                let mut d = Vec::with_capacity(n * channels);
                for (c, plane) in self.data(*x).chunks(n).enumerate() {
                    let gm = gd[c] as f64 / n as f64;
                    let gs = gd[channels + c] as f64 / (n as f64 * std[c]);
                    d.extend(plane.iter().map(|&v| (gm + gs * (v as f64 - mean[c])) as f32));
                }
                out.push((*x, self.like(*x, d)));
            }
            Op::ChannelScale { x, scale, channels } => {
                let n = self.value(*x).len() / channels;
                let s = self.data(*scale);
                if self.wants(*x) {
                    let d = gd
                        .chunks(n)
                        .zip(s)
                        .flat_map(|(gp, &sv)| gp.iter().map(move |g| g * sv))
                        .collect();
                    out.push((*x, self.like(*x, d)));
                }
                if self.wants(*scale) {
                    let d = gd
                        .chunks(n)
                        .zip(self.data(*x).chunks(n))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(g, v)| *g as f64 * *v as f64).sum::<f64>() as f32)
                        .collect();
                    out.push((*scale, self.like(*scale, d)));
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let mut d = vec![0.0f32; batch * m * k];
                    for i in 0..batch {
                        let gm = &gd[i * m * n..(i + 1) * m * n];
                        let bm = &bd[i * k * n..(i + 1) * k * n];
                        let dm = &mut d[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            kernels::mm_nn(gm, bm, dm, m, n, k);
                        } else {
                            let bt = kernels::transpose(bm, k, n);
                            kernels::mm_nn(gm, &bt, dm, m, n, k);
                        }
                    }
                    out.push((*a, self.like(*a, d)));
                }
                if self.wants(*b) {
                    let mut d = Vec::with_capacity(batch * k * n);
                    for i in 0..batch {
                        let gm = &gd[i * m * n..(i + 1) * m * n];
                        let am = &ad[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            d.extend(kernels::mm_tn(gm, am, n, m, k));
                        } else {
                            d.extend(kernels::mm_tn(am, gm, k, m, n));
                        }
                    }
                    out.push((*b, self.like(*b, d)));
                }
            }
            Op::SumSquaredError { x, target } => {
                let s = gd[0];
                let d = self
                    .data(*x)
                    .iter()
                    .zip(target.data())
                    .map(|(v, t)| 2.0 * (v - t) * s)
                    .collect();
                out.push((*x, self.like(*x, d)));
            }
            Op::Dot { x, weights } => {
                let s = gd[0];
                out.push((*x, self.like(*x, weights.data().iter().map(|w| w * s).collect())));
            }
            Op::Sum(x) => {
                out.push((*x, self.like(*x, vec![gd[0]; self.value(*x).len()])));
            }
            Op::CrossEntropy { logits, label, probs } => {
                let s = gd[0] as f64;
                let d = probs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| ((p - if i == *label { 1.0 } else { 0.0 }) * s) as f32)
                    .collect();
                out.push((*logits, self.like(*logits, d)));
            }
        }
        out.retain(|(i, _)| self.wants(*i));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, 2.0]));
        let w = g.param(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.param(t(&[2], &[3.0, 3.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 5.0]);
        let z = g.linear(x, w, None).unwrap();
        assert_eq!(g.value(z).data(), &[1.0, 2.0]);
        let bad = g.param(t(&[3, 2], &[0.0; 6]));
        assert!(g.linear(x, bad, None).is_err());
    }

    #[test]
    fn relu_sigmoid_softmax_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let sa = g.softmax(a).unwrap();
        assert_eq!(g.value(sa).data(), &[0.5, 0.5]);
        let big = g.constant(t(&[2], &[1000.0, 1000.0]));
        let sb = g.softmax(big).unwrap();
        assert_eq!(g.value(sb).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let one = g.constant(t(&[2], &[1.0, 1.0]));
        let zero = g.constant(t(&[2], &[0.0, 0.0]));
        let c = g.constant(t(&[2], &[4.0, 4.0]));
        let y = g.layer_norm(c, one, zero, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-6));
        let x = g.constant(t(&[2], &[1.0, -1.0]));
        let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
        let d = g.value(y).data();
        assert!(d[0] < 1.0 && 1.0 - d[0] < 1e-4);
        assert!(d[1] > -1.0 && d[1] + 1.0 < 1e-4);
    }

    #[test]
    fn stat_pool_examples() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 2], &[3.0, 3.0, 0.0, 2.0]));
        let p = g.stat_pool(x).unwrap();
        let d = g.value(p).data();
        assert_eq!(d[0], 3.0);
        assert_eq!(d[1], 1.0);
        assert!((d[2] - 1e-4).abs() < 1e-9);
        assert!((d[3] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn conv_identity_kernels() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..20).map(|i| i as f32).collect();
        let x = g.constant(t(&[1, 4, 5], &data));
        let one = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, one, None, Conv2dSpec::default()).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
        let mut delta = vec![0.0; 9];
        delta[4] = 1.0;
        let k = g.constant(t(&[1, 1, 3, 3], &delta));
        for dil in [(1, 1), (2, 1), (4, 3)] {
            let y = g.conv2d(x, k, None, Conv2dSpec::dilated(dil.0, dil.1)).unwrap();
            assert_eq!(g.value(y).data(), &data[..]);
        }
        let even = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(
            g.conv2d(x, even, None, Conv2dSpec::default()),
            Err(Error::InvalidArgument(_))
        ));
        let wrong = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(matches!(
            g.conv2d(x, wrong, None, Conv2dSpec::default()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn heads_round_trip() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..4 * 3 * 5).map(|i| i as f32).collect();
        let x = g.param(t(&[4, 3, 5], &data));
        for layout in [HeadLayout::Time, HeadLayout::Freq] {
            let h = g.split_heads(x, 2, layout).unwrap();
            let back = g.merge_heads(h, (4, 3, 5), layout).unwrap();
            assert_eq!(g.value(back).data(), &data[..]);
        }
        let h = g.split_heads(x, 2, HeadLayout::Time).unwrap();
        assert_eq!(g.shape(h), &[2, 3, 10]);
        // head 1, time 2, channel-in-head 1, freq 4 -> channel 3
        assert_eq!(g.value(h).data()[(3 + 2) * 10 + 5 + 4], data[(3 * 3 + 2) * 5 + 4]);
        assert!(g.split_heads(x, 3, HeadLayout::Time).is_err());
    }

    #[test]
    fn cross_entropy_value() {
        let mut g = Graph::new();
        let z = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let l = g.cross_entropy(z, 2).unwrap();
        let expect = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((g.scalar(l) - expect).abs() < 1e-12);
        let grads = g.backward(l);
        let s: f32 = grads.get(z).unwrap().data().iter().sum();
        assert!(s.abs() < 1e-6);
    }

    fn naive_conv(
        x: &[f32],
        k: &[f32],
        (cin, h, w): (usize, usize, usize),
        (cout, kh, kw): (usize, usize, usize),
        (dh, dw): (usize, usize),
    ) -> Vec<f32> {
        let (ph, pw) = ((dh * (kh - 1) / 2) as isize, (dw * (kw - 1) / 2) as isize);
        let mut out = vec![0.0f32; cout * h * w];
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0f64;
                    for c in 0..cin {
                        for a in 0..kh {
                            for b in 0..kw {
                                let yi = i as isize + (a * dh) as isize - ph;
                                let xj = j as isize + (b * dw) as isize - pw;
                                if yi >= 0 && yi < h as isize && xj >= 0 && xj < w as isize {
                                    acc += x[(c * h + yi as usize) * w + xj as usize] as f64
                                        * k[((o * cin + c) * kh + a) * kw + b] as f64;
                                }
                            }
                        }
                    }
                    out[(o * h + i) * w + j] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f32> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let xn = g.constant(t(&[1, 8, 8], &x));
        let kn = g.constant(t(&[2, 1, 5, 5], &k));
        let y = g.conv2d(xn, kn, None, Conv2dSpec::dilated(4, 1)).unwrap();
        let want = naive_conv(&x, &k, (1, 8, 8), (2, 5, 5), (4, 1));
        for (a, b) in g.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn conv_oracle_property(
            seed in proptest::prelude::any::<u64>(),
            cin in 1usize..5, cout in 1usize..4,
            h in 1usize..17, w in 1usize..17,
            kh in proptest::sample::select(vec![1usize, 3, 5]),
            kw in proptest::sample::select(vec![1usize, 3, 5]),
            dh in 1usize..5, dw in 1usize..3,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f32> = (0..cin * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let k: Vec<f32> = (0..cout * cin * kh * kw).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut g = Graph::new();
            let xn = g.constant(t(&[cin, h, w], &x));
            let kn = g.constant(t(&[cout, cin, kh, kw], &k));
            let y = g.conv2d(xn, kn, None, Conv2dSpec::dilated(dh, dw)).unwrap();
            let want = naive_conv(&x, &k, (cin, h, w), (cout, kh, kw), (dh, dw));
            for (a, b) in g.value(y).data().iter().zip(&want) {
                proptest::prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in proptest::prelude::any::<u64>(), rows in 1usize..5, cols in 1usize..40, scale in 0.1f32..50.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_fn(&[rows, cols], |_| rng.random_range(-scale..scale)));
            let y = g.softmax(x).unwrap();
            for row in g.value(y).data().chunks(cols) {
                proptest::prop_assert!(row.iter().all(|v| *v >= 0.0));
                let s: f64 = row.iter().map(|v| *v as f64).sum();
                proptest::prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn layer_norm_standardizes(seed in proptest::prelude::any::<u64>(), cols in 8usize..64, spread in 0.5f32..20.0, offset in -10.0f32..10.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_fn(&[3, cols], |_| offset + rng.random_range(-spread..spread)));
            let one = g.constant(Tensor::full(&[cols], 1.0));
            let zero = g.constant(Tensor::zeros(&[cols]));
            let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
            for row in g.value(y).data().chunks(cols) {
                let m = row.iter().map(|v| *v as f64).sum::<f64>() / cols as f64;
                let v = row.iter().map(|v| (*v as f64 - m).powi(2)).sum::<f64>() / cols as f64;
                proptest::prop_assert!(m.abs() < 1e-6);
                proptest::prop_assert!((v - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn non_finite_is_tracked() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[f32::MAX]));
        let y = g.scale(x, 10.0);
        let _ = g.relu(y);
        if cfg!(debug_assertions) {
            assert_eq!(g.first_non_finite(), Some("scale"));
        }
    }
}
