//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] owns every tensor produced during a forward pass. Builder
//! methods validate shapes eagerly, run the forward kernel immediately and
//! append one node per op, so the tape is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep. Gradients accumulate into
//! the nodes until [`Graph::zero_grads`]; running backward twice doubles
//! them, which the finite-difference harness relies on to detect stale
//! state.

pub mod kernels;

use crate::dtype::{real, Real};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kernels::PoolKind;

/// Handle into a [`Graph`]; only valid for the graph that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How [`Graph::conv2d`] computes its forward pass. Both strategies share
/// one backward kernel and must agree to float precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvStrategy {
    Direct,
    #[default]
    Im2col,
}

/// Stabilizer used for row normalization and row norms.
pub const NORM_EPS: f64 = 1e-12;

enum OpKind {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    Pool2d {
        x: Var,
        kind: PoolKind,
        k: usize,
        stride: usize,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceRow {
        x: Var,
        row: usize,
    },
    Pick {
        x: Var,
        index: usize,
    },
    AttentionMap(Var),
    ResizeBilinear(Var),
    RowNormalize(Var),
    RowNorm(Var),
    ChannelScale {
        x: Var,
        scale: Var,
    },
}

struct Node<E: Real> {
    op: OpKind,
    value: Tensor<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

pub struct Graph<E: Real> {
    nodes: Vec<Node<E>>,
    conv_strategy: ConvStrategy,
}

impl<E: Real> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Real> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            conv_strategy: ConvStrategy::default(),
        }
    }

    pub fn with_conv_strategy(strategy: ConvStrategy) -> Self {
        Graph {
            nodes: Vec::new(),
            conv_strategy: strategy,
        }
    }

    pub fn conv_strategy(&self) -> ConvStrategy {
        self.conv_strategy
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: OpKind, value: Tensor<E>, requires_grad: bool) -> Var {
        debug_assert!(
            value.data().iter().all(|v| v.is_finite()),
            "non-finite value produced at node {}",
            self.nodes.len()
        );
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Tensor-valued leaf. `requires_grad` marks it as a gradient sink;
    /// frozen parameters and inputs that never need gradients should pass
    /// false so backward skips entire subgraphs.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(OpKind::Leaf, value, requires_grad)
    }

    /// Scalar constant leaf without gradient.
    pub fn constant(&mut self, value: E) -> Var {
        self.push(OpKind::Leaf, Tensor::scalar(value), false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise binary op over equal shapes, or tensor-with-scalar.
    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E,
        make: impl Fn(Var, Var) -> OpKind,
    ) -> Result<Var> {
        let scalar_a = self.value(a).is_scalar();
        let scalar_b = self.value(b).is_scalar();
        if !(scalar_a || scalar_b) {
            self.check_same_shape(op_name, a, b)?;
        }
        let (va, vb) = (self.value(a), self.value(b));
        let value = if scalar_a && !scalar_b {
            let s = va.item();
            Tensor::new(
                vb.shape().to_vec(),
                vb.data().iter().map(|&y| f(s, y)).collect(),
            )?
        } else if scalar_b && !scalar_a {
            let s = vb.item();
            Tensor::new(
                va.shape().to_vec(),
                va.data().iter().map(|&x| f(x, s)).collect(),
            )?
        } else {
            Tensor::new(
                va.shape().to_vec(),
                va.data()
                    .iter()
                    .zip(vb.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            )?
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(make(a, b), value, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, OpKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, OpKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, OpKind::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(E) -> E, make: impl Fn(Var) -> OpKind) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
            .expect("unary preserves shape");
        let rg = self.needs(x);
        self.push(make(x), value, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, OpKind::Square)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| if v > E::zero() { v } else { E::zero() },
            OpKind::Relu,
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), OpKind::Exp)
    }

    /// Natural log; rejects non-positive inputs rather than producing NaN.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= E::zero()) {
            return Err(Error::NonPositiveLog);
        }
        Ok(self.unary(x, |v| v.ln(), OpKind::Log))
    }

    /// 2-d convolution of x (n, ci, h, w) with w (co, ci, k, k), no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: xs,
                reason: "input must be (n, c, h, w)".into(),
            });
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: ws,
                reason: "weights must be (co, ci, k, k) with square kernel".into(),
            });
        }
        if ws[1] != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, ci, h, w_ext) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        if stride == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: xs,
                reason: "stride must be positive".into(),
            });
        }
        if h + 2 * padding < k || w_ext + 2 * padding < k {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: xs,
                reason: format!("kernel {k} exceeds padded input"),
            });
        }
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let out = match self.conv_strategy {
            ConvStrategy::Direct => {
                kernels::conv2d_forward_direct(xd, n, ci, h, w_ext, wd, co, k, stride, padding)
            }
            ConvStrategy::Im2col => {
                kernels::conv2d_forward_im2col(xd, n, ci, h, w_ext, wd, co, k, stride, padding)
            }
        };
        let oh = kernels::conv2d_out_dim(h, k, stride, padding);
        let ow = kernels::conv2d_out_dim(w_ext, k, stride, padding);
        let value = Tensor::new(vec![n, co, oh, ow], out)?;
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(
            OpKind::Conv2d {
                x,
                w,
                stride,
                padding,
            },
            value,
            rg,
        ))
    }

    pub fn pool2d(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::InvalidShape {
                op: "pool2d",
                shape: xs,
                reason: "input must be (n, c, h, w)".into(),
            });
        }
        if k == 0 || stride == 0 || xs[2] < k || xs[3] < k {
            return Err(Error::InvalidShape {
                op: "pool2d",
                shape: xs,
                reason: format!("window {k} stride {stride} does not fit"),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (out, argmax) =
            kernels::pool2d_forward(self.value(x).data(), n, c, h, w, kind, k, stride);
        let oh = kernels::pool2d_out_dim(h, k, stride);
        let ow = kernels::pool2d_out_dim(w, k, stride);
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.needs(x);
        Ok(self.push(
            OpKind::Pool2d {
                x,
                kind,
                k,
                stride,
                argmax,
            },
            value,
            rg,
        ))
    }

    /// Spatial mean per channel: (n, c, h, w) -> (n, c).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                shape: xs,
                reason: "input must be (n, c, h, w)".into(),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = real::<E>((h * w) as f64);
        let xd = self.value(x).data();
        let mut out = vec![E::zero(); n * c];
        for (plane_idx, o) in out.iter_mut().enumerate() {
            let plane = &xd[plane_idx * h * w..][..h * w];
            let mut acc = E::zero();
            for &v in plane {
                acc += v;
            }
            *o = acc / hw;
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.needs(x);
        Ok(self.push(OpKind::GlobalAvgPool(x), value, rg))
    }

    /// Affine map: x (n, d) * w (d, m) + b (m,).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let out = kernels::linear_forward(
            self.value(x).data(),
            n,
            d,
            self.value(w).data(),
            m,
            self.value(b).data(),
        );
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(OpKind::Linear { x, w, b }, value, rg))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let rank = self.value(x).rank();
        if axis >= rank {
            return Err(Error::AxisOutOfRange { axis, rank });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let v = self.value(x);
        let out = kernels::softmax(v.data(), v.shape(), axis);
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.needs(x);
        Ok(self.push(OpKind::Softmax { x, axis }, value, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let v = self.value(x);
        let out = kernels::log_softmax(v.data(), v.shape(), axis);
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.needs(x);
        Ok(self.push(OpKind::LogSoftmax { x, axis }, value, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = E::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.needs(x);
        self.push(OpKind::Sum(x), Tensor::scalar(acc), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = real::<E>(self.value(x).numel() as f64);
        let mut acc = E::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.needs(x);
        self.push(OpKind::Mean(x), Tensor::scalar(acc / n), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != v.numel() || shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("element count must stay {}", v.numel()),
            });
        }
        let value = Tensor::new(shape, v.data().to_vec())?;
        let rg = self.needs(x);
        Ok(self.push(OpKind::Reshape(x), value, rg))
    }

    /// Row `row` of a rank-2 tensor, as a rank-1 tensor.
    pub fn slice_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "slice_row",
                shape: v.shape().to_vec(),
                reason: "input must be rank 2".into(),
            });
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        if row >= rows {
            return Err(Error::AxisOutOfRange {
                axis: row,
                rank: rows,
            });
        }
        let value = Tensor::new(vec![cols], v.data()[row * cols..][..cols].to_vec())?;
        let rg = self.needs(x);
        Ok(self.push(OpKind::SliceRow { x, row }, value, rg))
    }

    /// Scalar element at flat `index`.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        if index >= v.numel() {
            return Err(Error::AxisOutOfRange {
                axis: index,
                rank: v.numel(),
            });
        }
        let value = Tensor::scalar(v.data()[index]);
        let rg = self.needs(x);
        Ok(self.push(OpKind::Pick { x, index }, value, rg))
    }

    /// Channel-wise square sum of a single activation: (c, h, w) -> (h, w).
    pub fn attention_map(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 3 {
            return Err(Error::InvalidShape {
                op: "attention_map",
                shape: v.shape().to_vec(),
                reason: "input must be (c, h, w)".into(),
            });
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let out = kernels::attention_map_forward(v.data(), 1, c, h, w);
        let value = Tensor::new(vec![h, w], out)?;
        let rg = self.needs(x);
        Ok(self.push(OpKind::AttentionMap(x), value, rg))
    }

    /// Batched attention maps: (n, c, h, w) -> (n, h, w).
    pub fn attention_map_batched(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 4 {
            return Err(Error::InvalidShape {
                op: "attention_map",
                shape: v.shape().to_vec(),
                reason: "input must be (n, c, h, w)".into(),
            });
        }
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let out = kernels::attention_map_forward(v.data(), n, c, h, w);
        let value = Tensor::new(vec![n, h, w], out)?;
        let rg = self.needs(x);
        Ok(self.push(OpKind::AttentionMap(x), value, rg))
    }

    /// Corner-aligned bilinear resize of (h, w) or (n, h, w) maps.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let v = self.value(x);
        let (b, h, w, batched) = match v.shape() {
            [h, w] => (1, *h, *w, false),
            [b, h, w] => (*b, *h, *w, true),
            _ => {
                return Err(Error::InvalidShape {
                    op: "resize_bilinear",
                    shape: v.shape().to_vec(),
                    reason: "input must be (h, w) or (n, h, w)".into(),
                })
            }
        };
        if oh == 0 || ow == 0 {
            return Err(Error::InvalidShape {
                op: "resize_bilinear",
                shape: vec![oh, ow],
                reason: "target extents must be positive".into(),
            });
        }
        let out = kernels::resize_bilinear_forward(v.data(), b, h, w, oh, ow);
        let shape = if batched {
            vec![b, oh, ow]
        } else {
            vec![oh, ow]
        };
        let value = Tensor::new(shape, out)?;
        let rg = self.needs(x);
        Ok(self.push(OpKind::ResizeBilinear(x), value, rg))
    }

    /// Rows scaled to unit length: x_r / sqrt(sum(x_r^2) + 1e-12).
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "row_normalize",
                shape: v.shape().to_vec(),
                reason: "input must be rank 2".into(),
            });
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        let eps = real::<E>(NORM_EPS);
        let mut out = vec![E::zero(); rows * cols];
        for r in 0..rows {
            let src = &v.data()[r * cols..][..cols];
            let mut sq = E::zero();
            for &e in src {
                sq += e * e;
            }
            let norm = (sq + eps).sqrt();
            for (o, &e) in out[r * cols..][..cols].iter_mut().zip(src) {
                *o = e / norm;
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.needs(x);
        Ok(self.push(OpKind::RowNormalize(x), value, rg))
    }

    /// Stabilized Euclidean norm per row: (n, d) -> (n,).
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "row_norm",
                shape: v.shape().to_vec(),
                reason: "input must be rank 2".into(),
            });
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        let eps = real::<E>(NORM_EPS);
        let mut out = vec![E::zero(); rows];
        for (r, o) in out.iter_mut().enumerate() {
            let src = &v.data()[r * cols..][..cols];
            let mut sq = E::zero();
            for &e in src {
                sq += e * e;
            }
            *o = (sq + eps).sqrt();
        }
        let value = Tensor::new(vec![rows], out)?;
        let rg = self.needs(x);
        Ok(self.push(OpKind::RowNorm(x), value, rg))
    }

    /// Multiply each channel plane of x (n, c, h, w) by scale (c,).
    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ss = self.value(scale).shape().to_vec();
        if xs.len() != 4 || ss.len() != 1 || ss[0] != xs[1] {
            return Err(Error::ShapeMismatch {
                op: "channel_scale",
                lhs: xs,
                rhs: ss,
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let hw = h * w;
        let sd = self.value(scale).data().to_vec();
        let xd = self.value(x).data();
        let mut out = vec![E::zero(); xd.len()];
        for ni in 0..n {
            for (ci, &s) in sd.iter().enumerate() {
                let off = (ni * c + ci) * hw;
                for p in 0..hw {
                    out[off + p] = xd[off + p] * s;
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.needs(x) || self.needs(scale);
        Ok(self.push(OpKind::ChannelScale { x, scale }, value, rg))
    }

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across
    /// calls; interior gradients do too, so call [`Graph::zero_grads`]
    /// between unrelated passes on a reused graph.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        let mut scratch: Vec<Option<Vec<E>>> = Vec::new();
        scratch.resize_with(root.0 + 1, || None);
        scratch[root.0] = Some(vec![E::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut scratch);
            match self.nodes[i].grad {
                Some(ref mut acc) => {
                    for (a, &b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => self.nodes[i].grad = Some(g),
            }
        }
        Ok(())
    }

    fn send(&self, scratch: &mut [Option<Vec<E>>], to: Var, contrib: Vec<E>) {
        if !self.needs(to) {
            return;
        }
        match scratch[to.0] {
            Some(ref mut acc) => {
                for (a, b) in acc.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => scratch[to.0] = Some(contrib),
        }
    }

    /// Sum `g` into a scalar contribution when the input of a broadcasting
    /// binary op was a scalar; pass `g` through otherwise.
    fn reduce_for(&self, to: Var, g: &[E], negate: bool) -> Vec<E> {
        let flip = |v: E| if negate { -v } else { v };
        if self.value(to).is_scalar() && g.len() > 1 {
            let mut acc = E::zero();
            for &v in g {
                acc += flip(v);
            }
            vec![acc]
        } else {
            g.iter().map(|&v| flip(v)).collect()
        }
    }

    fn propagate(&self, i: usize, g: &[E], scratch: &mut [Option<Vec<E>>]) {
        match &self.nodes[i].op {
            OpKind::Leaf => {}
            OpKind::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let ga = self.reduce_for(a, g, false);
                    self.send(scratch, a, ga);
                }
                if self.needs(b) {
                    let gb = self.reduce_for(b, g, false);
                    self.send(scratch, b, gb);
                }
            }
            OpKind::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let ga = self.reduce_for(a, g, false);
                    self.send(scratch, a, ga);
                }
                if self.needs(b) {
                    let gb = self.reduce_for(b, g, true);
                    self.send(scratch, b, gb);
                }
            }
            OpKind::Mul(a, b) => {
                let (a, b) = (*a, *b);
                for (dst, other) in [(a, b), (b, a)] {
                    if !self.needs(dst) {
                        continue;
                    }
                    let od = self.value(other).data();
                    let weighted: Vec<E> = if od.len() == 1 {
                        g.iter().map(|&v| v * od[0]).collect()
                    } else if self.value(dst).is_scalar() {
                        g.iter().zip(od).map(|(&v, &o)| v * o).collect()
                    } else {
                        g.iter().zip(od).map(|(&v, &o)| v * o).collect()
                    };
                    let contrib = self.reduce_for(dst, &weighted, false);
                    self.send(scratch, dst, contrib);
                }
            }
            OpKind::Square(x) => {
                let x = *x;
                let two = real::<E>(2.0);
                let xd = self.value(x).data();
                let contrib = g.iter().zip(xd).map(|(&gv, &xv)| two * xv * gv).collect();
                self.send(scratch, x, contrib);
            }
            OpKind::Relu(x) => {
                let x = *x;
                let xd = self.value(x).data();
                let contrib = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > E::zero() { gv } else { E::zero() })
                    .collect();
                self.send(scratch, x, contrib);
            }
            OpKind::Exp(x) => {
                let x = *x;
                let yd = self.nodes[i].value.data();
                let contrib = g.iter().zip(yd).map(|(&gv, &yv)| gv * yv).collect();
                self.send(scratch, x, contrib);
            }
            OpKind::Log(x) => {
                let x = *x;
                let xd = self.value(x).data();
                let contrib = g.iter().zip(xd).map(|(&gv, &xv)| gv / xv).collect();
                self.send(scratch, x, contrib);
            }
            OpKind::Conv2d {
                x,
                w,
                stride,
                padding,
            } => {
                let (x, w) = (*x, *w);
                let xs = self.value(x).shape();
                let ws = self.value(w).shape();
                let (need_gx, need_gw) = (self.needs(x), self.needs(w));
                let (gx, gw) = kernels::conv2d_backward(
                    self.value(x).data(),
                    xs[0],
                    xs[1],
                    xs[2],
                    xs[3],
                    self.value(w).data(),
                    ws[0],
                    ws[2],
                    *stride,
                    *padding,
                    g,
                    need_gx,
                    need_gw,
                );
                if need_gx {
                    self.send(scratch, x, gx);
                }
                if need_gw {
                    self.send(scratch, w, gw);
                }
            }
            OpKind::Pool2d {
                x,
                kind,
                k,
                stride,
                argmax,
            } => {
                let x = *x;
                let xs = self.value(x).shape();
                let gx = kernels::pool2d_backward(
                    g, xs[0], xs[1], xs[2], xs[3], *kind, *k, *stride, argmax,
                );
                self.send(scratch, x, gx);
            }
            OpKind::GlobalAvgPool(x) => {
                let x = *x;
                let xs = self.value(x).shape();
                let (h, w) = (xs[2], xs[3]);
                let hw = real::<E>((h * w) as f64);
                let mut gx = vec![E::zero(); self.value(x).numel()];
                for (plane_idx, &gv) in g.iter().enumerate() {
                    let share = gv / hw;
                    for p in 0..h * w {
                        gx[plane_idx * h * w + p] = share;
                    }
                }
                self.send(scratch, x, gx);
            }
            OpKind::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xs = self.value(x).shape();
                let ws = self.value(w).shape();
                let (n, d, m) = (xs[0], xs[1], ws[1]);
                let need_gx = self.needs(x);
                let need_gwb = self.needs(w) || self.needs(b);
                let (gx, gw, gb) = kernels::linear_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    n,
                    d,
                    m,
                    need_gx,
                    need_gwb,
                );
                if need_gx {
                    self.send(scratch, x, gx);
                }
                if need_gwb {
                    self.send(scratch, w, gw);
                    self.send(scratch, b, gb);
                }
            }
            OpKind::Softmax { x, axis } => {
                let x = *x;
                let y = self.nodes[i].value.data();
                let gx = kernels::softmax_backward(y, g, self.value(x).shape(), *axis);
                self.send(scratch, x, gx);
            }
            OpKind::LogSoftmax { x, axis } => {
                let x = *x;
                let y = self.nodes[i].value.data();
                let gx = kernels::log_softmax_backward(y, g, self.value(x).shape(), *axis);
                self.send(scratch, x, gx);
            }
            OpKind::Sum(x) => {
                let x = *x;
                let contrib = vec![g[0]; self.value(x).numel()];
                self.send(scratch, x, contrib);
            }
            OpKind::Mean(x) => {
                let x = *x;
                let n = real::<E>(self.value(x).numel() as f64);
                let contrib = vec![g[0] / n; self.value(x).numel()];
                self.send(scratch, x, contrib);
            }
            OpKind::Reshape(x) => {
                self.send(scratch, *x, g.to_vec());
            }
            OpKind::SliceRow { x, row } => {
                let x = *x;
                let cols = self.value(x).shape()[1];
                let mut gx = vec![E::zero(); self.value(x).numel()];
                gx[row * cols..][..cols].copy_from_slice(g);
                self.send(scratch, x, gx);
            }
            OpKind::Pick { x, index } => {
                let x = *x;
                let mut gx = vec![E::zero(); self.value(x).numel()];
                gx[*index] = g[0];
                self.send(scratch, x, gx);
            }
            OpKind::AttentionMap(x) => {
                let x = *x;
                let xs = self.value(x).shape();
                let (b, c, h, w) = if xs.len() == 3 {
                    (1, xs[0], xs[1], xs[2])
                } else {
                    (xs[0], xs[1], xs[2], xs[3])
                };
                let gx = kernels::attention_map_backward(self.value(x).data(), g, b, c, h, w);
                self.send(scratch, x, gx);
            }
            OpKind::ResizeBilinear(x) => {
                let x = *x;
                let xs = self.value(x).shape();
                let ys = self.nodes[i].value.shape();
                let (b, h, w, oh, ow) = if xs.len() == 3 {
                    (xs[0], xs[1], xs[2], ys[1], ys[2])
                } else {
                    (1, xs[0], xs[1], ys[0], ys[1])
                };
                let gx = kernels::resize_bilinear_backward(g, b, h, w, oh, ow);
                self.send(scratch, x, gx);
            }
            OpKind::RowNormalize(x) => {
                let x = *x;
                let xs = self.value(x).shape();
                let (rows, cols) = (xs[0], xs[1]);
                let eps = real::<E>(NORM_EPS);
                let xd = self.value(x).data();
                let mut gx = vec![E::zero(); xd.len()];
                for r in 0..rows {
                    let src = &xd[r * cols..][..cols];
                    let grow = &g[r * cols..][..cols];
                    let mut sq = E::zero();
                    let mut dot = E::zero();
                    for (&xv, &gv) in src.iter().zip(grow) {
                        sq += xv * xv;
                        dot += xv * gv;
                    }
                    let norm = (sq + eps).sqrt();
                    let cubed = norm * norm * norm;
                    for ((o, &xv), &gv) in gx[r * cols..][..cols].iter_mut().zip(src).zip(grow) {
                        *o = gv / norm - xv * dot / cubed;
                    }
                }
                self.send(scratch, x, gx);
            }
            OpKind::RowNorm(x) => {
                let x = *x;
                let xs = self.value(x).shape();
                let (rows, cols) = (xs[0], xs[1]);
                let yd = self.nodes[i].value.data();
                let xd = self.value(x).data();
                let mut gx = vec![E::zero(); xd.len()];
                for r in 0..rows {
                    let scale = g[r] / yd[r];
                    for (o, &xv) in gx[r * cols..][..cols]
                        .iter_mut()
                        .zip(&xd[r * cols..][..cols])
                    {
                        *o = xv * scale;
                    }
                }
                self.send(scratch, x, gx);
            }
            OpKind::ChannelScale { x, scale } => {
                let (x, scale) = (*x, *scale);
                let xs = self.value(x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = h * w;
                let sd = self.value(scale).data();
                let xd = self.value(x).data();
                if self.needs(x) {
                    let mut gx = vec![E::zero(); xd.len()];
                    for ni in 0..n {
                        for (ci, &s) in sd.iter().enumerate() {
                            let off = (ni * c + ci) * hw;
                            for p in 0..hw {
                                gx[off + p] = g[off + p] * s;
                            }
                        }
                    }
                    self.send(scratch, x, gx);
                }
                if self.needs(scale) {
                    let mut gs = vec![E::zero(); c];
                    for ni in 0..n {
                        for (ci, gsc) in gs.iter_mut().enumerate() {
                            let off = (ni * c + ci) * hw;
                            for p in 0..hw {
                                *gsc += g[off + p] * xd[off + p];
                            }
                        }
                    }
                    self.send(scratch, scale, gs);
                }
            }
        }
    }
}
