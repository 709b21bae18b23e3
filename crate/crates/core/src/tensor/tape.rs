use crate::error::{Axis, Error, Result, ShapeError};

use super::kernels::{self, BnStats, ConvAlgo, ConvGeom, DepthwiseGeom};
use super::{dims4, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        x: Var,
        w: Var,
        map: Vec<usize>,
        geom: DepthwiseGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        invstd: Vec<T>,
        batch_stats: bool,
    },
    Silu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<(Var, usize)>),
    Slice {
        x: Var,
        start: usize,
    },
    MaxPool {
        x: Var,
        arg: Vec<u32>,
        window: [usize; 3],
    },
    Upsample(Var),
    Focus(Var),
    Sum(Var),
    Dot(Var, Vec<T>),
    /// Scalar whose local gradients w.r.t. its inputs were computed in forward.
    Term(Vec<(Var, Vec<T>)>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Depthwise { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Silu(x)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::Upsample(x)
            | Op::Focus(x)
            | Op::Sum(x)
            | Op::Dot(x, _) => vec![*x],
            Op::Slice { x, .. } | Op::MaxPool { x, .. } => vec![*x],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.iter().map(|p| p.0).collect(),
            Op::Term(parts) => parts.iter().map(|p| p.0).collect(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    tracked: bool,
    op: Op<T>,
}

/// Ordered record of executed operations. Nodes are appended in execution
/// order, so index order is a topological order of the graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    algo: ConvAlgo,
    check_finite: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            algo: ConvAlgo::default(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_algo(mut self, algo: ConvAlgo) -> Self {
        self.algo = algo;
        self
    }

    /// Enable or disable the per-op finiteness check (on by default in debug builds).
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node and its intermediates.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.nodes.shrink_to_fit();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            tracked: requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::Contract(format!(
                "{op_name} produced non-finite values"
            )));
        }
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, tracked, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<[usize; 4], ShapeError> {
        dims4(self.shape(v), op)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new("conv2d", self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [geom.cout] {
                return Err(ShapeError::Mismatch {
                    op: "conv2d",
                    axis: Axis::Channel,
                    expected: geom.cout,
                    found: bs.iter().product(),
                }
                .into());
            }
        }
        let out = kernels::conv2d_forward(
            self.algo,
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(&geom.out_shape(), out)?;
        self.push("conv2d", value, Op::Conv { x, w, b, geom })
    }

    /// One `[1, d, d]` filter per input channel.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let c = self.dims(x, "depthwise_conv2d")?[1];
        let map: Vec<usize> = (0..c).collect();
        self.depthwise_mapped(x, w, map, stride, pad)
    }

    /// Depthwise convolution where output channel `q` filters input channel `map[q]`.
    pub fn depthwise_mapped(
        &mut self,
        x: Var,
        w: Var,
        map: Vec<usize>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = DepthwiseGeom::new(
            "depthwise_conv2d",
            self.shape(x),
            self.shape(w),
            &map,
            stride,
            pad,
        )?;
        let out = kernels::depthwise_forward(&geom, self.value(x).data(), self.value(w).data(), &map);
        let value = Tensor::new(&geom.out_shape(), out)?;
        self.push("depthwise_conv2d", value, Op::Depthwise { x, w, map, geom })
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
        let dims = self.dims(x, "batch_norm")?;
        for p in [gamma, beta] {
            let n = self.value(p).numel();
            if n != dims[1] {
                return Err(ShapeError::Mismatch {
                    op: "batch_norm",
                    axis: Axis::Channel,
                    expected: dims[1],
                    found: n,
                }
                .into());
            }
        }
        Ok(dims)
    }

    /// Training-mode batch norm: normalizes with batch statistics and returns them.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BnStats<T>)> {
        let dims = self.check_bn(x, gamma, beta)?;
        let (y, stats) = kernels::batch_norm_train(
            dims,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = Tensor::new(&dims, y)?;
        let v = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: stats.mean.clone(),
                invstd: stats.invstd.clone(),
                batch_stats: true,
            },
        )?;
        Ok((v, stats))
    }

    /// Inference-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let dims = self.check_bn(x, gamma, beta)?;
        if mean.len() != dims[1] || var.len() != dims[1] {
            return Err(ShapeError::Mismatch {
                op: "batch_norm",
                axis: Axis::Channel,
                expected: dims[1],
                found: mean.len().min(var.len()),
            }
            .into());
        }
        let (y, invstd) = kernels::batch_norm_eval(
            dims,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            mean,
            var,
            eps,
        );
        let value = Tensor::new(&dims, y)?;
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                invstd,
                batch_stats: false,
            },
        )
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let t = self.value(x);
        Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, |v| v * kernels::sigmoid(v));
        self.push("silu", v, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.map(x, kernels::sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.map(x, |v| v * s);
        self.push("scale", v, Op::Scale(x, s))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), ShapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(ShapeError::Mismatch {
                op,
                axis: Axis::Rank,
                expected: sa.len(),
                found: sb.len(),
            });
        }
        for (i, (&x, &y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                let axis = if sa.len() == 4 {
                    [Axis::Batch, Axis::Channel, Axis::Height, Axis::Width][i]
                } else {
                    Axis::Dim(i)
                };
                return Err(ShapeError::Mismatch {
                    op,
                    axis,
                    expected: x,
                    found: y,
                });
            }
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let v = Tensor::new(ta.shape(), data)?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::new(ta.shape(), data)?;
        self.push("mul", v, Op::Mul(a, b))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| ShapeError::Argument {
            op: "concat_channels",
            msg: "no inputs".into(),
        })?;
        let [b, _, h, w] = self.dims(first, "concat_channels")?;
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pb, pc, ph, pw] = self.dims(p, "concat_channels")?;
            for (axis, e, f) in [(Axis::Batch, b, pb), (Axis::Height, h, ph), (Axis::Width, w, pw)] {
                if e != f {
                    return Err(ShapeError::Mismatch {
                        op: "concat_channels",
                        axis,
                        expected: e,
                        found: f,
                    }
                    .into());
                }
            }
            meta.push((p, pc));
        }
        let total: usize = meta.iter().map(|m| m.1).sum();
        let views: Vec<(&[T], usize)> = meta
            .iter()
            .map(|&(p, c)| (self.value(p).data(), c))
            .collect();
        let data = kernels::concat_channels(b, h * w, &views);
        let v = Tensor::new(&[b, total, h, w], data)?;
        self.push("concat_channels", v, Op::Concat(meta))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [b, c, h, w] = self.dims(x, "slice_channels")?;
        if start + len > c || len == 0 {
            return Err(ShapeError::Mismatch {
                op: "slice_channels",
                axis: Axis::Channel,
                expected: c,
                found: start + len,
            }
            .into());
        }
        let data = kernels::slice_channels([b, c, h, w], self.value(x).data(), start, len);
        let v = Tensor::new(&[b, len, h, w], data)?;
        self.push("slice_channels", v, Op::Slice { x, start })
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let dims = self.dims(x, "maxpool2d")?;
        if stride == 0 || 2 * pad > k {
            return Err(ShapeError::Argument {
                op: "maxpool2d",
                msg: format!("invalid window k={k} stride={stride} pad={pad}"),
            }
            .into());
        }
        kernels::check_window("maxpool2d", dims[2], dims[3], k, pad)?;
        let (y, arg, ho, wo) = kernels::maxpool_forward(dims, self.value(x).data(), k, stride, pad);
        let v = Tensor::new(&[dims[0], dims[1], ho, wo], y)?;
        self.push(
            "maxpool2d",
            v,
            Op::MaxPool {
                x,
                arg,
                window: [k, stride, pad],
            },
        )
    }

    /// Smallest gap between the largest and second-largest entry of any
    /// recorded max-pool window (`inf` without pools). Max pooling is only
    /// differentiable where this is positive; finite-difference checks need
    /// it to exceed their step size.
    pub fn pool_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::MaxPool { x, window, .. } = &node.op {
                let dims = dims4(self.shape(*x), "maxpool").expect("rank 4");
                let [k, s, p] = *window;
                margin = margin.min(kernels::maxpool_margin(dims, self.value(*x).data(), k, s, p));
            }
        }
        margin
    }

    /// Fingerprint of every max-pool argmax on the tape. Two evaluations with
    /// the same fingerprint lie in the same smooth piece of the function.
    pub fn pool_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            if let Op::MaxPool { arg, .. } = &node.op {
                arg.hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x, "upsample_nearest2x")?;
        let y = kernels::upsample2x_forward(dims, self.value(x).data());
        let v = Tensor::new(&[dims[0], dims[1], 2 * dims[2], 2 * dims[3]], y)?;
        self.push("upsample_nearest2x", v, Op::Upsample(x))
    }

    /// Pixel-parity slicing `[B, C, H, W] -> [B, 4C, H/2, W/2]`.
    pub fn focus_slice(&mut self, x: Var) -> Result<Var> {
        let dims = self.dims(x, "focus_slice")?;
        for (axis, e) in [(Axis::Height, dims[2]), (Axis::Width, dims[3])] {
            if e % 2 != 0 {
                return Err(ShapeError::Odd {
                    op: "focus_slice",
                    axis,
                    extent: e,
                }
                .into());
            }
        }
        let y = kernels::focus_forward(dims, self.value(x).data());
        let v = Tensor::new(&[dims[0], 4 * dims[1], dims[2] / 2, dims[3] / 2], y)?;
        self.push("focus_slice", v, Op::Focus(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    /// `sum(x * weights)` with constant weights.
    pub fn dot(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.numel() {
            return Err(ShapeError::Mismatch {
                op: "dot",
                axis: Axis::Dim(0),
                expected: t.numel(),
                found: weights.len(),
            }
            .into());
        }
        let s = t.data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        self.push("dot", Tensor::scalar(s), Op::Dot(x, weights))
    }

    /// Record a scalar computed outside the tape together with its gradient
    /// w.r.t. each input.
    pub fn term(&mut self, value: T, local_grads: Vec<(Var, Vec<T>)>) -> Result<Var> {
        for (v, g) in &local_grads {
            if g.len() != self.value(*v).numel() {
                return Err(ShapeError::Mismatch {
                    op: "term",
                    axis: Axis::Dim(0),
                    expected: self.value(*v).numel(),
                    found: g.len(),
                }
                .into());
            }
        }
        self.push("term", Tensor::scalar(value), Op::Term(local_grads))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        if !self.nodes[loss.0].tracked {
            return Ok(Grads { grads, visited });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(Var(i));
            self.backprop(node, &g, &mut grads);
        }
        // Keep leaf gradients only.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.tracked {
                grads[i] = None;
            }
        }
        Ok(Grads { grads, visited })
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let need_dx = self.tracked(*x);
                let need_dw = self.tracked(*w);
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    need_dx,
                    need_dw,
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if need_dw {
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| self.tracked(*b)) {
                    accumulate(grads, b, db);
                }
            }
            Op::Depthwise { x, w, map, geom } => {
                let (dx, dw) = kernels::depthwise_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    map,
                    g,
                    self.tracked(*x),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.tracked(*w) {
                    accumulate(grads, *w, dw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            } => {
                let dims = dims4(self.shape(*x), "batch_norm").expect("checked in forward");
                let (dx, dgamma, dbeta) = kernels::batch_norm_backward(
                    dims,
                    self.value(*x).data(),
                    self.value(*gamma).data(),
                    mean,
                    invstd,
                    g,
                    *batch_stats,
                    self.tracked(*x),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.tracked(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.tracked(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::Silu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gy)| {
                        let s = kernels::sigmoid(v);
                        gy * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&s, &gy)| gy * s * (T::one() - s))
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.tracked(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.tracked(*a) {
                    accumulate(grads, *a, g.iter().zip(vb).map(|(&gy, &y)| gy * y).collect());
                }
                if self.tracked(*b) {
                    accumulate(grads, *b, g.iter().zip(va).map(|(&gy, &x)| gy * x).collect());
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.iter().map(|&gy| gy * *s).collect()),
            Op::Concat(parts) => {
                let [b, total, h, w] = dims4(node.value.shape(), "concat").expect("rank 4");
                let mut start = 0;
                for &(p, c) in parts {
                    if self.tracked(p) {
                        accumulate(grads, p, kernels::slice_channels([b, total, h, w], g, start, c));
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                let [b, c, h, w] = dims4(self.shape(*x), "slice").expect("rank 4");
                let len = node.value.shape()[1];
                let hw = h * w;
                let mut d = vec![T::zero(); b * c * hw];
                for bi in 0..b {
                    d[(bi * c + start) * hw..][..len * hw].copy_from_slice(&g[bi * len * hw..][..len * hw]);
                }
                accumulate(grads, *x, d);
            }
            Op::MaxPool { x, arg, .. } => {
                let dims = dims4(self.shape(*x), "maxpool").expect("rank 4");
                let s = node.value.shape();
                accumulate(grads, *x, kernels::maxpool_backward(dims, arg, g, s[2], s[3]));
            }
            Op::Upsample(x) => {
                let dims = dims4(self.shape(*x), "upsample").expect("rank 4");
                accumulate(grads, *x, kernels::upsample2x_backward(dims, g));
            }
            Op::Focus(x) => {
                let dims = dims4(node.value.shape(), "focus").expect("rank 4");
                accumulate(grads, *x, kernels::focus_inverse(dims, g));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Dot(x, w) => accumulate(grads, *x, w.iter().map(|&wv| wv * g[0]).collect()),
            Op::Term(parts) => {
                for (v, local) in parts {
                    if self.tracked(*v) {
                        accumulate(grads, *v, local.iter().map(|&l| l * g[0]).collect());
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(d) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    visited: Vec<Var>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0)?.take()
    }

    /// Nodes whose backward rule ran, in the order they ran.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_grad_is_2x() {
        let mut tape = Tape::new();
        let data = [0.5, -1.5, 2.0, 3.25];
        let x = tape.leaf(t(&[4], &data), true);
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let g = tape.backward(l).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.get(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]), true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = sigmoid(x) + x*x  ->  dy/dx = s(1-s) + 2x
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.3, -0.7, 1.1]), true);
        let s = tape.sigmoid(x).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(s, sq).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        for (i, &v) in [0.3f64, -0.7, 1.1].iter().enumerate() {
            let s = 1.0 / (1.0 + (-v).exp());
            assert!((g.get(x).unwrap()[i] - (s * (1.0 - s) + 2.0 * v)).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_pass_runs_in_reverse_tape_order() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]), true);
        let a = tape.silu(x).unwrap();
        let b = tape.sigmoid(x).unwrap();
        let c = tape.add(a, b).unwrap();
        let l = tape.sum(c).unwrap();
        let g = tape.backward(l).unwrap();
        let order: Vec<usize> = g.visit_order().iter().map(|v| v.index()).collect();
        assert_eq!(order, vec![l.index(), c.index(), b.index(), a.index()]);
        assert!(order.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn clear_releases_nodes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[8]), true);
        tape.sum(x).unwrap();
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn nan_is_reported_when_checked() {
        let mut tape = Tape::<f64>::new().with_finite_check(true);
        let x = tape.leaf(t(&[1], &[f64::MAX]), false);
        assert!(tape.scale(x, 10.0).is_err());
    }

    #[test]
    fn concat_shape_mismatch_names_axis() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[1, 2, 2, 2]), false);
        let b = tape.leaf(Tensor::zeros(&[1, 2, 3, 2]), false);
        match tape.concat_channels(&[a, b]) {
            Err(Error::Shape(ShapeError::Mismatch { axis, .. })) => assert_eq!(axis, Axis::Height),
            other => panic!("unexpected {other:?}", other = other.map(|v| v.index())),
        }
    }
}
