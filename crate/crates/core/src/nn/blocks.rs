//! Composite blocks: Focus, Conv-BN-SiLU, GhostConv, Bottleneck,
//! BottleneckCSP, C3 and SPP.
//!
//! Every block has `build` (registers parameters), `forward` (records onto a
//! [`Session`]), `modules` (leaf-layer count) and `trace` (output shape and
//! multiply-accumulate count for a given input shape).

use rand::Rng;

use super::params::{BatchNormIds, ParamBuilder, ParamId, Session};
use crate::error::{spec_err, Result};
use crate::tensor::{conv_out, kernels, Scalar, Tensor, Var};

/// Which convolution implementation a block uses for its stride-preserving layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvStyle {
    #[default]
    Standard,
    Ghost,
}

/// Ratio and cheap-kernel size used when a block swaps in ghost convolutions.
pub const GHOST_RATIO: usize = 2;
pub const GHOST_CHEAP_KERNEL: usize = 3;

/// Common interface of every composite block.
pub trait Block {
    fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var>;
    /// Leaf-layer count (conv, BN, activation, pool, upsample, concat).
    fn modules(&self) -> usize;
    /// Output shape for `shape`, adding multiply-accumulates to `cost`.
    fn trace(&self, shape: [usize; 4], cost: &mut Cost) -> [usize; 4];
}

macro_rules! impl_block {
    ($($t:ty),*) => {$(
        impl Block for $t {
            fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
                <$t>::forward(self, s, x)
            }
            fn modules(&self) -> usize {
                <$t>::modules(self)
            }
            fn trace(&self, shape: [usize; 4], cost: &mut Cost) -> [usize; 4] {
                <$t>::trace(self, shape, cost)
            }
        }
    )*};
}

impl_block!(GhostConv, ConvLayer, Focus, Bottleneck, BottleneckCsp, C3, Spp);

/// Shape and MAC bookkeeping shared by `trace` implementations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    pub macs: u64,
}

impl Cost {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    pub fn build<R: Rng>(
        pb: &mut ParamBuilder<R>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = pb.conv_weight("weight", [cout, cin, k, k]);
        let bias = bias.then(|| pb.bias("bias", cout, cin * k * k));
        Self {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
        }
    }

    pub fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.conv2d(x, w, b, self.stride, self.pad())
    }

    pub fn trace(&self, [b, _, h, w]: [usize; 4], cost: &mut Cost) -> [usize; 4] {
        let (ho, wo) = (
            conv_out(h, self.k, self.stride, self.pad()),
            conv_out(w, self.k, self.stride, self.pad()),
        );
        cost.macs += (b * self.cout * ho * wo * self.cin * self.k * self.k) as u64;
        [b, self.cout, ho, wo]
    }
}

/// Ghost convolution hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GhostConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Each intrinsic map yields `ratio` outputs (itself plus `ratio - 1` cheap maps).
    pub ratio: usize,
    pub primary_kernel: usize,
    pub cheap_kernel: usize,
    pub stride: usize,
}

impl GhostConvSpec {
    pub fn new(c: usize, n: usize, s: usize, k: usize, d: usize, stride: usize) -> Result<Self> {
        let spec = Self {
            in_channels: c,
            out_channels: n,
            ratio: s,
            primary_kernel: k,
            cheap_kernel: d,
            stride,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio < 2 {
            return Err(spec_err(format!(
                "ghost ratio must be at least 2, got {}",
                self.ratio
            )));
        }
        if self.out_channels < self.ratio {
            return Err(spec_err(format!(
                "ghost output channels {} smaller than ratio {}",
                self.out_channels, self.ratio
            )));
        }
        if self.in_channels == 0 || self.primary_kernel == 0 || self.cheap_kernel == 0 || self.stride == 0 {
            return Err(spec_err("ghost conv extents must be positive"));
        }
        if self.cheap_kernel % 2 == 0 {
            return Err(spec_err("ghost cheap kernel must be odd"));
        }
        Ok(())
    }

    /// Intrinsic map count `m = ceil(n / s)`.
    pub fn intrinsic(&self) -> usize {
        self.out_channels.div_ceil(self.ratio)
    }

    /// Cheap maps kept after truncation to `n` outputs.
    pub fn cheap(&self) -> usize {
        self.out_channels - self.intrinsic()
    }

    /// Input intrinsic channel feeding each kept cheap channel.
    pub fn cheap_map(&self) -> Vec<usize> {
        (0..self.cheap()).map(|q| q / (self.ratio - 1)).collect()
    }

    /// Weight count (no bias): primary `c*k*k*m` plus cheap `d*d` per kept map.
    pub fn param_count(&self) -> usize {
        let k2 = self.primary_kernel * self.primary_kernel;
        let d2 = self.cheap_kernel * self.cheap_kernel;
        self.in_channels * k2 * self.intrinsic() + d2 * self.cheap()
    }

    /// Weights of an ordinary convolution with the same `(c, n, k)`.
    pub fn plain_param_count(&self) -> usize {
        self.in_channels * self.out_channels * self.primary_kernel * self.primary_kernel
    }

    /// Multiply-accumulates for an `h' x w'` output.
    pub fn macs(&self, ho: usize, wo: usize) -> u64 {
        let k2 = self.primary_kernel * self.primary_kernel;
        let d2 = self.cheap_kernel * self.cheap_kernel;
        ((self.intrinsic() * self.in_channels * k2 + self.cheap() * d2) * ho * wo) as u64
    }

    /// Multiply-accumulates of the ordinary convolution it replaces:
    /// `h' * w' * c * n * k * k`.
    pub fn plain_macs(&self, ho: usize, wo: usize) -> u64 {
        (ho * wo * self.plain_param_count()) as u64
    }
}

/// `concat(Y', cheap(Y'))[..n]` with `Y' = X * f' (+ b)` and the cheap maps a
/// per-channel `d x d` convolution of their intrinsic map.
#[derive(Debug, Clone)]
pub struct GhostConv {
    pub spec: GhostConvSpec,
    pub primary: ParamId,
    pub cheap: ParamId,
    pub bias: Option<ParamId>,
}

impl GhostConv {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, spec: GhostConvSpec, bias: bool) -> Result<Self> {
        spec.validate()?;
        let (c, k, d, m) = (
            spec.in_channels,
            spec.primary_kernel,
            spec.cheap_kernel,
            spec.intrinsic(),
        );
        let primary = pb.conv_weight("primary.weight", [m, c, k, k]);
        let bias = bias.then(|| pb.bias("primary.bias", m, c * k * k));
        let cheap = pb.conv_weight("cheap.weight", [spec.cheap(), 1, d, d]);
        Ok(Self {
            spec,
            primary,
            cheap,
            bias,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.primary);
        let b = self.bias.map(|b| s.param(b));
        let cheap_w = s.param(self.cheap);
        ghost_conv(s, x, w, b, cheap_w, &self.spec)
    }

    /// A ghost convolution stands in for one convolution layer.
    pub fn modules(&self) -> usize {
        1
    }

    pub fn trace(&self, [b, _, h, w]: [usize; 4], cost: &mut Cost) -> [usize; 4] {
        let k = self.spec.primary_kernel;
        let ho = conv_out(h, k, self.spec.stride, k / 2);
        let wo = conv_out(w, k, self.spec.stride, k / 2);
        cost.macs += b as u64 * self.spec.macs(ho, wo);
        [b, self.spec.out_channels, ho, wo]
    }
}

/// Ghost convolution on explicit weight handles.
pub fn ghost_conv<T: Scalar>(
    s: &mut Session<T>,
    x: Var,
    primary: Var,
    bias: Option<Var>,
    cheap: Var,
    spec: &GhostConvSpec,
) -> Result<Var> {
    spec.validate()?;
    let k = spec.primary_kernel;
    let d = spec.cheap_kernel;
    let intrinsic = s.tape.conv2d(x, primary, bias, spec.stride, k / 2)?;
    let cheap_maps = s.tape.depthwise_mapped(intrinsic, cheap, spec.cheap_map(), 1, d / 2)?;
    s.tape.concat_channels(&[intrinsic, cheap_maps])
}

#[derive(Debug, Clone)]
pub enum ConvOp {
    Standard(Conv),
    Ghost(GhostConv),
}

/// A convolution optionally followed by batch norm and SiLU.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub op: ConvOp,
    pub bn: Option<BatchNormIds>,
    pub act: bool,
}

impl ConvLayer {
    /// Conv + BN + SiLU. With [`ConvStyle::Ghost`] and stride 1 the convolution
    /// is a biased ghost convolution followed by SiLU.
    pub fn cba<R: Rng>(
        pb: &mut ParamBuilder<R>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        style: ConvStyle,
    ) -> Result<Self> {
        if cin == 0 || cout == 0 {
            return Err(spec_err("convolution with zero channels"));
        }
        if style == ConvStyle::Ghost && stride == 1 && cout >= GHOST_RATIO {
            let spec = GhostConvSpec::new(cin, cout, GHOST_RATIO, k, GHOST_CHEAP_KERNEL, 1)?;
            let op = ConvOp::Ghost(GhostConv::build(pb, spec, true)?);
            return Ok(Self {
                op,
                bn: None,
                act: true,
            });
        }
        let op = ConvOp::Standard(Conv::build(pb, cin, cout, k, stride, false));
        let bn = Some(pb.batch_norm(cout));
        Ok(Self { op, bn, act: true })
    }

    /// Bare linear convolution (no bias, BN or activation).
    pub fn linear<R: Rng>(
        pb: &mut ParamBuilder<R>,
        cin: usize,
        cout: usize,
        k: usize,
        style: ConvStyle,
    ) -> Result<Self> {
        if cin == 0 || cout == 0 {
            return Err(spec_err("convolution with zero channels"));
        }
        let op = if style == ConvStyle::Ghost && cout >= GHOST_RATIO {
            let spec = GhostConvSpec::new(cin, cout, GHOST_RATIO, k, GHOST_CHEAP_KERNEL, 1)?;
            ConvOp::Ghost(GhostConv::build(pb, spec, false)?)
        } else {
            ConvOp::Standard(Conv::build(pb, cin, cout, k, 1, false))
        };
        Ok(Self {
            op,
            bn: None,
            act: false,
        })
    }

    pub fn cout(&self) -> usize {
        match &self.op {
            ConvOp::Standard(c) => c.cout,
            ConvOp::Ghost(g) => g.spec.out_channels,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let mut y = match &self.op {
            ConvOp::Standard(c) => c.forward(s, x)?,
            ConvOp::Ghost(g) => g.forward(s, x)?,
        };
        if let Some(bn) = &self.bn {
            y = s.batch_norm(bn, y)?;
        }
        if self.act {
            y = s.tape.silu(y)?;
        }
        Ok(y)
    }

    /// Convolution (standard or ghost) counts one, plus BN and activation.
    pub fn modules(&self) -> usize {
        1 + usize::from(self.bn.is_some()) + usize::from(self.act)
    }

    pub fn trace(&self, shape: [usize; 4], cost: &mut Cost) -> [usize; 4] {
        match &self.op {
            ConvOp::Standard(c) => c.trace(shape, cost),
            ConvOp::Ghost(g) => g.trace(shape, cost),
        }
    }
}

/// Focus: lossless pixel-parity slicing followed by Conv-BN-SiLU.
#[derive(Debug, Clone)]
pub struct Focus {
    pub conv: ConvLayer,
}

impl Focus {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let conv = pb.scoped("conv", |pb| ConvLayer::cba(pb, 4 * cin, cout, k, 1, ConvStyle::Standard))?;
        Ok(Self { conv })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let sliced = s.tape.focus_slice(x)?;
        self.conv.forward(s, sliced)
    }

    /// Slicing is counted as one concat node.
    pub fn modules(&self) -> usize {
        1 + self.conv.modules()
    }

    pub fn trace(&self, [b, c, h, w]: [usize; 4], cost: &mut Cost) -> [usize; 4] {
        self.conv.trace([b, 4 * c, h / 2, w / 2], cost)
    }
}

/// Invert Focus slicing: `[B, 4C, H/2, W/2] -> [B, C, H, W]`.
pub fn focus_deslice<T: Scalar>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c4, h2, w2] = t.dims4("focus_deslice")?;
    if c4 % 4 != 0 {
        return Err(spec_err(format!("de-slice needs a multiple of 4 channels, got {c4}")));
    }
    let data = kernels::focus_inverse([b, c4, h2, w2], t.data());
    Ok(Tensor::new(&[b, c4 / 4, 2 * h2, 2 * w2], data)?)
}

/// `x + f(x)` (or `f(x)`) with `f` = 1x1 Conv-BN-SiLU then 3x3 Conv-BN-SiLU.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub cv1: ConvLayer,
    pub cv2: ConvLayer,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn build<R: Rng>(
        pb: &mut ParamBuilder<R>,
        cin: usize,
        cout: usize,
        shortcut: bool,
        expansion: f64,
        style: ConvStyle,
    ) -> Result<Self> {
        if shortcut && cin != cout {
            return Err(spec_err(format!(
                "bottleneck shortcut needs equal channels, got {cin} -> {cout}"
            )));
        }
        let hidden = ((cout as f64 * expansion) as usize).max(1);
        let cv1 = pb.scoped("cv1", |pb| ConvLayer::cba(pb, cin, hidden, 1, 1, style))?;
        let cv2 = pb.scoped("cv2", |pb| ConvLayer::cba(pb, hidden, cout, 3, 1, style))?;
        Ok(Self { cv1, cv2, shortcut })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let h = self.cv1.forward(s, x)?;
        let y = self.cv2.forward(s, h)?;
        if self.shortcut {
            s.tape.add(x, y)
        } else {
            Ok(y)
        }
    }

    pub fn modules(&self) -> usize {
        self.cv1.modules() + self.cv2.modules()
    }

    pub fn trace(&self, shape: [usize; 4], cost: &mut Cost) -> [usize; 4] {
        let h = self.cv1.trace(shape, cost);
        self.cv2.trace(h, cost)
    }
}

/// Cross-stage-partial block hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CspSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden_fraction: f64,
    pub repeats: usize,
    pub shortcut: bool,
}

impl CspSpec {
    pub fn new(cin: usize, cout: usize, repeats: usize, shortcut: bool) -> Self {
        Self {
            in_channels: cin,
            out_channels: cout,
            hidden_fraction: 0.5,
            repeats,
            shortcut,
        }
    }

    pub fn hidden(&self) -> usize {
        (self.out_channels as f64 * self.hidden_fraction) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden() < 1 {
            return Err(spec_err(format!(
                "CSP hidden channels must be >= 1 ({} x {})",
                self.out_channels, self.hidden_fraction
            )));
        }
        if self.repeats < 1 {
            return Err(spec_err("CSP repeat count must be >= 1"));
        }
        if self.in_channels == 0 {
            return Err(spec_err("CSP input channels must be >= 1"));
        }
        Ok(())
    }
}

fn build_stack<R: Rng>(
    pb: &mut ParamBuilder<R>,
    hidden: usize,
    spec: &CspSpec,
    style: ConvStyle,
) -> Result<Vec<Bottleneck>> {
    (0..spec.repeats)
        .map(|i| {
            pb.scoped(format!("m.{i}"), |pb| {
                Bottleneck::build(pb, hidden, hidden, spec.shortcut, 1.0, style)
            })
        })
        .collect()
}

/// BottleneckCSP: path A = `cv1 -> bottlenecks -> cv3` (transition), path B =
/// `cv2`; merged by concat + BN + SiLU + `cv4`.
#[derive(Debug, Clone)]
pub struct BottleneckCsp {
    pub spec: CspSpec,
    pub cv1: ConvLayer,
    pub cv2: ConvLayer,
    pub cv3: ConvLayer,
    pub cv4: ConvLayer,
    pub bn: BatchNormIds,
    pub m: Vec<Bottleneck>,
}

impl BottleneckCsp {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, spec: CspSpec, style: ConvStyle) -> Result<Self> {
        spec.validate()?;
        let (c1, c2, h) = (spec.in_channels, spec.out_channels, spec.hidden());
        let cv1 = pb.scoped("cv1", |pb| ConvLayer::cba(pb, c1, h, 1, 1, style))?;
        let cv2 = pb.scoped("cv2", |pb| ConvLayer::linear(pb, c1, h, 1, style))?;
        let cv3 = pb.scoped("cv3", |pb| ConvLayer::linear(pb, h, h, 1, style))?;
        let cv4 = pb.scoped("cv4", |pb| ConvLayer::cba(pb, 2 * h, c2, 1, 1, style))?;
        let bn = pb.scoped("merge", |pb| pb.batch_norm(2 * h));
        let m = build_stack(pb, h, &spec, style)?;
        Ok(Self {
            spec,
            cv1,
            cv2,
            cv3,
            cv4,
            bn,
            m,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let mut a = self.cv1.forward(s, x)?;
        for b in &self.m {
            a = b.forward(s, a)?;
        }
        let a = self.cv3.forward(s, a)?;
        let b = self.cv2.forward(s, x)?;
        let cat = s.tape.concat_channels(&[a, b])?;
        let y = s.batch_norm(&self.bn, cat)?;
        let y = s.tape.silu(y)?;
        self.cv4.forward(s, y)
    }

    /// Convs, merge concat, merge BN, merge activation and the bottlenecks.
    pub fn modules(&self) -> usize {
        self.cv1.modules()
            + self.cv2.modules()
            + self.cv3.modules()
            + self.cv4.modules()
            + 3
            + self.m.iter().map(Bottleneck::modules).sum::<usize>()
    }

    pub fn trace(&self, shape: [usize; 4], cost: &mut Cost) -> [usize; 4] {
        let mut a = self.cv1.trace(shape, cost);
        for b in &self.m {
            a = b.trace(a, cost);
        }
        let a = self.cv3.trace(a, cost);
        let b = self.cv2.trace(shape, cost);
        self.cv4.trace([a[0], a[1] + b[1], a[2], a[3]], cost)
    }
}

/// C3: `cv3(concat(bottlenecks(cv1(x)), cv2(x)))`, all Conv-BN-SiLU, no merge BN.
#[derive(Debug, Clone)]
pub struct C3 {
    pub spec: CspSpec,
    pub cv1: ConvLayer,
    pub cv2: ConvLayer,
    pub cv3: ConvLayer,
    pub m: Vec<Bottleneck>,
}

impl C3 {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, spec: CspSpec, style: ConvStyle) -> Result<Self> {
        spec.validate()?;
        let (c1, c2, h) = (spec.in_channels, spec.out_channels, spec.hidden());
        let cv1 = pb.scoped("cv1", |pb| ConvLayer::cba(pb, c1, h, 1, 1, style))?;
        let cv2 = pb.scoped("cv2", |pb| ConvLayer::cba(pb, c1, h, 1, 1, style))?;
        let cv3 = pb.scoped("cv3", |pb| ConvLayer::cba(pb, 2 * h, c2, 1, 1, style))?;
        let m = build_stack(pb, h, &spec, style)?;
        Ok(Self {
            spec,
            cv1,
            cv2,
            cv3,
            m,
        })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let mut a = self.cv1.forward(s, x)?;
        for b in &self.m {
            a = b.forward(s, a)?;
        }
        let b = self.cv2.forward(s, x)?;
        let cat = s.tape.concat_channels(&[a, b])?;
        self.cv3.forward(s, cat)
    }

    pub fn modules(&self) -> usize {
        self.cv1.modules()
            + self.cv2.modules()
            + self.cv3.modules()
            + 1
            + self.m.iter().map(Bottleneck::modules).sum::<usize>()
    }

    pub fn trace(&self, shape: [usize; 4], cost: &mut Cost) -> [usize; 4] {
        let mut a = self.cv1.trace(shape, cost);
        for b in &self.m {
            a = b.trace(a, cost);
        }
        let b = self.cv2.trace(shape, cost);
        self.cv3.trace([a[0], a[1] + b[1], a[2], a[3]], cost)
    }
}

/// Pool sizes of the spatial pyramid.
pub const SPP_KERNELS: [usize; 3] = [5, 9, 13];

/// Spatial pyramid pooling: 1x1 reduce, stride-1 "same" max pools, concat, 1x1.
#[derive(Debug, Clone)]
pub struct Spp {
    pub cv1: ConvLayer,
    pub cv2: ConvLayer,
}

impl Spp {
    pub fn build<R: Rng>(pb: &mut ParamBuilder<R>, cin: usize, cout: usize) -> Result<Self> {
        let hidden = (cin / 2).max(1);
        let cv1 = pb.scoped("cv1", |pb| ConvLayer::cba(pb, cin, hidden, 1, 1, ConvStyle::Standard))?;
        let cv2 = pb.scoped("cv2", |pb| {
            ConvLayer::cba(pb, hidden * (SPP_KERNELS.len() + 1), cout, 1, 1, ConvStyle::Standard)
        })?;
        Ok(Self { cv1, cv2 })
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let r = self.cv1.forward(s, x)?;
        let mut parts = vec![r];
        for k in SPP_KERNELS {
            parts.push(s.tape.maxpool2d(r, k, 1, k / 2)?);
        }
        let cat = s.tape.concat_channels(&parts)?;
        self.cv2.forward(s, cat)
    }

    pub fn modules(&self) -> usize {
        self.cv1.modules() + SPP_KERNELS.len() + 1 + self.cv2.modules()
    }

    pub fn trace(&self, shape: [usize; 4], cost: &mut Cost) -> [usize; 4] {
        let r = self.cv1.trace(shape, cost);
        self.cv2
            .trace([r[0], r[1] * (SPP_KERNELS.len() + 1), r[2], r[3]], cost)
    }
}
