//! CIoU box regression, objectness and classification loss, and the
//! anchor-ratio target assignment across detection heads.
//!
//! The loss is evaluated in double precision directly from the head values
//! and recorded on the tape as a single custom-gradient term, so the whole
//! training objective is differentiable end to end.

use std::f64::consts::PI;
use std::ops::{Add, Div, Mul, Sub};

use crate::detect::{BBox, GroundTruth};
use crate::error::{spec_err, Result};
use crate::model::HeadAnchors;
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Guard added to every denominator of [`ciou`].
pub const CIOU_EPS: f64 = 1e-9;
/// Default anchor-ratio gate of [`assign_targets`].
pub const RATIO_GATE: f64 = 4.0;

/// Minimal arithmetic needed by the CIoU formula, implemented for `f64` and
/// for a forward-mode dual number carrying the four box partials.
pub trait Num: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> {
    fn c(v: f64) -> Self;
    fn val(self) -> f64;
    fn atan(self) -> Self;
    fn min(self, o: Self) -> Self {
        if self.val() <= o.val() {
            self
        } else {
            o
        }
    }
    fn max(self, o: Self) -> Self {
        if self.val() >= o.val() {
            self
        } else {
            o
        }
    }
}

impl Num for f64 {
    fn c(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
}

/// Value plus partial derivatives with respect to `(cx, cy, w, h)` of the
/// predicted box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual {
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Self { v, d }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: std::array::from_fn(|i| self.d[i] + o.d[i]),
        }
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: std::array::from_fn(|i| self.d[i] - o.d[i]),
        }
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]),
        }
    }
}

impl Div for Dual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v;
        Self {
            v: q,
            d: std::array::from_fn(|i| (self.d[i] - q * o.d[i]) / o.v),
        }
    }
}

impl Num for Dual {
    fn c(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn atan(self) -> Self {
        let s = 1.0 / (1.0 + self.v * self.v);
        Self {
            v: self.v.atan(),
            d: self.d.map(|d| d * s),
        }
    }
}

/// Complete IoU of centre-format boxes `a` and `b`:
/// `IoU - rho^2 / c^2 - alpha * v` with `v = 4/pi^2 (atan(wb/hb) - atan(wa/ha))^2`
/// and `alpha = v / (1 - IoU + v)`, each denominator guarded by [`CIOU_EPS`].
pub fn ciou_generic<N: Num>(a: [N; 4], b: [N; 4]) -> N {
    let half = N::c(0.5);
    let eps = N::c(CIOU_EPS);
    let zero = N::c(0.0);
    let [acx, acy, aw, ah] = a;
    let [bcx, bcy, bw, bh] = b;
    let (ax1, ax2, ay1, ay2) = (acx - aw * half, acx + aw * half, acy - ah * half, acy + ah * half);
    let (bx1, bx2, by1, by2) = (bcx - bw * half, bcx + bw * half, bcy - bh * half, bcy + bh * half);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(zero);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(zero);
    let inter = iw * ih;
    let union = aw * ah + bw * bh - inter + eps;
    let iou = inter / union;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let chh = ay2.max(by2) - ay1.min(by1);
    let c2 = cw * cw + chh * chh + eps;
    let (dx, dy) = (bcx - acx, bcy - acy);
    let rho2 = dx * dx + dy * dy;
    let dv = (bw / (bh + eps)).atan() - (aw / (ah + eps)).atan();
    let v = N::c(4.0 / (PI * PI)) * dv * dv;
    let alpha = v / (v - iou + N::c(1.0) + eps);
    iou - (rho2 / c2 + alpha * v)
}

pub fn ciou(a: &BBox, b: &BBox) -> f64 {
    ciou_generic([a.cx, a.cy, a.w, a.h], [b.cx, b.cy, b.w, b.h])
}

/// Bit pattern of every min/max branch [`ciou_generic`] takes for `a`, `b`;
/// CIoU is smooth wherever this pattern is constant.
pub fn ciou_piece(a: &BBox, b: &BBox) -> u16 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let bits = [
        ax2 <= bx2,
        ax1 >= bx1,
        ay2 <= by2,
        ay1 >= by1,
        ax2.min(bx2) - ax1.max(bx1) > 0.0,
        ay2.min(by2) - ay1.max(by1) > 0.0,
        ax2 >= bx2,
        ax1 <= bx1,
        ay2 >= by2,
        ay1 <= by1,
    ];
    bits.iter().enumerate().fold(0, |acc, (i, &b)| acc | (u16::from(b) << i))
}

/// `(ciou(pred, gt), d ciou / d (cx, cy, w, h) of pred)`.
pub fn ciou_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let p = [
        Dual::var(pred.cx, 0),
        Dual::var(pred.cy, 1),
        Dual::var(pred.w, 2),
        Dual::var(pred.h, 3),
    ];
    let g = [gt.cx, gt.cy, gt.w, gt.h].map(Dual::c);
    let r = ciou_generic(p, g);
    (r.v, r.d)
}

/// One (ground truth, head, anchor, cell) training pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub image: usize,
    pub gt: usize,
    pub head: usize,
    pub anchor: usize,
    pub gx: usize,
    pub gy: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TargetAssignment {
    pub targets: Vec<Target>,
    /// `(image, gt)` pairs no anchor accepted.
    pub unmatched: Vec<(usize, usize)>,
}

impl TargetAssignment {
    pub fn for_gt(&self, image: usize, gt: usize) -> impl Iterator<Item = &Target> {
        self.targets.iter().filter(move |t| t.image == image && t.gt == gt)
    }
}

/// Largest of the four width/height ratios between a box and an anchor.
pub fn anchor_ratio(w: f64, h: f64, anchor: [f32; 2]) -> f64 {
    let (aw, ah) = (anchor[0] as f64, anchor[1] as f64);
    (w / aw).max(aw / w).max(h / ah).max(ah / h)
}

/// Assign each ground truth (input pixels) to every anchor on every head
/// whose shape ratio is below `ratio_gate`, at its owning cell plus the
/// horizontally and vertically nearest neighbour cells (by the sub-cell
/// offset of the centre).
pub fn assign_targets(
    gts: &[Vec<GroundTruth>],
    anchors: &[HeadAnchors],
    strides: &[usize],
    input_size: usize,
    ratio_gate: f64,
) -> Result<TargetAssignment> {
    if anchors.len() != strides.len() {
        return Err(spec_err(format!("{} anchor sets for {} strides", anchors.len(), strides.len())));
    }
    let mut out = TargetAssignment::default();
    for (image, boxes) in gts.iter().enumerate() {
        for (gi, gt) in boxes.iter().enumerate() {
            let b = &gt.bbox;
            if !(b.w > 0.0 && b.h > 0.0) {
                return Err(spec_err(format!("image {image} box {gi} has non-positive extent")));
            }
            let before = out.targets.len();
            for (head, (set, &stride)) in anchors.iter().zip(strides).enumerate() {
                let grid = input_size / stride;
                let (x, y) = (b.cx / stride as f64, b.cy / stride as f64);
                let (cx, cy) = (x.floor(), y.floor());
                if cx < 0.0 || cy < 0.0 || cx as usize >= grid || cy as usize >= grid {
                    continue;
                }
                let (cx, cy) = (cx as usize, cy as usize);
                let (fx, fy) = (x - cx as f64, y - cy as f64);
                let mut cells = vec![(cx, cy)];
                if fx < 0.5 && cx > 0 {
                    cells.push((cx - 1, cy));
                } else if fx > 0.5 && cx + 1 < grid {
                    cells.push((cx + 1, cy));
                }
                if fy < 0.5 && cy > 0 {
                    cells.push((cx, cy - 1));
                } else if fy > 0.5 && cy + 1 < grid {
                    cells.push((cx, cy + 1));
                }
                for (anchor, &a) in set.iter().enumerate() {
                    if anchor_ratio(b.w, b.h, a) < ratio_gate {
                        out.targets.extend(cells.iter().map(|&(gx, gy)| Target {
                            image,
                            gt: gi,
                            head,
                            anchor,
                            gx,
                            gy,
                        }));
                    }
                }
            }
            if out.targets.len() == before {
                out.unmatched.push((image, gi));
            }
        }
    }
    Ok(out)
}

/// Loss weights: `total = box * L_box + obj * L_obj + cls * L_cls`, with the
/// objectness term of head `i` scaled by `balance[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub box_: f64,
    pub obj: f64,
    pub cls: f64,
    pub balance: Vec<f64>,
}

impl LossWeights {
    /// Lineage defaults; the finest head's objectness is weighted 4.
    pub fn for_heads(heads: usize) -> Self {
        let balance = if heads == 3 {
            vec![4.0, 1.0, 0.4]
        } else {
            [4.0, 1.0, 0.25, 0.06, 0.02].into_iter().take(heads).collect()
        };
        Self {
            box_: 0.05,
            obj: 1.0,
            cls: 0.5,
            balance,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub box_: f64,
    pub obj: f64,
    pub cls: f64,
    pub total: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `BCE(sigmoid(x), t)` in a numerically stable form.
fn bce_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Everything the loss needs besides the head values.
pub struct LossInputs<'a> {
    pub gts: &'a [Vec<GroundTruth>],
    pub assignment: &'a TargetAssignment,
    pub anchors: &'a [HeadAnchors],
    pub strides: &'a [usize],
    pub weights: &'a LossWeights,
}

/// Per-head objectness targets, `[B * A * H * W]` each.
pub type ObjectnessTargets = Vec<Vec<f64>>;

/// Loss terms and their gradients with respect to every head value.
pub fn loss_and_grads<T: Scalar>(heads: &[&Tensor<T>], inp: &LossInputs) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    loss_core(heads, inp, None).map(|(l, g, _, _)| (l, g))
}

/// Objectness targets the loss derives from `heads` (detached CIoU values).
pub fn objectness_targets<T: Scalar>(heads: &[&Tensor<T>], inp: &LossInputs) -> Result<ObjectnessTargets> {
    loss_core(heads, inp, None).map(|(_, _, t, _)| t)
}

/// Loss with the objectness targets held at `frozen`: the function whose
/// exact derivative [`loss_and_grads`] returns (the targets are detached).
pub fn loss_with_targets<T: Scalar>(
    heads: &[&Tensor<T>],
    inp: &LossInputs,
    frozen: &ObjectnessTargets,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    loss_core(heads, inp, Some(frozen)).map(|(l, g, _, _)| (l, g))
}

/// Total loss with frozen objectness targets plus a fingerprint of the
/// smooth piece it was evaluated in (for finite-difference checks).
pub fn loss_value_piecewise<T: Scalar>(
    heads: &[&Tensor<T>],
    inp: &LossInputs,
    frozen: &ObjectnessTargets,
) -> Result<(f64, u64)> {
    loss_core(heads, inp, Some(frozen)).map(|(l, _, _, p)| (l.total, p))
}

fn loss_core<T: Scalar>(
    heads: &[&Tensor<T>],
    inp: &LossInputs,
    frozen: Option<&ObjectnessTargets>,
) -> Result<(LossBreakdown, Vec<Vec<f64>>, ObjectnessTargets, u64)> {
    use std::hash::{Hash, Hasher};
    let mut piece = std::collections::hash_map::DefaultHasher::new();
    let nh = heads.len();
    if inp.anchors.len() != nh || inp.strides.len() != nh || inp.weights.balance.len() != nh {
        return Err(spec_err(format!(
            "loss: {nh} heads but {} anchor sets, {} strides, {} balance weights",
            inp.anchors.len(),
            inp.strides.len(),
            inp.weights.balance.len()
        )));
    }
    let mut dims = Vec::with_capacity(nh);
    for (h, head) in heads.iter().enumerate() {
        let d = head.dims4("loss")?;
        if d[1] % inp.anchors[h].len() != 0 || d[1] / inp.anchors[h].len() < 6 {
            return Err(spec_err(format!("loss: head {h} has {} channels", d[1])));
        }
        dims.push(d);
    }
    let batch = dims.first().map_or(0, |d| d[0]);
    if inp.gts.len() != batch {
        return Err(spec_err(format!("loss: {} label lists for batch {batch}", inp.gts.len())));
    }
    let na = inp.anchors[0].len();
    let per = dims.first().map_or(6, |d| d[1] / na);
    let nc = per - 5;
    let index = |t: &Target, k: usize| {
        let [_, ch, gh, gw] = dims[t.head];
        ((t.image * ch + t.anchor * per + k) * gh + t.gy) * gw + t.gx
    };
    for t in &inp.assignment.targets {
        let ok = t.head < nh
            && t.image < batch
            && t.anchor < na
            && t.gy < dims[t.head][2]
            && t.gx < dims[t.head][3]
            && inp.gts[t.image].get(t.gt).is_some_and(|g| g.class < nc);
        if !ok {
            return Err(spec_err(format!("loss: assignment {t:?} does not fit the heads")));
        }
    }
    let mut grads: Vec<Vec<f64>> = heads.iter().map(|h| vec![0.0; h.numel()]).collect();
    let value = |t: &Target, k: usize| heads[t.head].data()[index(t, k)].f64();
    let pairs = inp.assignment.targets.len();

    // Box and classification terms over assigned pairs; objectness targets
    // are the detached, clamped CIoU of each pair (max over pairs per cell).
    let mut tobj: Vec<Vec<f64>> = dims.iter().map(|d| vec![0.0; d[0] * na * d[2] * d[3]]).collect();
    let (mut lbox, mut lcls) = (0.0, 0.0);
    let wb = inp.weights.box_ / pairs.max(1) as f64;
    let wc = inp.weights.cls / (pairs * nc).max(1) as f64;
    for t in &inp.assignment.targets {
        let stride = inp.strides[t.head] as f64;
        let [aw, ah] = inp.anchors[t.head][t.anchor];
        let s: [f64; 4] = std::array::from_fn(|k| sigmoid(value(t, k)));
        let pred = BBox::new(
            2.0 * s[0] - 0.5,
            2.0 * s[1] - 0.5,
            (2.0 * s[2]).powi(2) * aw as f64 / stride,
            (2.0 * s[3]).powi(2) * ah as f64 / stride,
        );
        let g = &inp.gts[t.image][t.gt];
        let gt = BBox::new(
            g.bbox.cx / stride - t.gx as f64,
            g.bbox.cy / stride - t.gy as f64,
            g.bbox.w / stride,
            g.bbox.h / stride,
        );
        let (c, dc) = ciou_grad(&pred, &gt);
        ciou_piece(&pred, &gt).hash(&mut piece);
        lbox += 1.0 - c;
        let dpred = [
            2.0 * s[0] * (1.0 - s[0]),
            2.0 * s[1] * (1.0 - s[1]),
            8.0 * s[2] * s[2] * (1.0 - s[2]) * aw as f64 / stride,
            8.0 * s[3] * s[3] * (1.0 - s[3]) * ah as f64 / stride,
        ];
        let gh = &mut grads[t.head];
        for k in 0..4 {
            gh[index(t, k)] -= wb * dc[k] * dpred[k];
        }
        for k in 0..nc {
            let x = value(t, 5 + k);
            let target = if k == g.class { 1.0 } else { 0.0 };
            lcls += bce_logits(x, target);
            gh[index(t, 5 + k)] += wc * (sigmoid(x) - target);
        }
        let [_, _, gh_, gw_] = dims[t.head];
        let cell = ((t.image * na + t.anchor) * gh_ + t.gy) * gw_ + t.gx;
        let slot = &mut tobj[t.head][cell];
        *slot = slot.max(c.clamp(0.0, 1.0));
    }
    if let Some(f) = frozen {
        if f.len() != tobj.len() || f.iter().zip(&tobj).any(|(a, b)| a.len() != b.len()) {
            return Err(spec_err("loss: frozen objectness targets do not match the heads"));
        }
        tobj = f.clone();
    }
    let lbox = if pairs > 0 { lbox / pairs as f64 } else { 0.0 };
    let lcls = if pairs > 0 { lcls / (pairs * nc) as f64 } else { 0.0 };

    let mut lobj = 0.0;
    for (h, d) in dims.iter().enumerate() {
        let [b, ch, gh, gw] = *d;
        let plane = gh * gw;
        let n = (b * na * plane) as f64;
        let w = inp.weights.balance[h];
        let data = heads[h].data();
        let mut sum = 0.0;
        for bi in 0..b {
            for a in 0..na {
                for cell in 0..plane {
                    let i = (bi * ch + a * per + 4) * plane + cell;
                    let x = data[i].f64();
                    let t = tobj[h][(bi * na + a) * plane + cell];
                    sum += bce_logits(x, t);
                    grads[h][i] += inp.weights.obj * w * (sigmoid(x) - t) / n;
                }
            }
        }
        lobj += w * sum / n;
    }
    let total = inp.weights.box_ * lbox + inp.weights.obj * lobj + inp.weights.cls * lcls;
    Ok((
        LossBreakdown {
            box_: lbox,
            obj: lobj,
            cls: lcls,
            total,
        },
        grads,
        tobj,
        piece.finish(),
    ))
}

/// Record the detection loss of `heads` on the tape.
pub fn detection_loss<T: Scalar>(tape: &mut Tape<T>, heads: &[Var], inp: &LossInputs) -> Result<(Var, LossBreakdown)> {
    let values: Vec<&Tensor<T>> = heads.iter().map(|&h| tape.value(h)).collect();
    let (breakdown, grads) = loss_and_grads(&values, inp)?;
    let local = heads
        .iter()
        .zip(grads)
        .map(|(&h, g)| (h, g.into_iter().map(T::of).collect()))
        .collect();
    let v = tape.term(T::of(breakdown.total), local)?;
    Ok((v, breakdown))
}
