//! Decoding raw head maps into boxes, IoU, class-aware NMS and the text
//! record format for detections.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{spec_err, Error, Result};
use crate::model::HeadAnchors;
use crate::tensor::Tensor;

/// Default confidence threshold applied by [`decode`].
pub const CONF_THRESHOLD: f64 = 0.25;
/// Default IoU threshold of [`nms`].
pub const NMS_IOU: f64 = 0.45;
/// Highest-confidence candidates passed from decoding into NMS, per image.
pub const MAX_CANDIDATES: usize = 3000;
/// Detections kept per image after NMS.
pub const MAX_DETECTIONS: usize = 300;

/// Axis-aligned box in centre format, pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Labelled box, input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: usize,
    /// Objectness times class probability.
    pub confidence: f64,
    pub bbox: BBox,
}

fn sigmoid(v: f32) -> f64 {
    1.0 / (1.0 + (-(v as f64)).exp())
}

/// Decode one head `[B, A*(5+C), S, S]` into per-image detections with
/// confidence >= `conf_threshold`.
pub fn decode(
    head: &Tensor<f32>,
    anchors: &[[f32; 2]],
    stride: usize,
    conf_threshold: f64,
) -> Result<Vec<Vec<Detection>>> {
    let [b, ch, gh, gw] = head.dims4("decode")?;
    let na = anchors.len();
    if na == 0 || stride == 0 || ch % na != 0 || ch / na < 6 {
        return Err(spec_err(format!(
            "decode: {ch} channels do not split into {na} anchors x (5 + classes) at stride {stride}"
        )));
    }
    let per = ch / na;
    let nc = per - 5;
    let plane = gh * gw;
    let data = head.data();
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let img = &data[bi * ch * plane..(bi + 1) * ch * plane];
        let mut dets = Vec::new();
        for (a, &[aw, ah]) in anchors.iter().enumerate() {
            let at = |k: usize, cell: usize| img[(a * per + k) * plane + cell];
            for gy in 0..gh {
                for gx in 0..gw {
                    let cell = gy * gw + gx;
                    let obj = sigmoid(at(4, cell));
                    if obj < conf_threshold {
                        continue;
                    }
                    let (mut class, mut best) = (0, f32::NEG_INFINITY);
                    for c in 0..nc {
                        let v = at(5 + c, cell);
                        if v > best {
                            best = v;
                            class = c;
                        }
                    }
                    let confidence = obj * sigmoid(best);
                    if confidence < conf_threshold {
                        continue;
                    }
                    let s = stride as f64;
                    let cx = (2.0 * sigmoid(at(0, cell)) - 0.5 + gx as f64) * s;
                    let cy = (2.0 * sigmoid(at(1, cell)) - 0.5 + gy as f64) * s;
                    let w = (2.0 * sigmoid(at(2, cell))).powi(2) * aw as f64;
                    let h = (2.0 * sigmoid(at(3, cell))).powi(2) * ah as f64;
                    if w > 0.0 && h > 0.0 {
                        dets.push(Detection {
                            class,
                            confidence,
                            bbox: BBox::new(cx, cy, w, h),
                        });
                    }
                }
            }
        }
        out.push(dets);
    }
    Ok(out)
}

/// Ranking used by NMS: confidence descending, then smaller centre x, then
/// smaller centre y.
pub fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
}

/// Greedy class-aware suppression: walking detections in [`rank`] order, a
/// detection is kept iff its IoU with every kept detection of the same class
/// is below `iou_threshold`. Output is in rank order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(rank);
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept
            .iter()
            .filter(|k| k.class == d.class)
            .all(|k| iou(&k.bbox, &d.bbox) < iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}

/// Decode every head of a model output, keep the best [`MAX_CANDIDATES`],
/// run NMS and cap at [`MAX_DETECTIONS`]; one list per image.
pub fn postprocess(
    heads: &[Tensor<f32>],
    anchors: &[HeadAnchors],
    strides: &[usize],
    conf_threshold: f64,
    iou_threshold: f64,
) -> Result<Vec<Vec<Detection>>> {
    if heads.len() != anchors.len() || heads.len() != strides.len() {
        return Err(spec_err(format!(
            "{} heads, {} anchor sets, {} strides",
            heads.len(),
            anchors.len(),
            strides.len()
        )));
    }
    let mut per_image: Vec<Vec<Detection>> = Vec::new();
    for ((head, a), &s) in heads.iter().zip(anchors).zip(strides) {
        let decoded = decode(head, a, s, conf_threshold)?;
        if per_image.is_empty() {
            per_image = vec![Vec::new(); decoded.len()];
        }
        for (acc, d) in per_image.iter_mut().zip(decoded) {
            acc.extend(d);
        }
    }
    Ok(per_image
        .into_iter()
        .map(|mut d| {
            d.sort_by(rank);
            d.truncate(MAX_CANDIDATES);
            let mut kept = nms(&d, iou_threshold);
            kept.truncate(MAX_DETECTIONS);
            kept
        })
        .collect())
}

/// One line of detector output: image id, class name, confidence and the
/// box centre/extent in pixels, whitespace separated.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image: String,
    pub class_name: String,
    pub confidence: f64,
    pub bbox: BBox,
}

impl fmt::Display for DetectionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = &self.bbox;
        write!(
            f,
            "{} {} {:.6} {:.2} {:.2} {:.2} {:.2}",
            self.image, self.class_name, self.confidence, b.cx, b.cy, b.w, b.h
        )
    }
}

impl std::str::FromStr for DetectionRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 7 {
            return Err(spec_err(format!("detection record needs 7 fields, got {}: {line:?}", parts.len())));
        }
        let num = |i: usize| -> Result<f64> {
            parts[i]
                .parse()
                .map_err(|_| spec_err(format!("field {} of {line:?} is not a number", i + 1)))
        };
        Ok(Self {
            image: parts[0].to_string(),
            class_name: parts[1].to_string(),
            confidence: num(2)?,
            bbox: BBox::new(num(3)?, num(4)?, num(5)?, num(6)?),
        })
    }
}
