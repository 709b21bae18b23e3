//! Detection metrics: greedy matching, precision/recall, all-point AP, mAP
//! and per-class reports.

use std::fmt::Write as _;

use crate::data::CLASSES;
use crate::detect::{iou, Detection, GroundTruth};

/// Default matching IoU.
pub const MATCH_IOU: f64 = 0.5;

/// TP/FP flag per detection (input order) and matched flag per GT.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    pub det_tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
}

/// Greedy matching in descending confidence (ties keep input order): each
/// detection takes the unmatched GT of its own class with the highest IoU,
/// and is a true positive iff that IoU reaches `iou_threshold`.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_threshold: f64) -> Matching {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut det_tp = vec![false; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if gt_matched[j] || g.class != d.class {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox);
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, v)) = best {
            if v >= iou_threshold {
                det_tp[i] = true;
                gt_matched[j] = true;
            }
        }
    }
    Matching { det_tp, gt_matched }
}

/// Precision and recall; `degenerate` marks a 0/0 ratio (reported as 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub degenerate: bool,
}

pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> PrecisionRecall {
    let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    PrecisionRecall {
        precision: p.unwrap_or(0.0),
        recall: r.unwrap_or(0.0),
        degenerate: p.is_none() || r.is_none(),
    }
}

/// `(recall, precision)` after each detection of a confidence-ranked list.
pub fn pr_curve(flags: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            tp += f as usize;
            let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
            (recall, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// All-point AP: area under the monotone precision envelope of the curve,
/// summed over recall steps. `None` when the class has neither GTs nor
/// detections; 0 when it has detections but no GTs.
pub fn average_precision(flags: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let curve = pr_curve(flags, num_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|c| c.1).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in curve.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[k];
            prev_recall = r;
        }
    }
    Some(ap)
}

/// Mean of the defined APs; `None` when no class is defined.
pub fn map_over_classes(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Per-class metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub name: String,
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    /// `(confidence, recall, precision)` after each ranked detection.
    pub curve: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    /// Mean AP over classes with a defined AP (0 when none is defined).
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub images: usize,
    pub gt_boxes: usize,
    pub iou_threshold: f64,
}

/// Accumulates detections and GTs image by image.
#[derive(Debug, Clone)]
pub struct Evaluator {
    iou_threshold: f64,
    count_threshold: f64,
    names: Vec<String>,
    /// per class: (confidence, is TP, image index)
    scored: Vec<Vec<(f64, bool, usize)>>,
    num_gt: Vec<usize>,
    images: usize,
}

impl Evaluator {
    pub fn new(num_classes: usize, iou_threshold: f64) -> Self {
        let names = (0..num_classes)
            .map(|c| CLASSES.get(c).map_or_else(|| format!("class{c}"), |n| n.to_string()))
            .collect();
        Self {
            iou_threshold,
            count_threshold: 0.0,
            names,
            scored: vec![Vec::new(); num_classes],
            num_gt: vec![0; num_classes],
            images: 0,
        }
    }

    /// TP/FP/FN, precision and recall count only detections at or above
    /// `conf`; AP still ranks every detection.
    pub fn with_operating_point(mut self, conf: f64) -> Self {
        self.count_threshold = conf;
        self
    }

    pub fn add_image(&mut self, dets: &[Detection], gts: &[GroundTruth]) {
        let m = match_detections(dets, gts, self.iou_threshold);
        for (d, tp) in dets.iter().zip(m.det_tp) {
            if let Some(s) = self.scored.get_mut(d.class) {
                s.push((d.confidence, tp, self.images));
            }
        }
        for g in gts {
            if let Some(n) = self.num_gt.get_mut(g.class) {
                *n += 1;
            }
        }
        self.images += 1;
    }

    pub fn report(&self) -> EvalReport {
        let mut classes = Vec::with_capacity(self.names.len());
        for (c, name) in self.names.iter().enumerate() {
            let mut s = self.scored[c].clone();
            // stable: equal confidences keep image order
            s.sort_by(|a, b| b.0.total_cmp(&a.0));
            let flags: Vec<bool> = s.iter().map(|x| x.1).collect();
            let counted: Vec<bool> = s.iter().filter(|x| x.0 >= self.count_threshold).map(|x| x.1).collect();
            let tp = counted.iter().filter(|&&f| f).count();
            let fp = counted.len() - tp;
            let fn_ = self.num_gt[c] - tp;
            let pr = precision_recall(tp, fp, fn_);
            let curve = pr_curve(&flags, self.num_gt[c])
                .into_iter()
                .zip(&s)
                .map(|((r, p), x)| (x.0, r, p))
                .collect();
            classes.push(ClassReport {
                name: name.clone(),
                ap: average_precision(&flags, self.num_gt[c]),
                num_gt: self.num_gt[c],
                tp,
                fp,
                fn_,
                precision: pr.precision,
                recall: pr.recall,
                curve,
            });
        }
        let (tp, fp, fn_) = classes
            .iter()
            .fold((0, 0, 0), |a, c| (a.0 + c.tp, a.1 + c.fp, a.2 + c.fn_));
        let overall = precision_recall(tp, fp, fn_);
        let aps: Vec<Option<f64>> = classes.iter().map(|c| c.ap).collect();
        EvalReport {
            map: map_over_classes(&aps).unwrap_or(0.0),
            precision: overall.precision,
            recall: overall.recall,
            images: self.images,
            gt_boxes: self.num_gt.iter().sum(),
            iou_threshold: self.iou_threshold,
            classes,
        }
    }
}

/// Evaluate paired per-image detections and ground truths.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize, iou_threshold: f64) -> EvalReport {
    let mut e = Evaluator::new(num_classes, iou_threshold);
    for (d, g) in dets.iter().zip(gts) {
        e.add_image(d, g);
    }
    e.report()
}

fn fmt_ap(ap: Option<f64>) -> String {
    ap.map_or_else(|| "-".to_string(), |v| format!("{:.1}", v * 100.0))
}

impl EvalReport {
    pub fn class(&self, name: &str) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.name == name)
    }

    /// Human-readable per-class table (AP, P, R in percent).
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} images, {} boxes, IoU {:.2}",
            self.images, self.gt_boxes, self.iou_threshold
        );
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>7} {:>7}",
            "class", "GT", "TP", "FP", "FN", "AP", "P", "R"
        );
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6} {:>7.1} {:>7.1}",
                c.name,
                c.num_gt,
                c.tp,
                c.fp,
                c.fn_,
                fmt_ap(c.ap),
                c.precision * 100.0,
                c.recall * 100.0
            );
        }
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>6} {:>6} {:>6} {:>6.1} {:>7.1} {:>7.1}",
            "all",
            self.gt_boxes,
            "",
            "",
            "",
            self.map * 100.0,
            self.precision * 100.0,
            self.recall * 100.0
        );
        s
    }

    /// `class,AP,TP,FP,FN,P,R` per class, then an `mAP` footer row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,AP,TP,FP,FN,P,R\n");
        for c in &self.classes {
            let ap = c.ap.map_or_else(String::new, |v| format!("{v:.6}"));
            let _ = writeln!(
                s,
                "{},{ap},{},{},{},{:.6},{:.6}",
                c.name, c.tp, c.fp, c.fn_, c.precision, c.recall
            );
        }
        let _ = writeln!(s, "mAP,{:.6},,,,{:.6},{:.6}", self.map, self.precision, self.recall);
        s
    }

    /// `class,num_gt,rank,confidence,recall,precision`, one row per ranked detection.
    pub fn pr_curves_csv(&self) -> String {
        let mut s = String::from("class,num_gt,rank,confidence,recall,precision\n");
        for c in &self.classes {
            for (k, (conf, r, p)) in c.curve.iter().enumerate() {
                let _ = writeln!(s, "{},{},{k},{conf:.6},{r:.9},{p:.9}", c.name, c.num_gt);
            }
        }
        s
    }
}
