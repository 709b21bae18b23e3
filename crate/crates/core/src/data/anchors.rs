use super::AnnotatedImage;
use crate::model::{fallback_anchors, HeadAnchors, ANCHORS_PER_HEAD};

/// Default iteration cap for anchor clustering.
pub const KMEANS_MAX_ITERATIONS: usize = 300;

/// IoU of two boxes given as `(w, h)` sharing a centre.
pub fn shape_iou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = a[0].min(b[0]) * a[1].min(b[1]);
    let union = a[0] * a[1] + b[0] * b[1] - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Result of clustering box shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeClusters {
    /// Centroids `(w, h)`, sorted by ascending area.
    pub centroids: Vec<[f64; 2]>,
    /// Cluster index (into `centroids`) of every input shape.
    pub labels: Vec<usize>,
    pub iterations: usize,
    /// Whether the assignment reached a fixpoint before the iteration cap.
    pub converged: bool,
}

fn nearest(c: &[[f64; 2]], s: [f64; 2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &cj) in c.iter().enumerate() {
        let d = 1.0 - shape_iou(cj, s);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// k-means over `(w, h)` with distance `1 - IoU`. Centroids start at the
/// area quantiles `(j + 0.5) / k` of the input; a cluster that empties
/// keeps its previous centroid. Deterministic: no random state involved.
/// Panics unless `1 <= k <= shapes.len()`.
pub fn kmeans_shapes(shapes: &[[f64; 2]], k: usize, max_iterations: usize) -> ShapeClusters {
    assert!(k >= 1 && k <= shapes.len(), "kmeans needs 1 <= k <= n");
    let mut by_area: Vec<[f64; 2]> = shapes.to_vec();
    by_area.sort_by(|a, b| (a[0] * a[1]).total_cmp(&(b[0] * b[1])).then(a[0].total_cmp(&b[0])));
    let n = shapes.len();
    let mut centroids: Vec<[f64; 2]> = (0..k)
        .map(|j| by_area[(((j as f64 + 0.5) / k as f64) * n as f64) as usize])
        .collect();
    let mut labels: Vec<usize> = shapes.iter().map(|&s| nearest(&centroids, s)).collect();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iterations {
        iterations += 1;
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (s, &l) in shapes.iter().zip(&labels) {
            sums[l][0] += s[0];
            sums[l][1] += s[1];
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64];
            }
        }
        let next: Vec<usize> = shapes.iter().map(|&s| nearest(&centroids, s)).collect();
        if next == labels {
            converged = true;
            break;
        }
        labels = next;
    }
    // relabel by ascending centroid area
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| (centroids[a][0] * centroids[a][1]).total_cmp(&(centroids[b][0] * centroids[b][1])));
    let mut rank = vec![0; k];
    for (r, &j) in order.iter().enumerate() {
        rank[j] = r;
    }
    ShapeClusters {
        centroids: order.iter().map(|&j| centroids[j]).collect(),
        labels: labels.iter().map(|&l| rank[l]).collect(),
        iterations,
        converged,
    }
}

/// Anchors computed for a set of heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorFit {
    /// One set per head, finest stride first.
    pub anchors: Vec<HeadAnchors>,
    /// True when there were too few boxes and the fallback constants were used.
    pub fallback: bool,
    pub iterations: usize,
}

/// Cluster training box shapes into `3 x heads` anchors, sort them by area
/// and hand them out three at a time to the heads, finest first. With
/// fewer boxes than anchors the per-stride fallback constants are returned
/// and a warning is logged.
pub fn adaptive_anchors(shapes: &[[f64; 2]], strides: &[usize], max_iterations: usize) -> AnchorFit {
    let k = ANCHORS_PER_HEAD * strides.len();
    let usable: Vec<[f64; 2]> = shapes
        .iter()
        .copied()
        .filter(|s| s[0] > 0.0 && s[1] > 0.0 && s[0].is_finite() && s[1].is_finite())
        .collect();
    if k == 0 || usable.len() < k {
        log::warn!(
            "adaptive anchors: {} usable boxes for {k} anchors, using fallback constants",
            usable.len()
        );
        return AnchorFit {
            anchors: fallback_anchors(strides),
            fallback: true,
            iterations: 0,
        };
    }
    let fit = kmeans_shapes(&usable, k, max_iterations);
    let anchors = fit
        .centroids
        .chunks(ANCHORS_PER_HEAD)
        .map(|c| {
            let mut h: HeadAnchors = [[0.0; 2]; ANCHORS_PER_HEAD];
            for (dst, src) in h.iter_mut().zip(c) {
                *dst = [src[0] as f32, src[1] as f32];
            }
            h
        })
        .collect();
    AnchorFit {
        anchors,
        fallback: false,
        iterations: fit.iterations,
    }
}

/// Box shapes `(w, h)` as they appear after letterboxing each sample to
/// `target`.
pub fn letterboxed_shapes(samples: &[AnnotatedImage], target: u32) -> Vec<[f64; 2]> {
    samples
        .iter()
        .flat_map(|s| {
            let scale = (target as f64 / s.width() as f64).min(target as f64 / s.height() as f64);
            s.boxes.iter().map(move |g| [g.bbox.w * scale, g.bbox.h * scale])
        })
        .collect()
}

/// Fraction of shapes passing the ratio gate against at least one anchor.
pub fn anchor_coverage(shapes: &[[f64; 2]], anchors: &[HeadAnchors], ratio_gate: f64) -> f64 {
    if shapes.is_empty() {
        return 1.0;
    }
    let covered = shapes
        .iter()
        .filter(|s| {
            anchors.iter().flatten().any(|a| {
                let (aw, ah) = (a[0] as f64, a[1] as f64);
                let r = (s[0] / aw).max(aw / s[0]).max(s[1] / ah).max(ah / s[1]);
                r < ratio_gate
            })
        })
        .count();
    covered as f64 / shapes.len() as f64
}
