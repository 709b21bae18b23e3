use image::imageops;

use super::AnnotatedImage;
use crate::detect::{BBox, GroundTruth};

/// Margin by which boxes are grown before grouping them into clusters.
pub const CLUSTER_DILATION: f64 = 50.0;

/// Boxes shorter than this after clipping to a crop are dropped.
pub const MIN_CLIPPED_EXTENT: f64 = 1.0;

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = i;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

/// Group boxes whose `dilation`-grown rectangles touch (connected components).
/// Clusters are listed by their smallest member index; members ascending.
pub fn defect_clusters(boxes: &[GroundTruth], dilation: f64) -> Vec<Vec<usize>> {
    let n = boxes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let grown: Vec<[f64; 4]> = boxes
        .iter()
        .map(|g| {
            let [x1, y1, x2, y2] = g.bbox.corners();
            [x1 - dilation, y1 - dilation, x2 + dilation, y2 + dilation]
        })
        .collect();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (grown[i], grown[j]);
            if a[0] <= b[2] && b[0] <= a[2] && a[1] <= b[3] && b[1] <= a[3] {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut root_slot: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        match root_slot[r] {
            Some(s) => clusters[s].push(i),
            None => {
                root_slot[r] = Some(clusters.len());
                clusters.push(vec![i]);
            }
        }
    }
    clusters
}

/// Translate boxes into the window at `(x0, y0)` of size `w x h`, clip them
/// to it and drop those thinner than [`MIN_CLIPPED_EXTENT`].
pub fn clip_boxes(boxes: &[GroundTruth], x0: f64, y0: f64, w: f64, h: f64) -> Vec<GroundTruth> {
    boxes
        .iter()
        .filter_map(|g| {
            let [x1, y1, x2, y2] = g.bbox.corners();
            let (x1, x2) = ((x1 - x0).max(0.0), (x2 - x0).min(w));
            let (y1, y2) = ((y1 - y0).max(0.0), (y2 - y0).min(h));
            (x2 - x1 >= MIN_CLIPPED_EXTENT && y2 - y1 >= MIN_CLIPPED_EXTENT).then(|| GroundTruth {
                class: g.class,
                bbox: BBox::from_corners(x1, y1, x2, y2),
            })
        })
        .collect()
}

/// One `crop x crop` window per defect cluster, centred on the cluster and
/// clamped to the image; every box overlapping the window is translated and
/// clipped. Windows without a surviving box are discarded, as are inputs not
/// larger than the crop in both extents.
pub fn preprocess_crop(raw: &AnnotatedImage, crop: u32) -> Vec<AnnotatedImage> {
    let (w, h) = (raw.width(), raw.height());
    if w < crop || h < crop || crop == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (k, cluster) in defect_clusters(&raw.boxes, CLUSTER_DILATION).iter().enumerate() {
        let corners: Vec<[f64; 4]> = cluster.iter().map(|&i| raw.boxes[i].bbox.corners()).collect();
        let x1 = corners.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
        let y1 = corners.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min);
        let x2 = corners.iter().map(|c| c[2]).fold(f64::NEG_INFINITY, f64::max);
        let y2 = corners.iter().map(|c| c[3]).fold(f64::NEG_INFINITY, f64::max);
        let half = crop as f64 / 2.0;
        let x0 = ((x1 + x2) / 2.0 - half).round().clamp(0.0, (w - crop) as f64) as u32;
        let y0 = ((y1 + y2) / 2.0 - half).round().clamp(0.0, (h - crop) as f64) as u32;
        let boxes = clip_boxes(&raw.boxes, x0 as f64, y0 as f64, crop as f64, crop as f64);
        if boxes.is_empty() {
            continue;
        }
        out.push(AnnotatedImage {
            id: format!("{}_c{k}", raw.id),
            image: imageops::crop_imm(&raw.image, x0, y0, crop, crop).to_image(),
            boxes,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{HOT_SPOT, SCRATCH};
    use image::GrayImage;

    fn raw(boxes: Vec<GroundTruth>) -> AnnotatedImage {
        AnnotatedImage {
            id: "raw".into(),
            image: GrayImage::from_fn(5800, 3504, |x, y| image::Luma([((x + y) % 251) as u8])),
            boxes,
        }
    }

    fn g(class: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> GroundTruth {
        GroundTruth {
            class,
            bbox: BBox::from_corners(x1, y1, x2, y2),
        }
    }

    #[test]
    fn centred_defect_is_recentred() {
        let r = raw(vec![g(SCRATCH, 2898.0, 1736.0, 2902.0, 1768.0)]);
        let crops = preprocess_crop(&r, 600);
        assert_eq!(crops.len(), 1);
        let b = crops[0].boxes[0].bbox;
        assert_eq!((b.cx, b.cy, b.w, b.h), (300.0, 300.0, 4.0, 32.0));
        assert_eq!(crops[0].image.dimensions(), (600, 600));
        // pixels are copied, not resampled
        assert_eq!(crops[0].image.get_pixel(0, 0), r.image.get_pixel(2600, 1452));
    }

    #[test]
    fn corner_defect_clamps_window() {
        let r = raw(vec![g(HOT_SPOT, 5700.0, 3400.0, 5800.0, 3504.0)]);
        let crops = preprocess_crop(&r, 600);
        assert_eq!(crops.len(), 1);
        let b = crops[0].boxes[0].bbox;
        assert_eq!((b.w, b.h), (100.0, 104.0));
        assert_eq!(b.corners(), [500.0, 496.0, 600.0, 600.0]);
        crops[0].validate().unwrap();
    }

    #[test]
    fn separated_defects_give_one_crop_each() {
        let boxes = vec![
            g(SCRATCH, 500.0, 500.0, 504.0, 532.0),
            g(HOT_SPOT, 3000.0, 1500.0, 3152.0, 1710.0),
            g(SCRATCH, 5000.0, 3000.0, 5004.0, 3032.0),
        ];
        let crops = preprocess_crop(&raw(boxes.clone()), 600);
        assert_eq!(crops.len(), 3);
        assert_eq!(crops.iter().map(|c| c.boxes.len()).sum::<usize>(), boxes.len());
        for (c, b) in crops.iter().zip(&boxes) {
            assert_eq!((c.boxes[0].bbox.w, c.boxes[0].bbox.h), (b.bbox.w, b.bbox.h));
        }
    }

    #[test]
    fn nearby_defects_share_a_cluster() {
        let boxes = vec![
            g(SCRATCH, 500.0, 500.0, 504.0, 532.0),
            g(SCRATCH, 580.0, 500.0, 584.0, 532.0),
            g(SCRATCH, 900.0, 500.0, 904.0, 532.0),
        ];
        assert_eq!(defect_clusters(&boxes, 50.0), vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn small_or_empty_inputs_produce_nothing() {
        let mut r = raw(vec![]);
        assert!(preprocess_crop(&r, 600).is_empty());
        r.image = GrayImage::new(500, 500);
        r.boxes = vec![g(SCRATCH, 10.0, 10.0, 14.0, 42.0)];
        assert!(preprocess_crop(&r, 600).is_empty());
    }
}
