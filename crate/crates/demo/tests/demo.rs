use gbh::detect::{iou, BBox, Detection};
use gbh_demo::{candidates, complexity_table, ghost_cost, nms_rows, panel};

#[test]
fn panel_pixels_and_boxes_agree_with_the_requested_size() {
    let p = panel(3, 128, false).unwrap();
    assert_eq!(p.rgba.len(), 128 * 128 * 4);
    assert!(p.rgba.chunks(4).all(|px| px[0] == px[1] && px[1] == px[2] && px[3] == 255));
    assert_eq!(p.boxes.len() % 5, 0);
    for b in p.boxes.chunks(5) {
        assert!(b[0] >= 0.0 && b[0] < 5.0);
        assert!(0.0 <= b[1] && b[1] < b[3] && b[3] <= 128.0, "{b:?}");
        assert!(0.0 <= b[2] && b[2] < b[4] && b[4] <= 128.0, "{b:?}");
    }
    assert_eq!(panel(3, 128, false).unwrap().rgba, p.rgba);
}

#[test]
fn nms_rows_keep_exactly_one_box_per_isolated_cluster() {
    // two far-apart same-class clusters of near-identical boxes
    let mk = |cx, conf| Detection {
        class: 1,
        confidence: conf,
        bbox: BBox::new(cx, 50.0, 20.0, 20.0),
    };
    let dets = [mk(30.0, 0.9), mk(31.0, 0.8), mk(120.0, 0.7), mk(121.0, 0.95), mk(200.0, 0.1)];
    let rows = nms_rows(&dets, 0.25, 0.45);
    assert_eq!(rows.len(), 4 * 7, "the 0.1 box is below the confidence threshold");
    let kept: Vec<f64> = rows.chunks(7).filter(|r| r[6] == 1.0).map(|r| r[1]).collect();
    assert_eq!(kept, vec![0.9, 0.95]);
}

#[test]
fn kept_candidates_of_one_class_overlap_less_than_the_threshold() {
    let dets = candidates(7, 6, 12, 256.0);
    assert_eq!(dets.len(), 72);
    let rows = nms_rows(&dets, 0.0, 0.45);
    let kept: Vec<(f64, BBox)> = rows
        .chunks(7)
        .filter(|r| r[6] == 1.0)
        .map(|r| (r[0], BBox::from_corners(r[2], r[3], r[4], r[5])))
        .collect();
    assert!(!kept.is_empty() && kept.len() < dets.len());
    for (i, a) in kept.iter().enumerate() {
        for b in &kept[i + 1..] {
            if a.0 == b.0 {
                assert!(iou(&a.1, &b.1) <= 0.45 + 1e-9);
            }
        }
    }
}

#[test]
fn ghost_cost_is_roughly_one_over_ratio_of_the_plain_conv() {
    let [gp, cp, gm, cm] = ghost_cost(64, 128, 2, 3, 3, 40).unwrap();
    assert_eq!(cp, (64 * 128 * 9) as f64);
    assert_eq!(gp, (64 * 9 * 64 + 9 * 64) as f64);
    assert!((gm / cm - gp / cp).abs() < 1e-12);
    assert!(ghost_cost(4, 8, 1, 3, 3, 8).is_err());
}

#[test]
fn complexity_table_lists_every_variant() {
    let t = complexity_table(320).unwrap();
    let rows: Vec<&str> = t.lines().collect();
    assert_eq!(rows[0], "variant,params,modules,GFLOPs");
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["yolov5s", "yolov5-1", "yolov5-2", "gbh"]);
}
