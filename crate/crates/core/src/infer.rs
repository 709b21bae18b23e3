//! Batched inference on arbitrary-size images and model evaluation.

use image::GrayImage;

use crate::data::{images_to_tensor, letterbox, AnnotatedImage};
use crate::detect::{postprocess, BBox, Detection};
use crate::error::Result;
use crate::eval::{Evaluator, EvalReport};
use crate::model::Model;
use crate::nn::{Mode, Session};

/// Default confidence and NMS IoU thresholds for detection output.
pub const CONF_THRESHOLD: f64 = 0.25;
pub const NMS_IOU: f64 = 0.45;
/// Confidence floor used when ranking detections for AP.
pub const MAP_CONF_THRESHOLD: f64 = 0.001;

const INFER_BATCH: usize = 8;

/// Raw head outputs for a batch of images already at the model input size.
pub fn forward_heads(model: &Model, images: &[&GrayImage]) -> Result<Vec<crate::tensor::Tensor<f32>>> {
    let x = images_to_tensor(images)?;
    let mut s = Session::new(&model.store, Mode::Eval).frozen();
    let xv = s.input(x, false);
    let heads = model.forward(&mut s, xv)?;
    Ok(heads.into_iter().map(|h| s.tape.value(h).clone()).collect())
}

/// Detections per image in original pixel coordinates: letterbox to the
/// model input, decode + NMS, map back and clip to the image.
pub fn predict(model: &Model, images: &[&GrayImage], conf: f64, nms_iou: f64) -> Result<Vec<Vec<Detection>>> {
    let size = model.variant.input_size as u32;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let boxed = chunk.iter().map(|img| letterbox(img, size)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&GrayImage> = boxed.iter().map(|(i, _)| i).collect();
        let heads = forward_heads(model, &refs)?;
        let dets = postprocess(&heads, &model.variant.anchors, model.variant.head_strides(), conf, nms_iou)?;
        for ((d, (_, lb)), img) in dets.into_iter().zip(&boxed).zip(chunk) {
            let (w, h) = (img.width() as f64, img.height() as f64);
            out.push(
                d.into_iter()
                    .filter_map(|mut det| {
                        let [x1, y1, x2, y2] = lb.inverse(&det.bbox).corners();
                        let (x1, y1, x2, y2) = (x1.max(0.0), y1.max(0.0), x2.min(w), y2.min(h));
                        (x2 > x1 && y2 > y1).then(|| {
                            det.bbox = BBox::from_corners(x1, y1, x2, y2);
                            det
                        })
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Evaluate `model` on annotated samples. AP ranks every detection above
/// [`MAP_CONF_THRESHOLD`]; counts, precision and recall use `conf`.
pub fn evaluate_model(model: &Model, samples: &[AnnotatedImage], conf: f64, nms_iou: f64, match_iou: f64) -> Result<EvalReport> {
    let images: Vec<&GrayImage> = samples.iter().map(|s| &s.image).collect();
    let dets = predict(model, &images, MAP_CONF_THRESHOLD.min(conf), nms_iou)?;
    let mut e = Evaluator::new(model.variant.num_classes, match_iou).with_operating_point(conf);
    for (d, s) in dets.iter().zip(samples) {
        e.add_image(d, &s.boxes);
    }
    Ok(e.report())
}
