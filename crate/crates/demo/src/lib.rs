//! Browser demo: three small operations of the detector engine exposed to
//! JavaScript. Everything returns flat numeric arrays or plain text so the
//! page needs no serialization library.
//!
//! The plain functions are ordinary Rust and tested natively; the
//! `#[wasm_bindgen]` wrappers only adapt argument types.

use gbh::data::{image_rng, mixed_spec, scratch_heavy_spec, synth_panel, CLASSES};
use gbh::detect::{nms, BBox, Detection};
use gbh::model::{Architecture, Model, ModelVariant};
use gbh::nn::GhostConvSpec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// A rendered synthetic panel: RGBA pixels plus `[class, x1, y1, x2, y2]`
/// rows for each labelled defect.
pub struct Panel {
    pub size: u32,
    pub rgba: Vec<u8>,
    pub boxes: Vec<f64>,
}

pub fn panel(seed: u64, size: u32, scratch_heavy: bool) -> gbh::Result<Panel> {
    let mut rng = image_rng(seed, 0);
    let spec = if scratch_heavy {
        scratch_heavy_spec(&mut rng, 0.32)
    } else {
        mixed_spec(&mut rng, 0.32)
    };
    let sample = synth_panel(&mut rng, size, &spec)?;
    let rgba = sample.image.pixels().flat_map(|p| [p.0[0], p.0[0], p.0[0], 255]).collect();
    let boxes = sample
        .boxes
        .iter()
        .flat_map(|g| {
            let [x1, y1, x2, y2] = g.bbox.corners();
            [g.class as f64, x1, y1, x2, y2]
        })
        .collect();
    Ok(Panel { size, rgba, boxes })
}

/// Overlapping candidate boxes around a few random objects, as a detector
/// head would emit them before suppression.
pub fn candidates(seed: u64, objects: usize, per_object: usize, extent: f64) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(objects * per_object);
    for _ in 0..objects {
        let class = rng.gen_range(0..CLASSES.len());
        let w = rng.gen_range(0.08..0.3) * extent;
        let h = rng.gen_range(0.08..0.3) * extent;
        let cx = rng.gen_range(w / 2.0..extent - w / 2.0);
        let cy = rng.gen_range(h / 2.0..extent - h / 2.0);
        for _ in 0..per_object {
            let j = |rng: &mut ChaCha8Rng, s: f64| rng.gen_range(-0.15..0.15) * s;
            out.push(Detection {
                class,
                confidence: rng.gen_range(0.05..1.0),
                bbox: BBox::new(cx + j(&mut rng, w), cy + j(&mut rng, h), w * rng.gen_range(0.8..1.2), h * rng.gen_range(0.8..1.2)),
            });
        }
    }
    out
}

/// Rows `[class, confidence, x1, y1, x2, y2, kept]` for every candidate with
/// confidence >= `conf`; `kept` is 1 when the box survives class-wise NMS.
pub fn nms_rows(dets: &[Detection], conf: f64, iou: f64) -> Vec<f64> {
    let passing: Vec<Detection> = dets.iter().copied().filter(|d| d.confidence >= conf).collect();
    let kept = nms(&passing, iou);
    passing
        .iter()
        .flat_map(|d| {
            let [x1, y1, x2, y2] = d.bbox.corners();
            let k = kept.contains(d) as u8 as f64;
            [d.class as f64, d.confidence, x1, y1, x2, y2, k]
        })
        .collect()
}

/// `variant,params,modules,GFLOPs` lines for the full-width models at
/// `input_size`.
pub fn complexity_table(input_size: usize) -> gbh::Result<String> {
    let mut out = String::from("variant,params,modules,GFLOPs\n");
    for arch in Architecture::ALL {
        let model = Model::new(ModelVariant::new(arch).with_input_size(input_size), 0)?;
        out.push_str(&format!(
            "{},{},{},{:.2}\n",
            arch.name(),
            model.count_params(),
            model.count_modules(),
            model.count_flops(input_size) as f64 / 1e9
        ));
    }
    Ok(out)
}

/// `[ghost params, conv params, ghost MACs, conv MACs]` for one layer with a
/// `size x size` output.
pub fn ghost_cost(c: usize, n: usize, ratio: usize, k: usize, d: usize, size: usize) -> gbh::Result<[f64; 4]> {
    let spec = GhostConvSpec::new(c, n, ratio, k, d, 1)?;
    Ok([
        spec.param_count() as f64,
        spec.plain_param_count() as f64,
        spec.macs(size, size) as f64,
        spec.plain_macs(size, size) as f64,
    ])
}

fn js_err(e: gbh::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct JsPanel(Panel);

#[wasm_bindgen]
impl JsPanel {
    pub fn size(&self) -> u32 {
        self.0.size
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.0.rgba.clone()
    }

    pub fn boxes(&self) -> Vec<f64> {
        self.0.boxes.clone()
    }
}

#[wasm_bindgen]
pub fn class_names() -> Vec<String> {
    CLASSES.iter().map(|s| s.to_string()).collect()
}

#[wasm_bindgen(js_name = synthPanel)]
pub fn synth_panel_js(seed: u32, size: u32, scratch_heavy: bool) -> Result<JsPanel, JsError> {
    panel(seed as u64, size, scratch_heavy).map(JsPanel).map_err(js_err)
}

#[wasm_bindgen(js_name = nmsDemo)]
pub fn nms_demo_js(seed: u32, objects: usize, per_object: usize, extent: f64, conf: f64, iou: f64) -> Vec<f64> {
    nms_rows(&candidates(seed as u64, objects, per_object, extent), conf, iou)
}

#[wasm_bindgen(js_name = complexityTable)]
pub fn complexity_table_js(input_size: usize) -> Result<String, JsError> {
    complexity_table(input_size).map_err(js_err)
}

#[wasm_bindgen(js_name = ghostCost)]
pub fn ghost_cost_js(c: usize, n: usize, ratio: usize, k: usize, d: usize, size: usize) -> Result<Vec<f64>, JsError> {
    ghost_cost(c, n, ratio, k, d, size).map(|v| v.to_vec()).map_err(js_err)
}
