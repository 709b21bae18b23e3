//! PV defect data: VOC annotations, crop preprocessing, letterbox and mosaic
//! augmentation, k-means anchors, a synthetic panel generator and the
//! on-disk dataset layout.

mod anchors;
mod augment;
mod crop;
mod dataset;
mod synth;
mod voc;

pub use anchors::*;
pub use augment::*;
pub use crop::*;
pub use dataset::*;
pub use synth::*;
pub use voc::*;

use image::GrayImage;

use crate::detect::GroundTruth;
use crate::error::{spec_err, Result};

/// The five defect classes, in class-id order.
pub const CLASSES: [&str; 5] = ["broken", "hot_spot", "black_border", "scratch", "no_electricity"];

pub const BROKEN: usize = 0;
pub const HOT_SPOT: usize = 1;
pub const BLACK_BORDER: usize = 2;
pub const SCRATCH: usize = 3;
pub const NO_ELECTRICITY: usize = 4;

pub fn class_id(name: &str) -> Option<usize> {
    CLASSES.iter().position(|c| *c == name)
}

/// A grayscale image with its labelled boxes (pixel coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub image: GrayImage,
    pub boxes: Vec<GroundTruth>,
}

impl AnnotatedImage {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    /// Every box has positive extent and lies inside the image.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width() as f64, self.height() as f64);
        for (i, g) in self.boxes.iter().enumerate() {
            let [x1, y1, x2, y2] = g.bbox.corners();
            let tol = 1e-6;
            if !(g.bbox.w > 0.0 && g.bbox.h > 0.0)
                || x1 < -tol
                || y1 < -tol
                || x2 > w + tol
                || y2 > h + tol
                || g.class >= CLASSES.len()
            {
                return Err(spec_err(format!(
                    "{}: box {i} {:?} (class {}) is not inside the {w}x{h} image",
                    self.id, g.bbox, g.class
                )));
            }
        }
        Ok(())
    }
}
