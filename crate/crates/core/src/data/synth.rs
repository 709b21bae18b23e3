use image::{GrayImage, Luma};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{AnnotatedImage, BLACK_BORDER, BROKEN, CLASSES, HOT_SPOT, NO_ELECTRICITY, SCRATCH};
use crate::detect::{iou, BBox, GroundTruth};
use crate::error::{Error, Result};

/// Largest IoU allowed between two generated defects.
pub const MAX_DEFECT_IOU: f64 = 0.3;
/// Placement attempts per defect before generation fails.
pub const PLACEMENT_ATTEMPTS: usize = 200;
/// No generated defect is thinner than this, whatever the scale.
pub const MIN_DEFECT_EXTENT: u32 = 3;

/// Nominal defect size ranges `([w_lo, w_hi], [h_lo, h_hi])` in pixels of a
/// 600-pixel crop, by class id.
pub const DEFECT_SIZE_RANGES: [([f64; 2], [f64; 2]); 5] = [
    ([84.0, 124.0], [170.0, 250.0]),  // broken
    ([122.0, 182.0], [170.0, 250.0]), // hot_spot
    ([3.0, 6.0], [30.0, 44.0]),       // black_border
    ([3.0, 6.0], [24.0, 40.0]),       // scratch
    ([300.0, 412.0], [400.0, 556.0]), // no_electricity
];

/// How many defects of each class to draw, and a size multiplier applied
/// to the nominal ranges (1.0 = 600-pixel crop statistics).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DefectSpec {
    pub counts: [usize; 5],
    pub scale: f64,
}

impl DefectSpec {
    pub fn none() -> Self {
        Self {
            counts: [0; 5],
            scale: 1.0,
        }
    }

    pub fn only(class: usize, n: usize) -> Self {
        let mut s = Self::none();
        s.counts[class] = n;
        s
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Independent generator for image `index` of a corpus seeded with `seed`.
pub fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn background<R: Rng>(rng: &mut R, size: u32) -> GrayImage {
    let cell = (size / 6).max(8);
    let base: i32 = rng.gen_range(105..=135);
    let mut img = GrayImage::new(size, size);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let (cx, cy) = (x % cell, y % cell);
        let mut v = base + rng.gen_range(-6..=6);
        if cx < 2 || cy < 2 {
            v = 70 + rng.gen_range(-4..=4); // gap between cells
        } else if cx == cell / 3 || cx == 2 * cell / 3 {
            v = base + 25; // busbar
        }
        *p = Luma([v.clamp(0, 255) as u8]);
    }
    img
}

/// Painted pixels of one primitive, as a mask over `[x0, x0 + w) x [y0, y0 + h)`.
struct Stamp {
    x0: u32,
    y0: u32,
    w: u32,
    h: u32,
    mask: Vec<Option<u8>>,
}

impl Stamp {
    fn bbox(&self) -> BBox {
        let (mut x1, mut y1, mut x2, mut y2) = (u32::MAX, u32::MAX, 0, 0);
        for j in 0..self.h {
            for i in 0..self.w {
                if self.mask[(j * self.w + i) as usize].is_some() {
                    x1 = x1.min(i);
                    y1 = y1.min(j);
                    x2 = x2.max(i + 1);
                    y2 = y2.max(j + 1);
                }
            }
        }
        BBox::from_corners(
            (self.x0 + x1) as f64,
            (self.y0 + y1) as f64,
            (self.x0 + x2) as f64,
            (self.y0 + y2) as f64,
        )
    }

    fn paint(&self, img: &mut GrayImage) {
        for j in 0..self.h {
            for i in 0..self.w {
                if let Some(v) = self.mask[(j * self.w + i) as usize] {
                    img.put_pixel(self.x0 + i, self.y0 + j, Luma([v]));
                }
            }
        }
    }
}

fn primitive<R: Rng>(rng: &mut R, class: usize, w: u32, h: u32) -> Vec<Option<u8>> {
    let n = (w * h) as usize;
    let mut mask = vec![None; n];
    let (wf, hf) = (w as f64, h as f64);
    match class {
        SCRATCH => {
            for m in mask.iter_mut() {
                *m = Some(rng.gen_range(225..=250));
            }
        }
        BLACK_BORDER => {
            for m in mask.iter_mut() {
                *m = Some(rng.gen_range(10..=30));
            }
        }
        HOT_SPOT => {
            // filled ellipse, brightest at the centre; the middle row and
            // column span the full extent so the box is exact
            for j in 0..h {
                for i in 0..w {
                    let dx = (i as f64 + 0.5 - wf / 2.0) / (wf / 2.0);
                    let dy = (j as f64 + 0.5 - hf / 2.0) / (hf / 2.0);
                    let r2 = dx * dx + dy * dy;
                    if r2 <= 1.0 || i == w / 2 || j == h / 2 {
                        mask[(j * w + i) as usize] = Some((235.0 - 45.0 * r2.min(1.0)) as u8);
                    }
                }
            }
        }
        BROKEN => {
            // dark region with jagged left/right edges; at least one row
            // reaches each side
            let full = rng.gen_range(0..h);
            for j in 0..h {
                let (l, r) = if j == full {
                    (0, w)
                } else {
                    let l = rng.gen_range(0..=w / 4);
                    (l, rng.gen_range((3 * w / 4).max(l + 1)..=w))
                };
                for i in l..r {
                    mask[(j * w + i) as usize] = Some(rng.gen_range(35..=60));
                }
            }
        }
        NO_ELECTRICITY => {
            for m in mask.iter_mut() {
                *m = Some(rng.gen_range(40..=52));
            }
        }
        _ => unreachable!("class id checked by caller"),
    }
    mask
}

fn sample_extent<R: Rng>(rng: &mut R, range: [f64; 2], scale: f64, limit: u32) -> u32 {
    let v = rng.gen_range(range[0]..=range[1]) * scale;
    (v.round() as u32).max(MIN_DEFECT_EXTENT).min(limit)
}

/// Synthetic `size x size` grayscale panel crop: cell grid with busbars and
/// noise, plus the requested defects as class-characteristic primitives.
/// Boxes are the exact bounds of the painted pixels. Larger classes are
/// placed first; a defect that cannot be placed with IoU <= 0.3 against
/// those already placed is a generation error.
pub fn synth_panel<R: Rng>(rng: &mut R, size: u32, spec: &DefectSpec) -> Result<AnnotatedImage> {
    if size < 16 || !(spec.scale > 0.0 && spec.scale.is_finite()) {
        return Err(Error::Generation(format!(
            "panel size {size} / scale {} not usable",
            spec.scale
        )));
    }
    let mut image = background(rng, size);
    let mut boxes: Vec<GroundTruth> = Vec::new();
    let order = [NO_ELECTRICITY, HOT_SPOT, BROKEN, BLACK_BORDER, SCRATCH];
    for class in order {
        for _ in 0..spec.counts[class] {
            let (wr, hr) = DEFECT_SIZE_RANGES[class];
            let w = sample_extent(rng, wr, spec.scale, size);
            let h = sample_extent(rng, hr, spec.scale, size);
            let mut placed = None;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let x0 = rng.gen_range(0..=size - w);
                let y0 = rng.gen_range(0..=size - h);
                let b = BBox::from_corners(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
                if boxes.iter().all(|g| iou(&g.bbox, &b) <= MAX_DEFECT_IOU) {
                    placed = Some((x0, y0));
                    break;
                }
            }
            let (x0, y0) = placed.ok_or_else(|| {
                Error::Generation(format!(
                    "cannot place a {w}x{h} {} on a {size} panel with {} defects",
                    CLASSES[class],
                    boxes.len()
                ))
            })?;
            let stamp = Stamp {
                x0,
                y0,
                w,
                h,
                mask: primitive(rng, class, w, h),
            };
            stamp.paint(&mut image);
            boxes.push(GroundTruth {
                class,
                bbox: stamp.bbox(),
            });
        }
    }
    Ok(AnnotatedImage {
        id: String::new(),
        image,
        boxes,
    })
}
