use image::imageops::{self, FilterType};
use image::{GrayImage, Luma};
use rand::Rng;

use super::crop::clip_boxes;
use super::AnnotatedImage;
use crate::detect::{BBox, GroundTruth};
use crate::error::{spec_err, Result};
use crate::tensor::Tensor;

/// Gray value of letterbox and mosaic padding.
pub const PAD_VALUE: u8 = 114;
/// Boxes thinner than this after mosaic clipping are dropped.
pub const MOSAIC_MIN_EXTENT: f64 = 2.0;

/// Affine map from original pixels to letterboxed pixels:
/// `x' = x * scale + pad_x`, `y' = y * scale + pad_y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
}

impl Letterbox {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            pad_x: 0.0,
            pad_y: 0.0,
        }
    }

    pub fn forward(&self, b: &BBox) -> BBox {
        BBox::new(
            b.cx * self.scale + self.pad_x,
            b.cy * self.scale + self.pad_y,
            b.w * self.scale,
            b.h * self.scale,
        )
    }

    pub fn inverse(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.cx - self.pad_x) / self.scale,
            (b.cy - self.pad_y) / self.scale,
            b.w / self.scale,
            b.h / self.scale,
        )
    }
}

fn resize(img: &GrayImage, w: u32, h: u32) -> GrayImage {
    if img.dimensions() == (w, h) {
        img.clone()
    } else {
        imageops::resize(img, w, h, FilterType::Triangle)
    }
}

/// Aspect-preserving resize to fit `target x target`, centred on a
/// [`PAD_VALUE`] canvas.
pub fn letterbox(img: &GrayImage, target: u32) -> Result<(GrayImage, Letterbox)> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 || target == 0 {
        return Err(spec_err(format!("letterbox of a {w}x{h} image to {target}")));
    }
    let scale = (target as f64 / w as f64).min(target as f64 / h as f64);
    let nw = ((w as f64 * scale).round() as u32).clamp(1, target);
    let nh = ((h as f64 * scale).round() as u32).clamp(1, target);
    let (px, py) = ((target - nw) / 2, (target - nh) / 2);
    let mut canvas = GrayImage::from_pixel(target, target, Luma([PAD_VALUE]));
    imageops::replace(&mut canvas, &resize(img, nw, nh), px as i64, py as i64);
    Ok((
        canvas,
        Letterbox {
            scale,
            pad_x: px as f64,
            pad_y: py as f64,
        },
    ))
}

pub fn letterbox_annotated(a: &AnnotatedImage, target: u32) -> Result<(AnnotatedImage, Letterbox)> {
    let (image, lb) = letterbox(&a.image, target)?;
    let t = target as f64;
    let boxes: Vec<GroundTruth> = a
        .boxes
        .iter()
        .map(|g| GroundTruth {
            class: g.class,
            bbox: lb.forward(&g.bbox),
        })
        .collect();
    let boxes = clip_boxes(&boxes, 0.0, 0.0, t, t);
    Ok((
        AnnotatedImage {
            id: a.id.clone(),
            image,
            boxes,
        },
        lb,
    ))
}

/// Canvas rectangles `[x1, y1, x2, y2]` of the four mosaic quadrants
/// (top-left, top-right, bottom-left, bottom-right) for joint `(xc, yc)`.
pub fn mosaic_quadrants(xc: u32, yc: u32, size: u32) -> [[u32; 4]; 4] {
    [
        [0, 0, xc, yc],
        [xc, 0, size, yc],
        [0, yc, xc, size],
        [xc, yc, size, size],
    ]
}

/// Four-image mosaic at a given joint. Each image is resized so its longer
/// side equals `size` and placed with its inner corner at the joint; the
/// part inside its quadrant is kept.
pub fn mosaic4_at(images: [&AnnotatedImage; 4], size: u32, xc: u32, yc: u32) -> Result<AnnotatedImage> {
    if size == 0 || xc > size || yc > size {
        return Err(spec_err(format!("mosaic joint ({xc}, {yc}) outside a {size} canvas")));
    }
    let mut canvas = GrayImage::from_pixel(size, size, Luma([PAD_VALUE]));
    let mut boxes = Vec::new();
    let quads = mosaic_quadrants(xc, yc, size);
    for (q, a) in images.iter().enumerate() {
        let (w0, h0) = a.image.dimensions();
        if w0 == 0 || h0 == 0 {
            return Err(spec_err(format!("mosaic input {} is empty", a.id)));
        }
        let r = size as f64 / w0.max(h0) as f64;
        let (w, h) = (
            ((w0 as f64 * r).round() as u32).max(1),
            ((h0 as f64 * r).round() as u32).max(1),
        );
        let img = resize(&a.image, w, h);
        // image origin on the canvas (may be negative)
        let (ox, oy): (i64, i64) = match q {
            0 => (xc as i64 - w as i64, yc as i64 - h as i64),
            1 => (xc as i64, yc as i64 - h as i64),
            2 => (xc as i64 - w as i64, yc as i64),
            _ => (xc as i64, yc as i64),
        };
        let [qx1, qy1, qx2, qy2] = quads[q];
        let x1 = (qx1 as i64).max(ox);
        let y1 = (qy1 as i64).max(oy);
        let x2 = (qx2 as i64).min(ox + w as i64);
        let y2 = (qy2 as i64).min(oy + h as i64);
        if x2 > x1 && y2 > y1 {
            let part = imageops::crop_imm(&img, (x1 - ox) as u32, (y1 - oy) as u32, (x2 - x1) as u32, (y2 - y1) as u32);
            imageops::replace(&mut canvas, &part.to_image(), x1, y1);
        }
        let moved: Vec<GroundTruth> = a
            .boxes
            .iter()
            .map(|g| GroundTruth {
                class: g.class,
                bbox: BBox::new(g.bbox.cx * r + ox as f64, g.bbox.cy * r + oy as f64, g.bbox.w * r, g.bbox.h * r),
            })
            .collect();
        let clipped = clip_boxes(
            &moved,
            qx1 as f64,
            qy1 as f64,
            (qx2 - qx1) as f64,
            (qy2 - qy1) as f64,
        );
        boxes.extend(
            clipped
                .into_iter()
                .filter(|g| g.bbox.w >= MOSAIC_MIN_EXTENT && g.bbox.h >= MOSAIC_MIN_EXTENT)
                .map(|g| GroundTruth {
                    class: g.class,
                    bbox: BBox::new(g.bbox.cx + qx1 as f64, g.bbox.cy + qy1 as f64, g.bbox.w, g.bbox.h),
                }),
        );
    }
    Ok(AnnotatedImage {
        id: format!("mosaic[{}]", images.map(|a| a.id.as_str()).join(",")),
        image: canvas,
        boxes,
    })
}

/// Mosaic with the joint drawn uniformly from the central half of the canvas.
pub fn mosaic4<R: Rng>(images: [&AnnotatedImage; 4], size: u32, rng: &mut R) -> Result<AnnotatedImage> {
    let (lo, hi) = (size / 4, (3 * size / 4).max(size / 4 + 1));
    let xc = rng.gen_range(lo..hi);
    let yc = rng.gen_range(lo..hi);
    mosaic4_at(images, size, xc, yc)
}

/// Stack square grayscale images into `[B, 3, S, S]` in `[0, 1]`, the gray
/// channel replicated three times.
pub fn images_to_tensor(images: &[&GrayImage]) -> Result<Tensor<f32>> {
    let (w, h) = images.first().map_or((0, 0), |i| i.dimensions());
    if images.iter().any(|i| i.dimensions() != (w, h)) {
        return Err(spec_err("batch images differ in size"));
    }
    let plane = (w * h) as usize;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        let gray: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        for _ in 0..3 {
            data.extend_from_slice(&gray);
        }
    }
    Ok(Tensor::new(&[images.len(), 3, h as usize, w as usize], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SCRATCH;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_letterbox_has_no_padding() {
        let (img, lb) = letterbox(&GrayImage::new(600, 600), 960).unwrap();
        assert_eq!(img.dimensions(), (960, 960));
        assert_eq!(lb, Letterbox { scale: 1.6, pad_x: 0.0, pad_y: 0.0 });
    }

    #[test]
    fn wide_letterbox_pads_top_and_bottom() {
        let (img, lb) = letterbox(&GrayImage::from_pixel(600, 300, Luma([7])), 960).unwrap();
        assert_eq!((lb.scale, lb.pad_x, lb.pad_y), (1.6, 0.0, 240.0));
        assert_eq!(img.get_pixel(500, 100).0[0], PAD_VALUE);
        assert_eq!(img.get_pixel(500, 239).0[0], PAD_VALUE);
        assert_eq!(img.get_pixel(500, 240).0[0], 7);
        assert_eq!(img.get_pixel(500, 719).0[0], 7);
        assert_eq!(img.get_pixel(500, 720).0[0], PAD_VALUE);
    }

    #[test]
    fn letterbox_box_round_trip() {
        let lb = letterbox(&GrayImage::new(577, 311), 192).unwrap().1;
        let b = BBox::new(123.25, 77.5, 14.0, 9.75);
        let back = lb.inverse(&lb.forward(&b));
        for (x, y) in [(back.cx, b.cx), (back.cy, b.cy), (back.w, b.w), (back.h, b.h)] {
            assert!((x - y).abs() < 1e-9);
        }
    }

    fn single_box(id: &str) -> AnnotatedImage {
        AnnotatedImage {
            id: id.into(),
            image: GrayImage::from_pixel(600, 600, Luma([50])),
            boxes: vec![GroundTruth {
                class: SCRATCH,
                bbox: BBox::new(300.0, 300.0, 40.0, 40.0),
            }],
        }
    }

    #[test]
    fn centred_mosaic_of_centred_boxes_gives_one_box_per_quadrant() {
        let imgs: Vec<AnnotatedImage> = (0..4).map(|i| single_box(&i.to_string())).collect();
        let m = mosaic4_at([&imgs[0], &imgs[1], &imgs[2], &imgs[3]], 960, 480, 480).unwrap();
        assert_eq!(m.boxes.len(), 4);
        // each image is scaled to 960 with its inner corner at the joint, so
        // the scaled 64x64 box straddles that image's own corner: a 32x32
        // quarter survives at each outer canvas corner
        let mut corners: Vec<[f64; 4]> = m.boxes.iter().map(|g| g.bbox.corners()).collect();
        corners.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(
            corners,
            [
                [0.0, 0.0, 32.0, 32.0],
                [0.0, 928.0, 32.0, 960.0],
                [928.0, 0.0, 960.0, 32.0],
                [928.0, 928.0, 960.0, 960.0]
            ]
        );
    }

    #[test]
    fn quadrants_tile_the_canvas() {
        let q = mosaic_quadrants(480, 480, 960);
        let area: u32 = q.iter().map(|r| (r[2] - r[0]) * (r[3] - r[1])).sum();
        assert_eq!(area, 960 * 960);
    }

    #[test]
    fn random_mosaics_keep_boxes_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut imgs = Vec::new();
        for i in 0..4 {
            let mut a = single_box(&i.to_string());
            a.image = GrayImage::new(600 - 50 * i, 400 + 60 * i);
            a.boxes = (0..6)
                .map(|k| GroundTruth {
                    class: k % 5,
                    bbox: BBox::new(30.0 + 70.0 * k as f64, 20.0 + 50.0 * k as f64, 20.0 + k as f64, 35.0),
                })
                .collect();
            a.validate().unwrap();
            imgs.push(a);
        }
        for _ in 0..50 {
            let m = mosaic4([&imgs[0], &imgs[1], &imgs[2], &imgs[3]], 192, &mut rng).unwrap();
            m.validate().unwrap();
            assert!(m.boxes.iter().all(|g| g.bbox.w >= 2.0 && g.bbox.h >= 2.0));
        }
    }

    #[test]
    fn tensor_replicates_gray() {
        let img = GrayImage::from_fn(2, 2, |x, y| Luma([(x * 2 + y) as u8 * 85]));
        let t = images_to_tensor(&[&img]).unwrap();
        assert_eq!(t.shape(), [1, 3, 2, 2]);
        assert_eq!(&t.data()[0..4], &t.data()[8..12]);
        assert_eq!(t.data()[3], 1.0);
    }
}
