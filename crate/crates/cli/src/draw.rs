//! Box and label rendering for annotated detection output.

use gbh::data::CLASSES;
use gbh::detect::Detection;
use image::{GrayImage, Rgb, RgbImage};

/// One colour per defect class.
const PALETTE: [[u8; 3]; 5] = [[230, 60, 60], [255, 170, 0], [60, 120, 255], [40, 200, 90], [200, 80, 220]];

/// 3x5 glyphs, rows top to bottom, bit 2 = left column.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '_' => [0, 0, 0, 0, 7],
        'a' => [2, 5, 7, 5, 5],
        'b' => [6, 5, 6, 5, 6],
        'c' => [7, 4, 4, 4, 7],
        'd' => [6, 5, 5, 5, 6],
        'e' => [7, 4, 6, 4, 7],
        'h' => [5, 5, 7, 5, 5],
        'i' => [7, 2, 2, 2, 7],
        'k' => [5, 5, 6, 5, 5],
        'l' => [4, 4, 4, 4, 7],
        'n' => [6, 5, 5, 5, 5],
        'o' => [7, 5, 5, 5, 7],
        'p' => [7, 5, 7, 4, 4],
        'r' => [6, 5, 6, 5, 5],
        's' => [7, 4, 7, 1, 7],
        't' => [7, 2, 2, 2, 2],
        'y' => [5, 5, 2, 2, 2],
        _ => [0; 5],
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn text(img: &mut RgbImage, x: i64, y: i64, s: &str, c: Rgb<u8>) {
    for (k, ch) in s.chars().enumerate() {
        let g = glyph(ch);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits >> (2 - col) & 1 == 1 {
                    put(img, x + 4 * k as i64 + col, y + row as i64, c);
                }
            }
        }
    }
}

/// Colour copy of `gray` with each detection's box and a `class conf` label.
pub fn annotate(gray: &GrayImage, dets: &[Detection]) -> RgbImage {
    let mut img = RgbImage::from_fn(gray.width(), gray.height(), |x, y| {
        let v = gray.get_pixel(x, y).0[0];
        Rgb([v, v, v])
    });
    for d in dets {
        let c = Rgb(PALETTE[d.class % PALETTE.len()]);
        let [x1, y1, x2, y2] = d.bbox.corners().map(|v| v.round() as i64);
        for x in x1..=x2 {
            put(&mut img, x, y1, c);
            put(&mut img, x, y2, c);
        }
        for y in y1..=y2 {
            put(&mut img, x1, y, c);
            put(&mut img, x2, y, c);
        }
        let name = CLASSES.get(d.class).copied().unwrap_or("?");
        let label = format!("{name} {:.2}", d.confidence);
        let ly = if y1 >= 7 { y1 - 7 } else { y2 + 2 };
        text(&mut img, x1, ly, &label, c);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use gbh::detect::BBox;

    #[test]
    fn box_outline_is_drawn_in_class_colour() {
        let gray = GrayImage::from_pixel(40, 40, image::Luma([100]));
        let det = Detection {
            class: 3,
            confidence: 0.9,
            bbox: BBox::from_corners(10.0, 10.0, 20.0, 30.0),
        };
        let img = annotate(&gray, &[det]);
        assert_eq!(img.get_pixel(10, 15).0, PALETTE[3]);
        assert_eq!(img.get_pixel(15, 30).0, PALETTE[3]);
        assert_eq!(img.get_pixel(15, 15).0, [100, 100, 100]);
    }

    #[test]
    fn every_class_name_has_glyphs() {
        for name in CLASSES {
            assert!(name.chars().all(|c| glyph(c) != [0; 5]), "{name}");
        }
    }
}
