//! Raster helpers for thumbnails and explanation panels.

use image::{imageops, Rgb, RgbImage};

use crate::data::to_rgb8;
use crate::grid::Grid;
use crate::model::InputImage;

pub const HIGHLIGHT: Rgb<u8> = Rgb([255, 220, 0]);

/// Crop of `[x, y, w, h]`, clipped to the image.
pub fn crop(img: &RgbImage, bbox: [usize; 4]) -> RgbImage {
    let [x, y, w, h] = clip(bbox, img.width() as usize, img.height() as usize);
    imageops::crop_imm(img, x as u32, y as u32, w.max(1) as u32, h.max(1) as u32).to_image()
}

fn clip(bbox: [usize; 4], width: usize, height: usize) -> [usize; 4] {
    let [x, y, w, h] = bbox;
    let x = x.min(width.saturating_sub(1));
    let y = y.min(height.saturating_sub(1));
    [x, y, w.min(width - x), h.min(height - y)]
}

pub fn draw_rect(img: &mut RgbImage, bbox: [usize; 4], thickness: usize, color: Rgb<u8>) {
    let (width, height) = (img.width() as usize, img.height() as usize);
    let [x, y, w, h] = clip(bbox, width, height);
    if w == 0 || h == 0 {
        return;
    }
    for t in 0..thickness.min(w.div_ceil(2)).min(h.div_ceil(2)) {
        let (x0, y0, x1, y1) = (x + t, y + t, x + w - 1 - t, y + h - 1 - t);
        for xx in x0..=x1 {
            img.put_pixel(xx as u32, y0 as u32, color);
            img.put_pixel(xx as u32, y1 as u32, color);
        }
        for yy in y0..=y1 {
            img.put_pixel(x0 as u32, yy as u32, color);
            img.put_pixel(x1 as u32, yy as u32, color);
        }
    }
}

/// Patch thumbnail: the bbox crop scaled to `size`.
pub fn patch_thumbnail(image: &InputImage, bbox: [usize; 4], size: u32) -> RgbImage {
    let patch = crop(&to_rgb8(image), bbox);
    imageops::resize(&patch, size, size, imageops::FilterType::Nearest)
}

/// Context thumbnail: the whole image with the bbox outlined.
pub fn context_thumbnail(image: &InputImage, bbox: [usize; 4]) -> RgbImage {
    let mut img = to_rgb8(image);
    draw_rect(&mut img, bbox, 2, HIGHLIGHT);
    img
}

/// Blends a red heat map (values normalized to [0, 1] by range) over the image.
pub fn heat_overlay(image: &InputImage, pam: &Grid) -> RgbImage {
    let mut img = to_rgb8(image);
    let (lo, hi) = (pam.min(), pam.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (x, y, px) in img.enumerate_pixels_mut() {
        let t = ((pam.get(y as usize, x as usize) - lo) / span).clamp(0.0, 1.0) * 0.6;
        let heat = [255.0, 40.0, 0.0];
        for c in 0..3 {
            px[c] = (px[c] as f64 * (1.0 - t) + heat[c] * t).round() as u8;
        }
    }
    img
}

// 3x5 glyphs, one row per u8 (low three bits, MSB on the left).
fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
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
        '-' => [0, 0, 7, 0, 0],
        '+' => [0, 2, 7, 2, 0],
        'x' => [0, 5, 2, 5, 0],
        '=' => [0, 7, 0, 7, 0],
        ' ' => [0; 5],
        _ => return None,
    })
}

/// Draws digits and `.-+x= ` at the given pixel scale; other chars are skipped.
pub fn draw_text(img: &mut RgbImage, text: &str, x: u32, y: u32, scale: u32, color: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        let Some(rows) = glyph(ch) else { continue };
        for (r, bits) in rows.iter().enumerate() {
            for c in 0..3u32 {
                if bits & (4 >> c) != 0 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            let px = cx + c * scale + dx;
                            let py = y + r as u32 * scale + dy;
                            if px < img.width() && py < img.height() {
                                img.put_pixel(px, py, color);
                            }
                        }
                    }
                }
            }
        }
        cx += 4 * scale;
    }
}
