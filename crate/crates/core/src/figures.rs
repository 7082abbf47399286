//! Per-slice overlay images: the image in grayscale, the ground-truth
//! contour in red and the predicted contour in green (yellow where they
//! coincide).

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;

use crate::volume::Volume;

pub const TRUTH_RGB: [u8; 3] = [255, 0, 0];
pub const PRED_RGB: [u8; 3] = [0, 255, 0];
pub const BOTH_RGB: [u8; 3] = [255, 255, 0];

/// Foreground pixels with a 4-neighbour outside the mask (or the image).
pub fn contour(mask: ArrayView2<f32>) -> Vec<bool> {
    let (h, w) = mask.dim();
    let on = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[[y as usize, x as usize]] > 0.5;
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// RGB8 pixels of one overlay, row-major.
pub fn overlay_rgb(image: ArrayView2<f32>, truth: ArrayView2<f32>, pred: ArrayView2<f32>) -> Vec<u8> {
    let (lo, hi) = image.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let t = contour(truth);
    let p = contour(pred);
    let mut rgb = Vec::with_capacity(image.len() * 3);
    for (i, &v) in image.iter().enumerate() {
        let px = match (t[i], p[i]) {
            (true, true) => BOTH_RGB,
            (true, false) => TRUTH_RGB,
            (false, true) => PRED_RGB,
            (false, false) => {
                let g = ((v - lo) * scale).round().clamp(0.0, 255.0) as u8;
                [g, g, g]
            }
        };
        rgb.extend_from_slice(&px);
    }
    rgb
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> std::io::Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(std::io::Error::other)?;
    writer.write_image_data(rgb).map_err(std::io::Error::other)?;
    writer.finish().map_err(std::io::Error::other)
}

/// One PNG per slice whose ground truth is non-empty, named
/// `<case_id>_z<index>.png`. Returns the written paths.
pub fn write_case_overlays(dir: &Path, case_id: &str, image: &Volume, truth: &Volume, pred: &Volume) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for z in 0..image.depth() {
        let t = truth.slice(z);
        if !t.iter().any(|&v| v > 0.5) {
            continue;
        }
        let rgb = overlay_rgb(image.slice(z), t, pred.slice(z));
        let path = dir.join(format!("{case_id}_z{z:03}.png"));
        write_png(&path, image.width(), image.height(), &rgb)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn contour_of_square_is_its_rim() {
        let m = Array2::from_shape_fn((6, 6), |(y, x)| ((1..5).contains(&y) && (1..5).contains(&x)) as u8 as f32);
        let c = contour(m.view());
        assert_eq!(c.iter().filter(|&&b| b).count(), 12);
        assert!(!c[2 * 6 + 2]);
    }

    #[test]
    fn colors() {
        let img = Array2::from_shape_fn((4, 4), |(y, _)| y as f32);
        let truth = Array2::from_shape_fn((4, 4), |(_, x)| (x == 0) as u8 as f32);
        let pred = Array2::from_shape_fn((4, 4), |(y, x)| (x == 0 && y < 2 || x == 3) as u8 as f32);
        let rgb = overlay_rgb(img.view(), truth.view(), pred.view());
        assert_eq!(&rgb[0..3], &BOTH_RGB);
        assert_eq!(&rgb[(2 * 4) * 3..(2 * 4) * 3 + 3], &TRUTH_RGB);
        assert_eq!(&rgb[3 * 3..3 * 3 + 3], &PRED_RGB);
        assert_eq!(&rgb[(3 * 4 + 1) * 3..(3 * 4 + 1) * 3 + 3], &[255, 255, 255]);
    }
}
