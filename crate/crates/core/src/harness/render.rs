//! PNG slice rendering: FLAIR in grey next to colour-coded label maps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Background, NCR, ED, ET.
pub const CLASS_COLORS: [[u8; 3]; 4] = [[68, 1, 84], [59, 82, 139], [33, 145, 140], [253, 231, 37]];

pub fn class_color(label: u8) -> [u8; 3] {
    match label {
        1 => CLASS_COLORS[1],
        2 => CLASS_COLORS[2],
        4 => CLASS_COLORS[3],
        _ => CLASS_COLORS[0],
    }
}

/// Row-major RGB raster.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::format("png", path, e))?;
        w.write_image_data(&self.pixels).map_err(|e| Error::format("png", path, e))
    }
}

/// Axial index (last axis) with the most tumour voxels, or the middle
/// slice when the volume is empty.
pub fn busiest_slice(label: &Tensor<u8>) -> usize {
    let [h, w, d] = label.spatial();
    let mut counts = vec![0usize; d];
    for i in 0..h * w {
        for (z, c) in counts.iter_mut().enumerate() {
            *c += (label.data()[i * d + z] != 0) as usize;
        }
    }
    match counts.iter().enumerate().max_by_key(|(z, c)| (**c, std::cmp::Reverse(*z))) {
        Some((z, c)) if *c > 0 => z,
        _ => d / 2,
    }
}

/// Panels side by side: grey intensity, then each label map. Image rows
/// follow the first axis, columns the second, at axial index `z`.
pub fn render_slice(intensity: &Tensor<f32>, labels: &[&Tensor<u8>], z: usize) -> Result<RgbImage> {
    let [h, w, d] = intensity.spatial();
    if z >= d {
        return Err(Error::Invalid(format!("slice {z} outside depth {d}")));
    }
    if let Some(bad) = labels.iter().find(|l| l.spatial() != [h, w, d]) {
        return Err(Error::ShapeMismatch(format!(
            "label {:?} vs intensity {:?}",
            bad.shape(),
            intensity.shape()
        )));
    }
    let at = |x: usize, y: usize| (x * w + y) * d + z;
    let (lo, hi) = (0..h * w)
        .map(|i| intensity.data()[at(i / w, i % w)])
        .filter(|v| v.is_finite())
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(w * (1 + labels.len()), h);
    for x in 0..h {
        for y in 0..w {
            let v = intensity.data()[at(x, y)];
            let g = if v.is_finite() { ((v - lo) / span * 255.0).round() as u8 } else { 0 };
            img.set(y, x, [g; 3]);
            for (k, l) in labels.iter().enumerate() {
                img.set((k + 1) * w + y, x, class_color(l.data()[at(x, y)]));
            }
        }
    }
    Ok(img)
}
