use std::fs;
use std::path::{Path, PathBuf};

use super::DatasetIndex;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Side length every image is resized to.
pub const IMAGE_SIZE: usize = 84;

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    paths.sort();
    Ok(paths)
}

/// Indexes `root/<class>/<image>` with classes and files in name order.
pub fn index_image_folder(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::format(root, "dataset root not found or not a directory"));
    }
    let mut classes = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| Error::format(&dir, "unnamed class directory"))?;
        let files: Vec<PathBuf> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        if files.is_empty() {
            return Err(Error::format(&dir, "empty class"));
        }
        for f in &files {
            fs::File::open(f).map_err(|e| Error::io(f, e))?;
        }
        classes.push((label, files));
    }
    if classes.is_empty() {
        return Err(Error::format(root, "no class directories"));
    }
    DatasetIndex::from_images(classes)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
///
/// `src` is `height x width x channels` row-major; returns the same layout
/// at the target size, in the source value range.
pub fn resize_bilinear(src: &[f32], height: usize, width: usize, channels: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(src.len(), height * width * channels);
    let taps = |out: usize, size: usize| -> Vec<(usize, usize, f32)> {
        let scale = size as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (size - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(size - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let rows = taps(out_h, height);
    let cols = taps(out_w, width);
    let px = |y: usize, x: usize, c: usize| src[(y * width + x) * channels + c];
    let mut out = Vec::with_capacity(out_h * out_w * channels);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            for c in 0..channels {
                let top = px(y0, x0, c) * (1.0 - fx) + px(y0, x1, c) * fx;
                let bottom = px(y1, x0, c) * (1.0 - fx) + px(y1, x1, c) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Decodes a PNG or JPEG file into an `84 x 84 x 3` tensor with values in
/// `[0, 1]`. Grayscale is replicated across channels, alpha is dropped.
pub fn decode_and_resize(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_owned(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f32> = img.into_raw().into_iter().map(f32::from).collect();
    let resized = resize_bilinear(&raw, h, w, 3, IMAGE_SIZE, IMAGE_SIZE);
    Tensor::new([IMAGE_SIZE, IMAGE_SIZE, 3], resized.into_iter().map(|v| v / 255.0).collect())
}
