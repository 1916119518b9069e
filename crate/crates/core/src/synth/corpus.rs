//! User-supplied image corpora, resized (bilinear) and center-cropped to the
//! target resolution.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;

use crate::error::{Error, Result};
use crate::image::LayerImage;

const EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "webp"];

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no images in {}", dir.display())));
    }
    Ok(files)
}

/// Scales so the image covers `(w, h)` and crops the center.
pub fn fit(img: &DynamicImage, w: usize, h: usize) -> DynamicImage {
    let (sw, sh) = (img.width() as f64, img.height() as f64);
    let scale = (w as f64 / sw).max(h as f64 / sh);
    let rw = ((sw * scale).round() as u32).max(w as u32);
    let rh = ((sh * scale).round() as u32).max(h as u32);
    let resized = img.resize_exact(rw, rh, FilterType::Triangle);
    let x = (rw - w as u32) / 2;
    let y = (rh - h as u32) / 2;
    resized.crop_imm(x, y, w as u32, h as u32)
}

pub fn load_fitted(path: &Path, w: usize, h: usize, channels: usize) -> Result<LayerImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    LayerImage::from_dynamic(&fit(&img, w, h), channels)
}
