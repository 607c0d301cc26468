use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array2, Array3};

use crate::{Error, Result};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an `(H, W, 3)` image in `[0, 1]` as 8-bit PNG.
pub fn save_rgb_png(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (r, col) = (y as usize, x as usize);
        Rgb([
            to_u8(image[[r, col, 0]]),
            to_u8(image[[r, col, 1]]),
            to_u8(image[[r, col, 2]]),
        ])
    });
    buf.save(path)?;
    Ok(())
}

/// Writes a single-channel map in `[0, 1]` as 8-bit grayscale PNG.
pub fn save_gray_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(map[[y as usize, x as usize]])]));
    buf.save(path)?;
    Ok(())
}

/// Decoded image with channels in `[0, 1]`; alpha present only for sources that carry it.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedImage {
    pub rgb: Array3<f64>,
    pub alpha: Option<Array2<f64>>,
}

pub fn load_image(path: &Path) -> Result<LoadedImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let img = image::open(path)?;
    let has_alpha = img.color().has_alpha();
    let rgba = img.to_rgba32f();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let rgb = Array3::from_shape_fn((h, w, 3), |(r, c, k)| rgba.get_pixel(c as u32, r as u32)[k] as f64);
    let alpha = has_alpha.then(|| Array2::from_shape_fn((h, w), |(r, c)| rgba.get_pixel(c as u32, r as u32)[3] as f64));
    Ok(LoadedImage { rgb, alpha })
}

/// Grayscale in `[0, 1]`, from any decodable bit depth.
pub fn load_gray(path: &Path) -> Result<Array2<f64>> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let img = image::open(path)?.to_luma32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(r, c)| img.get_pixel(c as u32, r as u32)[0] as f64))
}
