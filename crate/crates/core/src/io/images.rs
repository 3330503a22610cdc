//! PNG / PPM / PGM reading and writing.

use std::fs;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::{ColorImage, Mask};

fn open(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// RGB image scaled to `[0, 1]`, bilinearly resized when `size` differs.
pub fn load_rgb(path: &Path, size: Option<(usize, usize)>) -> Result<ColorImage> {
    let mut rgb = open(path)?.to_rgb32f();
    if let Some((h, w)) = size {
        if (rgb.height() as usize, rgb.width() as usize) != (h, w) {
            rgb = imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
        }
    }
    let (w, h) = rgb.dimensions();
    Ok(ColorImage::from_shape_fn((h as usize, w as usize, 3), |(r, c, ch)| {
        (rgb.get_pixel(c as u32, r as u32)[ch] as f64).clamp(0.0, 1.0)
    }))
}

/// Grayscale mask thresholded at 0.5, nearest-neighbour resized.
pub fn load_mask(path: &Path, size: Option<(usize, usize)>) -> Result<Mask> {
    let mut gray = open(path)?.to_luma32f();
    if let Some((h, w)) = size {
        if (gray.height() as usize, gray.width() as usize) != (h, w) {
            gray = imageops::resize(&gray, w as u32, h as u32, FilterType::Nearest);
        }
    }
    let (w, h) = gray.dimensions();
    Ok(Mask::from_shape_fn((h as usize, w as usize), |(r, c)| {
        gray.get_pixel(c as u32, r as u32)[0] >= 0.5
    }))
}

/// Grayscale map scaled to `[0, 1]`.
pub fn load_map(path: &Path) -> Result<Array2<f64>> {
    let gray = open(path)?.to_luma32f();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        gray.get_pixel(c as u32, r as u32)[0] as f64
    }))
}

fn is_pnm(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

fn save(path: &Path, img: DynamicImage) -> Result<()> {
    let format = if is_pnm(path) {
        image::ImageFormat::Pnm
    } else {
        image::ImageFormat::Png
    };
    img.save_with_format(path, format).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// 8-bit RGB, PNG unless the extension is `.ppm`.
pub fn save_rgb(path: &Path, image: &ColorImage) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::invalid(format!("expected 3 channels, got {c}")));
    }
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|ch| {
            (image[[y as usize, x as usize, ch]].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    save(path, DynamicImage::ImageRgb8(buf))
}

/// Values in `[0, 1]` written as 16-bit grayscale, PNG unless the extension is `.pgm`.
pub fn save_map16(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    save(path, DynamicImage::ImageLuma16(buf))
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask[[y as usize, x as usize]] { 255u8 } else { 0 }])
    });
    save(path, DynamicImage::ImageLuma8(buf))
}
