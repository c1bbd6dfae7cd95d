//! PNG encoding for images, masks, probability maps and overlays.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::domain::{Grid, Mask};
use crate::error::{Error, IoContext, Result};

fn codec(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Codec {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).with_path("creating", parent)?;
        }
    }
    Ok(())
}

/// Quantizes `[0, 1]` values to 16 bits: `round(v * 65535)`.
pub fn quantize_u16(v: f32) -> u16 {
    (f64::from(v).clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub fn write_gray16(path: &Path, grid: &Grid<f32>) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = grid.shape();
    let pixels: Vec<u16> = grid.as_slice().iter().map(|&v| quantize_u16(v)).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, pixels).expect("buffer matches dimensions");
    img.save(path).map_err(codec(path))
}

/// Masks are stored as 8-bit `{0, 255}`.
pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    ensure_parent(path)?;
    let (h, w) = mask.shape();
    let pixels: Vec<u8> = mask.as_slice().iter().map(|&v| v * 255).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches dimensions");
    img.save(path).map_err(codec(path))
}

pub fn write_rgb(path: &Path, height: usize, width: usize, pixels: &[[u8; 3]]) -> Result<()> {
    ensure_parent(path)?;
    let flat: Vec<u8> = pixels.iter().flatten().copied().collect();
    let img = RgbImage::from_raw(width as u32, height as u32, flat).expect("buffer matches dimensions");
    img.save(path).map_err(codec(path))
}

/// Reads any grayscale-convertible image as raw intensities (8- or 16-bit
/// sample values, not rescaled).
pub fn read_gray(path: &Path) -> Result<Grid<f32>> {
    let img = image::open(path).map_err(codec(path))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f32::from).collect(),
        image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f32::from).collect(),
        other if other.color().bytes_per_pixel() / other.color().channel_count() > 1 => {
            other.into_luma16().into_raw().into_iter().map(f32::from).collect()
        }
        other => other.into_luma8().into_raw().into_iter().map(f32::from).collect(),
    };
    Grid::new(h, w, data)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(Mask::binarize(&read_gray(path)?))
}

/// Reads a probability map written by [`write_gray16`] (or an 8-bit image).
pub fn read_prob(path: &Path) -> Result<Grid<f32>> {
    let img = image::open(path).map_err(codec(path))?;
    let scale = if img.color().bytes_per_pixel() / img.color().channel_count() > 1 {
        65535.0
    } else {
        255.0
    };
    let raw = read_gray(path)?;
    Ok(raw.map(|v| v / scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray16_roundtrip_is_exact_on_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let grid = Grid::new(2, 3, vec![0.0f32, 1.0, 0.5, 0.25, 1.0 / 65535.0, 0.75]).unwrap();
        write_gray16(&path, &grid).unwrap();
        let raw = read_gray(&path).unwrap();
        let expected: Vec<f32> = grid.as_slice().iter().map(|&v| f32::from(quantize_u16(v))).collect();
        assert_eq!(raw.as_slice(), expected.as_slice());
        let p = read_prob(&path).unwrap();
        assert!((p.get(0, 2) - 0.5).abs() < 1e-4);
    }

    #[test]
    fn mask_written_as_0_255() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = Mask::from_vec(2, 2, vec![0, 1, 1, 0]).unwrap();
        write_mask(&path, &mask).unwrap();
        let raw = read_gray(&path).unwrap();
        assert_eq!(raw.as_slice(), &[0.0, 255.0, 255.0, 0.0]);
        assert_eq!(read_mask(&path).unwrap(), mask);
    }
}
