//! Raster file formats: RGB images (8/16-bit PNG), domain masks and label rasters.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{DomainMask, Image};

fn to_unit(v: f32) -> f32 {
    ((v + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// Writes a lossless 16-bit RGB PNG; values are clamped to `[-1, 1]`.
pub fn save_image16(image: &Image<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (image.height(), image.width());
    let buf = ImageBuffer::<Rgb<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (to_unit(image.at(c, y as usize, x as usize)) * 65535.0).round() as u16;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Writes an 8-bit RGB PNG; values are clamped to `[-1, 1]`.
pub fn save_image8(image: &Image<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (image.height(), image.width());
    let buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (to_unit(image.at(c, y as usize, x as usize)) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Loads any PNG as RGB in `[-1, 1]`, keeping 16-bit precision when present.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image<f32>> {
    let path = path.as_ref();
    let dynamic = image::open(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })?;
    let rgb = dynamic.to_rgb16();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Image::from_fn(h, w, |c, y, x| {
        let v = rgb.get_pixel(x as u32, y as u32)[c] as f32 / 65535.0;
        v * 2.0 - 1.0
    }))
}

/// 8-bit single channel, 255 = in-domain, 0 = out-of-domain.
pub fn save_mask(mask: &DomainMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.is_in(y as usize, x as usize) { 255 } else { 0 }])
    });
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// Reads a mask written by [`save_mask`]; values ≥ 128 are in-domain.
pub fn load_mask(path: impl AsRef<Path>) -> Result<DomainMask> {
    let path = path.as_ref();
    let gray = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    DomainMask::new(h, w, gray.pixels().map(|p| (p[0] >= 128) as u8).collect())
}

/// Writes an 8-bit label raster.
pub fn save_labels(labels: &[u8], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf = GrayImage::from_raw(width as u32, height as u32, labels.to_vec())
        .ok_or_else(|| Error::Shape("label raster size mismatch".into()))?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let gray = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_luma8();
    Ok((gray.height() as usize, gray.width() as usize, gray.into_raw()))
}
