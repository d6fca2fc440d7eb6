//! Raster images: anything the `image` crate decodes is readable; images are
//! written as binary PPM (colour) or PGM (grey).

use std::path::Path;

use image::{ColorType, ImageFormat};
use pgan_core::pam::GrayMap;
use pgan_core::Image;

use crate::{Error, Result};

/// Decode an image into planar `[0, 1]` values; grey images keep one channel.
pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let grey = matches!(img.color(), ColorType::L8 | ColorType::L16 | ColorType::La8 | ColorType::La16);
    let interleaved: Vec<u8> = if grey { img.into_luma8().into_raw() } else { img.into_rgb8().into_raw() };
    let channels = if grey { 1 } else { 3 };
    let mut data = vec![0.0; channels * h * w];
    for (i, &v) in interleaved.iter().enumerate() {
        let (pix, ch) = (i / channels, i % channels);
        data[ch * h * w + pix] = f64::from(v) / 255.0;
    }
    Ok(Image::new(h, w, channels, data)?)
}

/// 8-bit interleaved bytes of an image (values rounded, clamped to `[0, 1]`).
pub fn to_bytes(img: &Image) -> Vec<u8> {
    let plane = img.h * img.w;
    let mut out = vec![0; img.channels * plane];
    for ch in 0..img.channels {
        for pix in 0..plane {
            out[pix * img.channels + ch] = (img.data[ch * plane + pix].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

/// Write a PPM (three channels) or PGM (one channel).
pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    let color = match img.channels {
        1 => ColorType::L8,
        3 => ColorType::Rgb8,
        c => return Err(Error::format(path, format!("cannot store a {c}-channel image as PNM"))),
    };
    image::save_buffer_with_format(path, &to_bytes(img), img.w as u32, img.h as u32, color, ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_heatmap(path: &Path, map: &GrayMap) -> Result<()> {
    image::save_buffer_with_format(path, &map.data, map.w as u32, map.h as u32, ColorType::L8, ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))
}
