//! Raster file I/O.
//!
//! PNG and TIFF, 8- or 16-bit, gray or RGB. Floats are quantized on write
//! (16-bit by default, which is what every pipeline output uses) and scaled
//! back to `[0, 1]` on read.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageReader, Luma, Rgb};

use super::{Image, ImagingError};

/// Output bit depth for [`write_raster`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

fn format_for(path: &Path) -> Result<image::ImageFormat, ImagingError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("png") => Ok(image::ImageFormat::Png),
        Some(ext) if ext.eq_ignore_ascii_case("tif") || ext.eq_ignore_ascii_case("tiff") => {
            Ok(image::ImageFormat::Tiff)
        }
        other => Err(ImagingError::UnsupportedFormat(
            other.unwrap_or("<none>").to_string(),
        )),
    }
}

/// Writes an image as PNG or TIFF, chosen by file extension.
pub fn write_raster(img: &Image, path: &Path, depth: BitDepth) -> Result<(), ImagingError> {
    let format = format_for(path)?;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynamic = match (img.channels(), depth) {
        (1, BitDepth::Eight) => {
            let buf: ImageBuffer<Luma<u8>, _> = ImageBuffer::from_fn(w, h, |x, y| {
                Luma([quant8(img.get(x as usize, y as usize, 0))])
            });
            DynamicImage::ImageLuma8(buf)
        }
        (1, BitDepth::Sixteen) => {
            let buf: ImageBuffer<Luma<u16>, _> = ImageBuffer::from_fn(w, h, |x, y| {
                Luma([quant16(img.get(x as usize, y as usize, 0))])
            });
            DynamicImage::ImageLuma16(buf)
        }
        (3, BitDepth::Eight) => {
            let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_fn(w, h, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([
                    quant8(img.get(x, y, 0)),
                    quant8(img.get(x, y, 1)),
                    quant8(img.get(x, y, 2)),
                ])
            });
            DynamicImage::ImageRgb8(buf)
        }
        (3, BitDepth::Sixteen) => {
            let buf: ImageBuffer<Rgb<u16>, _> = ImageBuffer::from_fn(w, h, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([
                    quant16(img.get(x, y, 0)),
                    quant16(img.get(x, y, 1)),
                    quant16(img.get(x, y, 2)),
                ])
            });
            DynamicImage::ImageRgb16(buf)
        }
        _ => unreachable!("channels validated at construction"),
    };
    dynamic
        .save_with_format(path, format)
        .map_err(|e| ImagingError::Decode(e.to_string()))
}

/// Reads a PNG or TIFF into the float representation. Gray and RGB inputs are
/// accepted; other layouts (palette, alpha) are converted to RGB first.
pub fn read_raster(path: &Path) -> Result<Image, ImagingError> {
    let reader = ImageReader::open(path)?;
    let decoded = reader
        .decode()
        .map_err(|e| ImagingError::Decode(e.to_string()))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma8(buf) => {
            let data = buf.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
            Image::from_data(w, h, 1, data)
        }
        DynamicImage::ImageLuma16(buf) => {
            let data = buf.pixels().map(|p| p.0[0] as f32 / 65535.0).collect();
            Image::from_data(w, h, 1, data)
        }
        DynamicImage::ImageRgb8(buf) => {
            let mut data = vec![0.0f32; w * h * 3];
            for (i, p) in buf.pixels().enumerate() {
                for c in 0..3 {
                    data[c * w * h + i] = p.0[c] as f32 / 255.0;
                }
            }
            Image::from_data(w, h, 3, data)
        }
        DynamicImage::ImageRgb16(buf) => {
            let mut data = vec![0.0f32; w * h * 3];
            for (i, p) in buf.pixels().enumerate() {
                for c in 0..3 {
                    data[c * w * h + i] = p.0[c] as f32 / 65535.0;
                }
            }
            Image::from_data(w, h, 3, data)
        }
        other => {
            let buf = other.to_rgb16();
            let mut data = vec![0.0f32; w * h * 3];
            for (i, p) in buf.pixels().enumerate() {
                for c in 0..3 {
                    data[c * w * h + i] = p.0[c] as f32 / 65535.0;
                }
            }
            Image::from_data(w, h, 3, data)
        }
    }
}

fn quant8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn quant16(v: f32) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}
