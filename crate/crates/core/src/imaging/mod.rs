//! Image container and the resampling / convolution primitives shared by
//! every other module.
//!
//! Intensities are stored as `f32` in `[0, 1]`, channel-planar. Files on
//! disk are 8/16-bit integers (see [`io`]); the float representation keeps
//! sub-LSB precision for histogramming and interpolation. Boundary handling
//! is edge replication everywhere.

pub mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("expected {expected} channel(s), image has {actual}")]
    ChannelMismatch { expected: usize, actual: usize },
    #[error("kernel length must be odd, got {0}")]
    EvenKernel(usize),
    #[error("data length {len} does not match {width}x{height}x{channels}")]
    DimensionMismatch {
        width: usize,
        height: usize,
        channels: usize,
        len: usize,
    },
    #[error("image dimensions must be nonzero")]
    EmptyImage,
    #[error("unsupported raster format: {0}")]
    UnsupportedFormat(String),
    #[error("decode failed: {0}")]
    Decode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which plane of a 3-channel image to pull out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Red,
    Green,
    Blue,
}

impl Channel {
    pub fn index(self) -> usize {
        match self {
            Channel::Red => 0,
            Channel::Green => 1,
            Channel::Blue => 2,
        }
    }
}

/// Row-major raster with 1 or 3 planes, intensities in `[0, 1]`.
///
/// `pixel_pitch_obj` carries the object-space sampling pitch in µm/px when
/// known (set by the renderer and propagated through per-pixel ops).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
    pub pixel_pitch_obj: Option<f64>,
}

impl Image {
    /// Zero-filled image.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        assert!(width > 0 && height > 0, "dimensions must be nonzero");
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            pixel_pitch_obj: None,
        }
    }

    /// Wraps existing planar data, validating shape and finiteness.
    pub fn from_data(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) {
            return Err(ImagingError::EmptyImage);
        }
        if data.len() != width * height * channels {
            return Err(ImagingError::DimensionMismatch {
                width,
                height,
                channels,
                len: data.len(),
            });
        }
        let mut data = data;
        for v in &mut data {
            if !v.is_finite() {
                return Err(ImagingError::Decode("non-finite intensity".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
            pixel_pitch_obj: None,
        })
    }

    /// Single-channel image computed per pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut img = Image::new(width, height, 1);
        for y in 0..height {
            for x in 0..width {
                img.data[y * width + x] = f(x, y).clamp(0.0, 1.0);
            }
        }
        img
    }

    /// Assembles a 3-channel image from equally sized planes.
    pub fn from_planes(planes: [Image; 3]) -> Result<Self, ImagingError> {
        let (w, h) = (planes[0].width, planes[0].height);
        for p in &planes {
            if p.channels != 1 {
                return Err(ImagingError::ChannelMismatch {
                    expected: 1,
                    actual: p.channels,
                });
            }
            if p.width != w || p.height != h {
                return Err(ImagingError::DimensionMismatch {
                    width: w,
                    height: h,
                    channels: 3,
                    len: p.data.len(),
                });
            }
        }
        let pitch = planes[0].pixel_pitch_obj;
        let mut data = Vec::with_capacity(w * h * 3);
        for p in planes {
            data.extend_from_slice(&p.data);
        }
        Ok(Image {
            width: w,
            height: h,
            channels: 3,
            data,
            pixel_pitch_obj: pitch,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        assert!(c < self.channels);
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        assert!(c < self.channels);
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[c * self.width * self.height + y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[c * self.width * self.height + y * self.width + x] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mean intensity over all planes.
    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Clamps every sample into `[0, 1]` in place.
    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Axis-aligned crop. The rectangle must lie inside the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        assert!(x0 + w <= self.width && y0 + h <= self.height);
        let mut out = Image::new(w, h, self.channels);
        out.pixel_pitch_obj = self.pixel_pitch_obj;
        for c in 0..self.channels {
            let src = self.plane(c);
            let dst = out.plane_mut(c);
            for y in 0..h {
                let s = (y0 + y) * self.width + x0;
                dst[y * w..(y + 1) * w].copy_from_slice(&src[s..s + w]);
            }
        }
        out
    }
}

/// Clamped bilinear sample of one plane; coordinates outside the support
/// replicate the edge.
pub fn sample_bilinear(plane: &[f32], width: usize, height: usize, x: f32, y: f32) -> f32 {
    let x = x.clamp(0.0, (width - 1) as f32);
    let y = y.clamp(0.0, (height - 1) as f32);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let a = plane[y0 * width + x0];
    let b = plane[y0 * width + x1];
    let c = plane[y1 * width + x0];
    let d = plane[y1 * width + x1];
    a * (1.0 - fx) * (1.0 - fy) + b * fx * (1.0 - fy) + c * (1.0 - fx) * fy + d * fx * fy
}

/// Extracts one plane of a 3-channel image.
pub fn extract_channel(img: &Image, which: Channel) -> Result<Image, ImagingError> {
    if img.channels != 3 {
        return Err(ImagingError::ChannelMismatch {
            expected: 3,
            actual: img.channels,
        });
    }
    let mut out = Image::new(img.width, img.height, 1);
    out.pixel_pitch_obj = img.pixel_pitch_obj;
    out.plane_mut(0).copy_from_slice(img.plane(which.index()));
    Ok(out)
}

/// Shifts a single-channel image by a fractional pixel offset.
///
/// Output pixel (x, y) takes the value of input (x - dx, y - dy), bilinearly
/// interpolated, so positive offsets move content toward +x/+y. Out-of-support
/// reads replicate the edge.
pub fn translate(img: &Image, dx: f32, dy: f32) -> Result<Image, ImagingError> {
    if img.channels != 1 {
        return Err(ImagingError::ChannelMismatch {
            expected: 1,
            actual: img.channels,
        });
    }
    let mut out = Image::new(img.width, img.height, 1);
    out.pixel_pitch_obj = img.pixel_pitch_obj;
    translate_plane_into(
        img.plane(0),
        img.width,
        img.height,
        dx,
        dy,
        out.plane_mut(0),
    );
    Ok(out)
}

pub(crate) fn translate_plane_into(
    src: &[f32],
    width: usize,
    height: usize,
    dx: f32,
    dy: f32,
    dst: &mut [f32],
) {
    for y in 0..height {
        let sy = y as f32 - dy;
        for x in 0..width {
            dst[y * width + x] = sample_bilinear(src, width, height, x as f32 - dx, sy);
        }
    }
}

/// Convolution axis for [`Kernel1D`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

/// Odd-length 1-D kernel tied to an axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel1D {
    taps: Vec<f32>,
    axis: Axis,
}

impl Kernel1D {
    pub fn new(taps: Vec<f32>, axis: Axis) -> Result<Self, ImagingError> {
        if taps.len() % 2 == 0 || taps.is_empty() {
            return Err(ImagingError::EvenKernel(taps.len()));
        }
        Ok(Kernel1D { taps, axis })
    }

    /// Normalized box kernel of odd length `len`.
    pub fn boxcar(len: usize, axis: Axis) -> Result<Self, ImagingError> {
        Kernel1D::new(vec![1.0 / len as f32; len], axis)
    }

    /// Normalized Gaussian, truncated at 3 sigma.
    pub fn gaussian(sigma: f32, axis: Axis) -> Self {
        let r = (3.0 * sigma).ceil().max(1.0) as usize;
        let mut taps: Vec<f32> = (-(r as i64)..=r as i64)
            .map(|i| (-0.5 * (i as f32 / sigma).powi(2)).exp())
            .collect();
        let sum: f32 = taps.iter().sum();
        for t in &mut taps {
            *t /= sum;
        }
        Kernel1D { taps, axis }
    }

    pub fn taps(&self) -> &[f32] {
        &self.taps
    }
    pub fn axis(&self) -> Axis {
        self.axis
    }
}

/// Convolves a single-channel image with a 1-D kernel along its axis,
/// replicating edges.
pub fn convolve_separable(img: &Image, k: &Kernel1D) -> Result<Image, ImagingError> {
    if img.channels != 1 {
        return Err(ImagingError::ChannelMismatch {
            expected: 1,
            actual: img.channels,
        });
    }
    let mut out = Image::new(img.width, img.height, 1);
    out.pixel_pitch_obj = img.pixel_pitch_obj;
    convolve_plane_into(
        img.plane(0),
        img.width,
        img.height,
        k,
        out.plane_mut(0),
    );
    Ok(out)
}

pub(crate) fn convolve_plane_into(
    src: &[f32],
    width: usize,
    height: usize,
    k: &Kernel1D,
    dst: &mut [f32],
) {
    let r = (k.taps.len() / 2) as i64;
    match k.axis {
        Axis::X => {
            for y in 0..height {
                let row = &src[y * width..(y + 1) * width];
                for x in 0..width {
                    let mut acc = 0.0f64;
                    for (i, &t) in k.taps.iter().enumerate() {
                        let sx = (x as i64 + i as i64 - r).clamp(0, width as i64 - 1) as usize;
                        acc += (t as f64) * row[sx] as f64;
                    }
                    dst[y * width + x] = acc as f32;
                }
            }
        }
        Axis::Y => {
            for y in 0..height {
                for x in 0..width {
                    let mut acc = 0.0f64;
                    for (i, &t) in k.taps.iter().enumerate() {
                        let sy = (y as i64 + i as i64 - r).clamp(0, height as i64 - 1) as usize;
                        acc += (t as f64) * src[sy * width + x] as f64;
                    }
                    dst[y * width + x] = acc as f32;
                }
            }
        }
    }
}

/// Running-sum box blur along one axis, length `len` taps (odd). Equivalent to
/// `convolve_separable` with `Kernel1D::boxcar(len)` but O(1) per pixel, which
/// matters for the long motion-blur kernels.
pub fn box_blur_axis(img: &Image, len: usize, axis: Axis) -> Result<Image, ImagingError> {
    if img.channels != 1 {
        return Err(ImagingError::ChannelMismatch {
            expected: 1,
            actual: img.channels,
        });
    }
    if len % 2 == 0 || len == 0 {
        return Err(ImagingError::EvenKernel(len));
    }
    let mut out = Image::new(img.width, img.height, 1);
    out.pixel_pitch_obj = img.pixel_pitch_obj;
    box_blur_plane_into(img.plane(0), img.width, img.height, len, axis, out.plane_mut(0));
    Ok(out)
}

pub(crate) fn box_blur_plane_into(
    src: &[f32],
    width: usize,
    height: usize,
    len: usize,
    axis: Axis,
    dst: &mut [f32],
) {
    let r = (len / 2) as i64;
    let inv = 1.0 / len as f64;
    let clamp_idx = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    match axis {
        Axis::X => {
            for y in 0..height {
                let row = &src[y * width..(y + 1) * width];
                let mut acc = 0.0f64;
                for i in -r..=r {
                    acc += row[clamp_idx(i, width)] as f64;
                }
                for x in 0..width {
                    dst[y * width + x] = (acc * inv) as f32;
                    acc += row[clamp_idx(x as i64 + r + 1, width)] as f64;
                    acc -= row[clamp_idx(x as i64 - r, width)] as f64;
                }
            }
        }
        Axis::Y => {
            let mut acc = vec![0.0f64; width];
            for i in -r..=r {
                let row = &src[clamp_idx(i, height) * width..];
                for x in 0..width {
                    acc[x] += row[x] as f64;
                }
            }
            for y in 0..height {
                for x in 0..width {
                    dst[y * width + x] = (acc[x] * inv) as f32;
                }
                let add = &src[clamp_idx(y as i64 + r + 1, height) * width..];
                let sub = &src[clamp_idx(y as i64 - r, height) * width..];
                for x in 0..width {
                    acc[x] += add[x] as f64 - sub[x] as f64;
                }
            }
        }
    }
}

/// Sum of squared central differences, normalized per pixel. Used as the
/// sharpness figure for focus searches in calibration and in tests; the
/// autofocus path itself never relies on it.
pub fn gradient_energy(img: &Image) -> f64 {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for c in 0..img.channels {
        let p = img.plane(c);
        for y in 1..img.height - 1 {
            for x in 1..img.width - 1 {
                let gx = (p[y * img.width + x + 1] - p[y * img.width + x - 1]) as f64;
                let gy = (p[(y + 1) * img.width + x] - p[(y - 1) * img.width + x]) as f64;
                total += gx * gx + gy * gy;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
