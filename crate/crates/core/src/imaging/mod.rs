//! Image containers, filtering, Laplacian pyramids, display geometry and the
//! three-region foveated compositor.

pub mod filter;
pub mod geometry;
pub mod partition;
pub mod pyramid;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

pub use filter::gaussian_blur;
pub use geometry::{pixel_eccentricity, FieldGeometry};
pub use partition::{composite_foveated, partition_weights, PartitionWeights, RegionPartition};
pub use pyramid::{build_laplacian_pyramid, collapse_pyramid, LaplacianPyramid};

/// Smallest accepted patch side.
pub const MIN_PATCH_SIDE: usize = 16;

/// Values outside the declared range by less than this are clamped instead
/// of rejected (rounding noise from filtering).
const RANGE_SLACK: f32 = 1e-5;

/// Planar (channel-major) float image without a range contract. Used for
/// pyramid bands, weight maps and intermediate results.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuf {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ImageBuf {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f32) -> Self {
        ImageBuf {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn from_planar(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "{} values for a {channels}×{height}×{width} image",
                data.len()
            )));
        }
        Ok(ImageBuf {
            channels,
            height,
            width,
            data,
        })
    }

    /// Build from a per-pixel function `f(channel, y, x)`.
    pub fn from_fn(channels: usize, height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        ImageBuf {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(channels, height, width)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        ImageBuf {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn same_dims(&self, other: &ImageBuf) -> bool {
        self.dims() == other.dims()
    }

    pub fn max_abs_diff(&self, other: &ImageBuf) -> f32 {
        assert!(self.same_dims(other), "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Crop a window `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageBuf> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::shape(format!(
                "crop {h}×{w} at ({y0},{x0}) exceeds {}×{}",
                self.height, self.width
            )));
        }
        Ok(ImageBuf::from_fn(self.channels, h, w, |c, y, x| self.get(c, y0 + y, x0 + x)))
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    /// Image `i` of an NCHW tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, i: usize) -> Result<ImageBuf> {
        if t.shape().len() != 4 {
            return Err(Error::shape(format!("expected NCHW tensor, got {:?}", t.shape())));
        }
        let (n, c, h, w) = t.dims4();
        if i >= n {
            return Err(Error::shape(format!("sample {i} of batch {n}")));
        }
        let per = c * h * w;
        let data = t.data()[i * per..(i + 1) * per]
            .iter()
            .map(|v| v.to_f64_lossy() as f32)
            .collect();
        ImageBuf::from_planar(c, h, w, data)
    }
}

/// Declared value range of an [`ImagePatch`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RangeTag {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`, the generator's tanh range.
    Signed,
}

impl RangeTag {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            RangeTag::Unit => (0.0, 1.0),
            RangeTag::Signed => (-1.0, 1.0),
        }
    }
}

/// Three-channel image whose values are guaranteed to lie in the declared
/// range. Construction validates; conversions re-validate.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    buf: ImageBuf,
    range: RangeTag,
}

impl ImagePatch {
    pub fn new(mut buf: ImageBuf, range: RangeTag) -> Result<Self> {
        if buf.channels != 3 {
            return Err(Error::shape(format!("image patches are RGB, got {} channels", buf.channels)));
        }
        if buf.height < MIN_PATCH_SIDE || buf.width < MIN_PATCH_SIDE {
            return Err(Error::shape(format!(
                "patch {}×{} is smaller than the {MIN_PATCH_SIDE}×{MIN_PATCH_SIDE} minimum",
                buf.height, buf.width
            )));
        }
        let (lo, hi) = range.bounds();
        for v in buf.data.iter_mut() {
            if !v.is_finite() || *v < lo - RANGE_SLACK || *v > hi + RANGE_SLACK {
                return Err(Error::invalid(format!("value {v} outside {range:?} range [{lo}, {hi}]")));
            }
            *v = v.clamp(lo, hi);
        }
        Ok(ImagePatch { buf, range })
    }

    /// Build a unit-range patch, clamping into `[0, 1]`. For producers whose
    /// output is only approximately in range (optimizers, interpolation).
    pub fn from_clamped(mut buf: ImageBuf) -> Result<Self> {
        for v in buf.data.iter_mut() {
            if !v.is_finite() {
                return Err(Error::NonFinite("image value".into()));
            }
            *v = v.clamp(0.0, 1.0);
        }
        ImagePatch::new(buf, RangeTag::Unit)
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Result<Self> {
        ImagePatch::new(ImageBuf::filled(3, height, width, v), RangeTag::Unit)
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn buf(&self) -> &ImageBuf {
        &self.buf
    }

    pub fn into_buf(self) -> ImageBuf {
        self.buf
    }

    pub fn height(&self) -> usize {
        self.buf.height
    }

    pub fn width(&self) -> usize {
        self.buf.width
    }

    pub fn data(&self) -> &[f32] {
        &self.buf.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.buf.get(c, y, x)
    }

    pub fn same_dims(&self, other: &ImagePatch) -> bool {
        self.buf.same_dims(&other.buf)
    }

    /// Convert to `[0, 1]`.
    pub fn to_unit(&self) -> Result<ImagePatch> {
        match self.range {
            RangeTag::Unit => Ok(self.clone()),
            RangeTag::Signed => ImagePatch::new(self.buf.map(|v| (v + 1.0) * 0.5), RangeTag::Unit),
        }
    }

    /// Convert to `[-1, 1]`.
    pub fn to_signed(&self) -> Result<ImagePatch> {
        match self.range {
            RangeTag::Signed => Ok(self.clone()),
            RangeTag::Unit => ImagePatch::new(self.buf.map(|v| v * 2.0 - 1.0), RangeTag::Signed),
        }
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImagePatch> {
        ImagePatch::new(self.buf.crop(y0, x0, h, w)?, self.range)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        self.buf.to_tensor()
    }

    /// Load an 8-bit image, mapping values linearly to `[0, 1]` (no gamma
    /// linearization).
    pub fn load(path: &Path) -> Result<ImagePatch> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::format("image", format!("{}: {other}", path.display())),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut buf = ImageBuf::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                buf.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
            }
        }
        ImagePatch::new(buf, RangeTag::Unit)
    }

    /// Write as 8-bit RGB PNG (unit range, rounded).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let unit = self.to_unit()?;
        let (h, w) = (unit.height(), unit.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            for c in 0..3 {
                px.0[c] = quantize(unit.get(c, y as usize, x as usize));
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format("png", other.to_string()),
        })
    }

    /// Round-trip through 8-bit quantization.
    pub fn quantized(&self) -> Result<ImagePatch> {
        let unit = self.to_unit()?;
        ImagePatch::new(unit.buf.map(|v| quantize(v) as f32 / 255.0), RangeTag::Unit)
    }
}

#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_is_validated() {
        assert!(ImagePatch::new(ImageBuf::filled(3, 16, 16, 1.2), RangeTag::Unit).is_err());
        assert!(ImagePatch::new(ImageBuf::filled(3, 16, 16, -0.5), RangeTag::Signed).is_ok());
        assert!(ImagePatch::new(ImageBuf::filled(3, 16, 16, -0.5), RangeTag::Unit).is_err());
        assert!(ImagePatch::new(ImageBuf::filled(3, 15, 16, 0.5), RangeTag::Unit).is_err());
        assert!(ImagePatch::new(ImageBuf::filled(1, 16, 16, 0.5), RangeTag::Unit).is_err());
        let nan = ImageBuf::filled(3, 16, 16, f32::NAN);
        assert!(ImagePatch::new(nan, RangeTag::Unit).is_err());
    }

    #[test]
    fn signed_round_trip() {
        let p = ImagePatch::new(ImageBuf::from_fn(3, 16, 16, |c, y, x| ((c + y + x) % 7) as f32 / 6.0), RangeTag::Unit).unwrap();
        let s = p.to_signed().unwrap();
        assert_eq!(s.range(), RangeTag::Signed);
        assert!(s.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = s.to_unit().unwrap();
        assert!(back.buf().max_abs_diff(p.buf()) < 1e-6);
    }

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = ImagePatch::new(ImageBuf::from_fn(3, 16, 20, |c, y, x| ((c * 31 + y * 7 + x) % 17) as f32 / 16.0), RangeTag::Unit).unwrap();
        let path = dir.path().join("a.png");
        p.save_png(&path).unwrap();
        let q = ImagePatch::load(&path).unwrap();
        assert_eq!(q, p.quantized().unwrap());
        assert!(q.buf().max_abs_diff(p.buf()) <= 0.5 / 255.0 + 1e-6);
    }
}
