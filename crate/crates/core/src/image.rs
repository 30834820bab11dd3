//! Float images in height × width × channel layout.

use std::path::Path;

use image::{imageops::FilterType, ImageBuffer, Rgb};
use ndarray::{Array3, ArrayView3, Axis};

use crate::error::{Error, Result};

/// An H×W×C float image. Inputs live in `[0, 1]`; reconstructions are
/// unconstrained and use the same container.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f32>,
}

impl Image {
    pub fn new(data: Array3<f32>) -> Self {
        Image { data }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image {
            data: Array3::zeros((height, width, channels)),
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        f: impl FnMut((usize, usize, usize)) -> f32,
    ) -> Self {
        Image {
            data: Array3::from_shape_fn((height, width, channels), f),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.data
    }

    /// True when every value is finite and inside `[0, 1]`.
    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Channel-first copy with per-channel standardization `(x - mean) / std`.
    pub fn to_chw_standardized(&self, mean: &[f32], std: &[f32]) -> Array3<f32> {
        let (h, w, c) = self.shape();
        let mut out = Array3::zeros((c, h, w));
        for (ch, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let m = mean.get(ch).copied().unwrap_or(0.0);
            let s = std.get(ch).copied().unwrap_or(1.0);
            let src = self.data.index_axis(Axis(2), ch);
            plane.zip_mut_with(&src, |o, &v| *o = (v - m) / s);
        }
        out
    }

    /// Loads a PNG (or any format the `image` crate decodes with the enabled
    /// features) as RGB, resized to `size × size` with a triangle filter.
    pub fn load(path: &Path, size: Option<usize>) -> Result<Image> {
        let decoded = image::open(path).map_err(|e| Error::data(path, e.to_string()))?;
        let mut rgb = decoded.to_rgb8();
        if let Some(size) = size {
            if rgb.width() as usize != size || rgb.height() as usize != size {
                rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
            }
        }
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Ok(Image::from_fn(h, w, 3, |(y, x, c)| {
            rgb.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
        }))
    }

    /// 8-bit RGB buffer; values are clamped to `[0, 1]` and rounded. Single
    /// channel images are replicated to gray.
    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let (h, w, c) = self.shape();
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| {
                let v = self.data[[y as usize, x as usize, ch.min(c - 1)]];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::data(path, e.to_string()))
    }
}
