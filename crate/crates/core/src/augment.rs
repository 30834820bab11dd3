//! Synthetic defect augmentation for normal training images.
//!
//! A [`DefectSpec`] is drawn from an [`AugmentConfig`] with an explicit seed,
//! then rendered onto an image by [`apply_defect`]. The default fill copies a
//! rotated, color-jittered crop of the same image into the defect region
//! (CutPaste-style); a solid-color-with-noise fill is the alternative.
//!
//! Every function here is pure given its seed, so data-loading workers may
//! call them in parallel.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectShape {
    Rectangle,
    Ellipse,
    /// Long thin rotated strip. Length is `w_frac · W`; thickness is
    /// `h_frac · H / 4`, at least one pixel.
    ScarStrip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectSource {
    SameImageCrop,
    SolidNoise,
}

/// Augmentation hyperparameters. Ranges are closed `[min, max]` pairs and
/// sampled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub apply_prob: f64,
    pub shapes: Vec<DefectShape>,
    pub sources: Vec<DefectSource>,
    pub width_range: [f64; 2],
    pub height_range: [f64; 2],
    pub angle_range: [f64; 2],
    pub center_x_range: [f64; 2],
    pub center_y_range: [f64; 2],
    pub jitter_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            apply_prob: 0.5,
            shapes: vec![
                DefectShape::Rectangle,
                DefectShape::Ellipse,
                DefectShape::ScarStrip,
            ],
            sources: vec![DefectSource::SameImageCrop],
            width_range: [0.05, 0.3],
            height_range: [0.05, 0.3],
            angle_range: [0.0, 360.0],
            center_x_range: [0.0, 1.0],
            center_y_range: [0.0, 1.0],
            jitter_range: [0.0, 0.1],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::config("augmentation.apply_prob", "must lie in [0, 1]"));
        }
        if self.shapes.is_empty() {
            return Err(Error::config("augmentation.shapes", "at least one shape is required"));
        }
        if self.sources.is_empty() {
            return Err(Error::config("augmentation.sources", "at least one source is required"));
        }
        let check = |name: &str, r: [f64; 2], lo: f64, hi: f64, lo_open: bool| -> Result<()> {
            let field = format!("augmentation.{name}");
            if !(r[0].is_finite() && r[1].is_finite()) {
                return Err(Error::config(field, "range bounds must be finite"));
            }
            if r[0] > r[1] {
                return Err(Error::config(field, format!("min {} exceeds max {}", r[0], r[1])));
            }
            let below = if lo_open { r[0] <= lo } else { r[0] < lo };
            if below || r[1] > hi {
                let open = if lo_open { "(" } else { "[" };
                return Err(Error::config(field, format!("range must lie within {open}{lo}, {hi}]")));
            }
            Ok(())
        };
        check("width_range", self.width_range, 0.0, 1.0, true)?;
        check("height_range", self.height_range, 0.0, 1.0, true)?;
        check("angle_range", self.angle_range, 0.0, 360.0, false)?;
        check("center_x_range", self.center_x_range, 0.0, 1.0, false)?;
        check("center_y_range", self.center_y_range, 0.0, 1.0, false)?;
        check("jitter_range", self.jitter_range, 0.0, 1.0, false)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub shape: DefectShape,
    /// `(w_frac, h_frac)` of the image sides.
    pub size: (f64, f64),
    /// Degrees, counter-clockwise.
    pub angle: f64,
    /// `(cx_frac, cy_frac)` of the image sides.
    pub position: (f64, f64),
    pub source: DefectSource,
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSample {
    pub image: Image,
    pub defect_mask: Array2<bool>,
    pub is_synthetic: bool,
}

impl AugmentedSample {
    pub fn mask_area(&self) -> usize {
        self.defect_mask.iter().filter(|&&m| m).count()
    }
}

// Keeps the draw stream of `apply_defect` distinct from `sample_defect_spec`
// when callers reuse one seed for both.
const APPLY_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

fn uniform(rng: &mut impl Rng, range: [f64; 2]) -> f64 {
    let u: f64 = rng.random();
    range[0] + u * (range[1] - range[0])
}

pub fn sample_defect_spec(seed: u64, config: &AugmentConfig) -> Result<DefectSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = config.shapes[rng.random_range(0..config.shapes.len())];
    let w = uniform(&mut rng, config.width_range);
    let h = uniform(&mut rng, config.height_range);
    let angle = uniform(&mut rng, config.angle_range);
    let cx = uniform(&mut rng, config.center_x_range);
    let cy = uniform(&mut rng, config.center_y_range);
    let source = config.sources[rng.random_range(0..config.sources.len())];
    let jitter = uniform(&mut rng, config.jitter_range);
    Ok(DefectSpec {
        shape,
        size: (w, h),
        angle: angle % 360.0,
        position: (cx, cy),
        source,
        jitter,
    })
}

/// Maps pixel-space offsets from the defect center into the defect's own
/// (unrotated) frame.
struct DefectFrame {
    cx: f64,
    cy: f64,
    cos: f64,
    sin: f64,
    half_u: f64,
    half_v: f64,
    shape: DefectShape,
}

impl DefectFrame {
    fn new(spec: &DefectSpec, height: usize, width: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        let (half_u, half_v) = match spec.shape {
            DefectShape::Rectangle | DefectShape::Ellipse => (spec.size.0 * w / 2.0, spec.size.1 * h / 2.0),
            DefectShape::ScarStrip => (spec.size.0 * w / 2.0, (spec.size.1 * h / 8.0).max(0.5)),
        };
        let theta = spec.angle.to_radians();
        DefectFrame {
            cx: spec.position.0 * w,
            cy: spec.position.1 * h,
            cos: theta.cos(),
            sin: theta.sin(),
            half_u,
            half_v,
            shape: spec.shape,
        }
    }

    fn local(&self, x: usize, y: usize) -> (f64, f64) {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        (dx * self.cos + dy * self.sin, -dx * self.sin + dy * self.cos)
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        match self.shape {
            DefectShape::Rectangle | DefectShape::ScarStrip => u.abs() <= self.half_u && v.abs() <= self.half_v,
            DefectShape::Ellipse => {
                let (a, b) = (u / self.half_u, v / self.half_v);
                a * a + b * b <= 1.0
            }
        }
    }

    fn mask(&self, height: usize, width: usize) -> Array2<bool> {
        let mut mask = Array2::from_elem((height, width), false);
        let reach = self.half_u.hypot(self.half_v) + 1.0;
        let y0 = (self.cy - reach).floor().max(0.0) as usize;
        let y1 = ((self.cy + reach).ceil().max(0.0) as usize).min(height);
        let x0 = (self.cx - reach).floor().max(0.0) as usize;
        let x1 = ((self.cx + reach).ceil().max(0.0) as usize).min(width);
        for y in y0..y1 {
            for x in x0..x1 {
                let (u, v) = self.local(x, y);
                if self.contains(u, v) {
                    mask[[y, x]] = true;
                }
            }
        }
        if !mask.iter().any(|&m| m) {
            let x = (self.cx.floor().max(0.0) as usize).min(width - 1);
            let y = (self.cy.floor().max(0.0) as usize).min(height - 1);
            mask[[y, x]] = true;
        }
        mask
    }
}

/// Renders `spec` onto `image` with probability `apply_prob`.
///
/// Pixels outside the returned mask are copied bit-for-bit from the input.
pub fn apply_defect(image: &Image, spec: &DefectSpec, apply_prob: f64, seed: u64) -> AugmentedSample {
    let (height, width, channels) = image.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ APPLY_STREAM);
    let gate: f64 = rng.random();
    if gate >= apply_prob || height == 0 || width == 0 {
        return AugmentedSample {
            image: image.clone(),
            defect_mask: Array2::from_elem((height, width), false),
            is_synthetic: false,
        };
    }

    let frame = DefectFrame::new(spec, height, width);
    let mask = frame.mask(height, width);

    let src_cx: f64 = rng.random::<f64>() * width as f64;
    let src_cy: f64 = rng.random::<f64>() * height as f64;
    let jitter = spec.jitter.clamp(0.0, 1.0);
    let gains: Vec<f64> = (0..channels)
        .map(|_| 1.0 + jitter * rng.random_range(-1.0..=1.0))
        .collect();
    let offsets: Vec<f64> = (0..channels).map(|_| jitter * rng.random_range(-1.0..=1.0)).collect();
    let base: Vec<f64> = (0..channels).map(|_| rng.random::<f64>()).collect();
    let noise_amp = 0.05 + 0.25 * jitter;

    let src = image.data();
    let mut out = image.clone();
    let dst = out.data_mut();
    for y in 0..height {
        for x in 0..width {
            if !mask[[y, x]] {
                continue;
            }
            match spec.source {
                DefectSource::SameImageCrop => {
                    let (u, v) = frame.local(x, y);
                    let sx = (src_cx + u).floor().clamp(0.0, (width - 1) as f64) as usize;
                    let sy = (src_cy + v).floor().clamp(0.0, (height - 1) as f64) as usize;
                    for c in 0..channels {
                        let value = src[[sy, sx, c]] as f64 * gains[c] + offsets[c];
                        dst[[y, x, c]] = value.clamp(0.0, 1.0) as f32;
                    }
                }
                DefectSource::SolidNoise => {
                    for c in 0..channels {
                        let value = base[c] + noise_amp * rng.random_range(-1.0..=1.0);
                        dst[[y, x, c]] = value.clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }

    AugmentedSample {
        image: out,
        defect_mask: mask,
        is_synthetic: true,
    }
}

/// Draws a spec and applies it in one step; the spec and gate use
/// independent streams derived from `seed`.
pub fn augment(image: &Image, config: &AugmentConfig, seed: u64) -> Result<AugmentedSample> {
    let spec = sample_defect_spec(seed, config)?;
    Ok(apply_defect(image, &spec, config.apply_prob, seed))
}
