//! Procedural MVTec-layout dataset for desk-scale runs.
//!
//! Every image is rendered from its own RNG stream, quantized to 8 bits, and
//! (for defect samples) painted inside a mask afterwards. Pixels outside the
//! mask are therefore byte-identical to the clean render.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    #[default]
    Stripes,
    Checker,
    PerlinLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    #[default]
    Blot,
    Scratch,
}

impl DefectKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            DefectKind::Blot => "blot",
            DefectKind::Scratch => "scratch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub n_train: usize,
    pub n_test_good: usize,
    pub n_test_defect: usize,
    pub size: usize,
    pub texture: Texture,
    pub defect_kind: DefectKind,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            n_train: 50,
            n_test_good: 20,
            n_test_defect: 20,
            size: 64,
            texture: Texture::Stripes,
            defect_kind: DefectKind::Blot,
            seed: 0,
        }
    }
}

/// Minimum mean absolute difference inside a defect mask.
pub const MIN_DEFECT_CONTRAST: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    TestGood,
    TestDefect,
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        for (field, n) in [
            ("toy.n_train", self.n_train),
            ("toy.n_test_good", self.n_test_good),
            ("toy.n_test_defect", self.n_test_defect),
        ] {
            if n == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.size < 16 {
            return Err(Error::config("toy.size", "must be at least 16"));
        }
        Ok(())
    }

    fn rng(&self, split: Split, index: usize, stream: u64) -> ChaCha8Rng {
        let split_id = match split {
            Split::Train => 1u64,
            Split::TestGood => 2,
            Split::TestDefect => 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((split_id << 40) ^ ((index as u64) << 4) ^ stream);
        rng
    }

    /// Defect-free render of sample `index` of `split`, already quantized.
    pub fn render_clean(&self, split: Split, index: usize) -> Image {
        let mut rng = self.rng(split, index, 0);
        let raw = render_texture(self.texture, self.size, self.seed, &mut rng);
        quantize(&raw)
    }

    /// Defect sample `index` with its mask.
    pub fn render_defect(&self, index: usize) -> Result<(Image, Array2<bool>)> {
        let clean = self.render_clean(Split::TestDefect, index);
        let mut rng = self.rng(Split::TestDefect, index, 1);
        for _ in 0..64 {
            let mask = match self.defect_kind {
                DefectKind::Blot => blot_mask(self.size, &mut rng),
                DefectKind::Scratch => scratch_mask(self.size, &mut rng),
            };
            let mut image = clean.clone();
            paint(&mut image, &mask, &mut rng);
            let image = quantize(&image);
            if mean_abs_diff_in_mask(&clean, &image, &mask) > MIN_DEFECT_CONTRAST {
                return Ok((image, mask));
            }
        }
        Err(Error::Input(format!("could not place a visible defect on toy sample {index}")))
    }
}

fn quantize(image: &Image) -> Image {
    let mut out = image.clone();
    out.data_mut().mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    out
}

pub fn mean_abs_diff_in_mask(a: &Image, b: &Image, mask: &Array2<bool>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            for c in 0..a.channels() {
                sum += (a.data()[[y, x, c]] as f64 - b.data()[[y, x, c]] as f64).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Palette shared by all images of one dataset (fixed by the dataset seed).
fn palette(seed: u64) -> [[f32; 3]; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_e77e);
    let a = [rng.random_range(0.15..0.35), rng.random_range(0.25..0.45), rng.random_range(0.35..0.55)];
    let b = [rng.random_range(0.55..0.75), rng.random_range(0.5..0.7), rng.random_range(0.45..0.65)];
    [a, b]
}

fn render_texture(texture: Texture, size: usize, seed: u64, rng: &mut ChaCha8Rng) -> Image {
    let [lo, hi] = palette(seed);
    let noise_amp = 0.02f32;
    let field: Array2<f32> = match texture {
        Texture::Stripes => {
            let angle = 0.6 + rng.random_range(-0.08f32..0.08);
            let period = 10.0 + rng.random_range(-0.5f32..0.5);
            let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
            let (s, c) = angle.sin_cos();
            Array2::from_shape_fn((size, size), |(y, x)| {
                let u = x as f32 * c + y as f32 * s;
                0.5 + 0.5 * (u * std::f32::consts::TAU / period + phase).sin()
            })
        }
        Texture::Checker => {
            let cell = 8.0 + rng.random_range(-0.3f32..0.3);
            let (ox, oy) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
            Array2::from_shape_fn((size, size), |(y, x)| {
                let i = ((x as f32 + ox) / cell).floor() as i64;
                let j = ((y as f32 + oy) / cell).floor() as i64;
                ((i + j).rem_euclid(2)) as f32
            })
        }
        Texture::PerlinLike => {
            let mut acc = Array2::<f32>::zeros((size, size));
            let mut total = 0.0;
            for (octave, cells) in [4usize, 8, 16].into_iter().enumerate() {
                let weight = 0.5f32.powi(octave as i32);
                let lattice = Array2::from_shape_fn((cells + 1, cells + 1), |_| rng.random::<f32>());
                let scale = cells as f32 / size as f32;
                for ((y, x), v) in acc.indexed_iter_mut() {
                    let (fy, fx) = (y as f32 * scale, x as f32 * scale);
                    let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
                    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
                    let (ty, tx) = (smooth(fy - iy as f32), smooth(fx - ix as f32));
                    let top = lattice[[iy, ix]] * (1.0 - tx) + lattice[[iy, ix + 1]] * tx;
                    let bot = lattice[[iy + 1, ix]] * (1.0 - tx) + lattice[[iy + 1, ix + 1]] * tx;
                    *v += weight * (top * (1.0 - ty) + bot * ty);
                }
                total += weight;
            }
            acc.mapv_inplace(|v| v / total);
            acc
        }
    };
    Image::from_fn(size, size, 3, |(y, x, c)| {
        let t = field[[y, x]];
        let n: f32 = rng.random_range(-noise_amp..noise_amp);
        lo[c] + (hi[c] - lo[c]) * t + n
    })
}

fn blot_mask(size: usize, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let s = size as f32;
    let (cy, cx) = (rng.random_range(0.2 * s..0.8 * s), rng.random_range(0.2 * s..0.8 * s));
    let (ry, rx) = (rng.random_range(0.05 * s..0.14 * s), rng.random_range(0.05 * s..0.14 * s));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
    // Lobed radius gives an irregular outline.
    let lobes = [rng.random_range(0.0f32..0.25), rng.random_range(0.0f32..0.25)];
    let (sa, ca) = angle.sin_cos();
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
        let u = dx * ca + dy * sa;
        let v = -dx * sa + dy * ca;
        let theta = v.atan2(u);
        let r = 1.0 + lobes[0] * (3.0 * theta).sin() + lobes[1] * (5.0 * theta).cos();
        (u / rx).powi(2) + (v / ry).powi(2) <= r * r
    })
}

fn scratch_mask(size: usize, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let s = size as f32;
    let (cy, cx) = (rng.random_range(0.25 * s..0.75 * s), rng.random_range(0.25 * s..0.75 * s));
    let len = rng.random_range(0.25 * s..0.5 * s);
    let half_width = rng.random_range(0.8f32..1.6);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let bend = rng.random_range(-0.15f32..0.15);
    let (sa, ca) = angle.sin_cos();
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
        let u = dx * ca + dy * sa;
        let v = -dx * sa + dy * ca;
        let curve = bend * u * u / len;
        u.abs() <= len / 2.0 && (v - curve).abs() <= half_width
    })
}

/// Fills the mask with a color pushed away from the local mean.
fn paint(image: &mut Image, mask: &Array2<bool>, rng: &mut ChaCha8Rng) {
    let channels = image.channels();
    let mut mean = vec![0.0f32; channels];
    let mut n = 0.0f32;
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            for (c, mc) in mean.iter_mut().enumerate() {
                *mc += image.data()[[y, x, c]];
            }
            n += 1.0;
        }
    }
    let color: Vec<f32> = mean
        .iter()
        .map(|&m| {
            let m = m / n.max(1.0);
            let shift = rng.random_range(0.3f32..0.5);
            if m < 0.5 {
                m + shift
            } else {
                m - shift
            }
        })
        .collect();
    let data = image.data_mut();
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            for (c, &col) in color.iter().enumerate() {
                let grain: f32 = rng.random_range(-0.03..0.03);
                data[[y, x, c]] = (col + grain).clamp(0.0, 1.0);
            }
        }
    }
}

fn save_mask(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::data(path, e.to_string()))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::data(path, format!("cannot create directory: {e}")))
}

/// Files written by [`generate`], in write order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToyManifest {
    pub train: Vec<PathBuf>,
    pub test_good: Vec<PathBuf>,
    pub test_defect: Vec<PathBuf>,
    pub masks: Vec<PathBuf>,
}

/// Writes the dataset under `out_dir` (which becomes the class directory).
pub fn generate(spec: &ToySpec, out_dir: &Path) -> Result<ToyManifest> {
    spec.validate()?;
    let defect = spec.defect_kind.dir_name();
    let train_dir = out_dir.join("train").join("good");
    let good_dir = out_dir.join("test").join("good");
    let defect_dir = out_dir.join("test").join(defect);
    let mask_dir = out_dir.join("ground_truth").join(defect);
    for dir in [&train_dir, &good_dir, &defect_dir, &mask_dir] {
        create_dir(dir)?;
    }

    let mut manifest = ToyManifest::default();
    for i in 0..spec.n_train {
        let path = train_dir.join(format!("{i:03}.png"));
        spec.render_clean(Split::Train, i).save_png(&path)?;
        manifest.train.push(path);
    }
    for i in 0..spec.n_test_good {
        let path = good_dir.join(format!("{i:03}.png"));
        spec.render_clean(Split::TestGood, i).save_png(&path)?;
        manifest.test_good.push(path);
    }
    for i in 0..spec.n_test_defect {
        let (image, mask) = spec.render_defect(i)?;
        let path = defect_dir.join(format!("{i:03}.png"));
        image.save_png(&path)?;
        let mask_path = mask_dir.join(format!("{i:03}_mask.png"));
        save_mask(&mask, &mask_path)?;
        manifest.test_defect.push(path);
        manifest.masks.push(mask_path);
    }
    Ok(manifest)
}
