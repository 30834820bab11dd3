//! Patch segmentation and the per-vector reconstruction head.
//!
//! The decoder is two 1×1 convolutions with a ReLU between them, so each
//! feature vector is mapped on its own to `ph·pw·C` values that fill
//! exactly its patch. No information crosses grid cells.

use ndarray::{s, Array3, ArrayView3};
use num_traits::Zero;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, FeatureMap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{relu, relu_backward, Conv2d, ConvCache, Grads, ParamGroup, ParamStore};

/// Non-overlapping tiles of an image (or gradient), row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet<A = f32> {
    pub patches: Vec<Array3<A>>,
    pub grid: (usize, usize),
    /// `(ph, pw, C)`.
    pub patch_shape: (usize, usize, usize),
}

impl<A: Clone> PatchSet<A> {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn map<B>(&self, f: impl Fn(&A) -> B + Copy) -> PatchSet<B> {
        PatchSet {
            patches: self.patches.iter().map(|p| p.map(f)).collect(),
            grid: self.grid,
            patch_shape: self.patch_shape,
        }
    }
}

impl<A: Clone + Zero> PatchSet<A> {
    /// Inverse of [`segment_array`].
    pub fn reassemble(&self) -> Array3<A> {
        let (gh, gw) = self.grid;
        let (ph, pw, c) = self.patch_shape;
        let mut out = Array3::from_elem((gh * ph, gw * pw, c), A::zero());
        for (p, patch) in self.patches.iter().enumerate() {
            let (i, j) = (p / gw, p % gw);
            out.slice_mut(s![i * ph..(i + 1) * ph, j * pw..(j + 1) * pw, ..]).assign(patch);
        }
        out
    }
}

impl PatchSet<f32> {
    pub fn to_image(&self) -> Image {
        Image::new(self.reassemble())
    }
}

pub fn segment_array<A: Clone>(data: ArrayView3<'_, A>, grid: (usize, usize)) -> Result<PatchSet<A>> {
    let (h, w, c) = data.dim();
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 {
        return Err(Error::Input(format!("a {h}×{w} image cannot be tiled by a {gh}×{gw} grid")));
    }
    let (ph, pw) = (h / gh, w / gw);
    let patches = (0..gh * gw)
        .map(|p| {
            let (i, j) = (p / gw, p % gw);
            data.slice(s![i * ph..(i + 1) * ph, j * pw..(j + 1) * pw, ..]).to_owned()
        })
        .collect();
    Ok(PatchSet {
        patches,
        grid,
        patch_shape: (ph, pw, c),
    })
}

/// The segmentation operator on images.
pub fn segment(image: &Image, grid: (usize, usize)) -> Result<PatchSet<f32>> {
    segment_array(image.view(), grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub c3: usize,
    pub hidden: usize,
    /// `(ph, pw, C)` reconstructed per feature vector.
    pub patch: (usize, usize, usize),
}

impl DecoderConfig {
    /// Decoder geometry for an encoder; `hidden` defaults to `2 · c3`.
    pub fn for_encoder(encoder: &EncoderConfig, hidden: Option<usize>) -> Self {
        let p = encoder.patch_px();
        DecoderConfig {
            c3: encoder.c3,
            hidden: hidden.unwrap_or(2 * encoder.c3),
            patch: (p, p, 3),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.patch.0 * self.patch.1 * self.patch.2
    }

    pub fn validate(&self) -> Result<()> {
        if self.c3 == 0 || self.hidden == 0 || self.out_dim() == 0 {
            return Err(Error::config("decoder.hidden", "decoder widths must be positive"));
        }
        Ok(())
    }
}

pub struct DecoderCache {
    c1: ConvCache,
    hidden: Array3<f32>,
    c2: ConvCache,
    grid: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
    store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
}

impl Decoder {
    pub fn build(config: &DecoderConfig, seed: u64) -> Result<Decoder> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g = ParamGroup::Decoder;
        let conv1 = Conv2d::new(&mut store, "decoder.0", g, config.c3, config.hidden, 1, 1, 0, true, &mut rng);
        let conv2 = Conv2d::new(&mut store, "decoder.1", g, config.hidden, config.out_dim(), 1, 1, 0, true, &mut rng);
        Ok(Decoder {
            config: config.clone(),
            store,
            conv1,
            conv2,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Places per-cell output vectors `(out_dim, Gh, Gw)` into their patches.
    fn assemble(&self, out: &Array3<f32>) -> Image {
        let (_, gh, gw) = out.dim();
        let (ph, pw, c) = self.config.patch;
        Image::from_fn(gh * ph, gw * pw, c, |(y, x, ch)| {
            let (i, py) = (y / ph, y % ph);
            let (j, px) = (x / pw, x % pw);
            out[[(py * pw + px) * c + ch, i, j]]
        })
    }

    fn disassemble(&self, d_image: &Image, grid: (usize, usize)) -> Array3<f32> {
        let (gh, gw) = grid;
        let (ph, pw, c) = self.config.patch;
        let d = d_image.data();
        Array3::from_shape_fn((self.config.out_dim(), gh, gw), |(k, i, j)| {
            let (py, rest) = (k / (pw * c), k % (pw * c));
            let (px, ch) = (rest / c, rest % c);
            d[[i * ph + py, j * pw + px, ch]]
        })
    }

    fn check(&self, channels: usize) -> Result<()> {
        if channels != self.config.c3 {
            return Err(Error::Input(format!(
                "decoder expects {}-channel features, got {channels}",
                self.config.c3
            )));
        }
        Ok(())
    }

    pub fn forward_train(&self, features_chw: &Array3<f32>) -> Result<(Image, DecoderCache)> {
        let (c, gh, gw) = features_chw.dim();
        self.check(c)?;
        let (mut hidden, c1) = self.conv1.forward(&self.store, features_chw);
        relu(&mut hidden);
        let (out, c2) = self.conv2.forward(&self.store, &hidden);
        Ok((
            self.assemble(&out),
            DecoderCache {
                c1,
                hidden,
                c2,
                grid: (gh, gw),
            },
        ))
    }

    /// Reconstruction `Î` from a feature map.
    pub fn decode(&self, features: &FeatureMap) -> Result<Image> {
        self.check(features.channels())?;
        Ok(self.forward_train(&features.to_chw())?.0)
    }

    /// Accumulates parameter gradients and returns `∂ℓ/∂R` channel-first.
    pub fn backward(&self, cache: &DecoderCache, d_image: &Image, grads: &mut Grads) -> Array3<f32> {
        let d_out = self.disassemble(d_image, cache.grid);
        let d = self.conv2.backward(&self.store, &cache.c2, &d_out, grads);
        let d = relu_backward(&cache.hidden, &d);
        self.conv1.backward(&self.store, &cache.c1, &d, grads)
    }

    pub(crate) fn from_parts(config: DecoderConfig, store: ParamStore) -> Result<Decoder> {
        let mut dec = Decoder::build(&config, 0)?;
        if dec.store.len() != store.len() {
            return Err(Error::Format("decoder tensor count mismatch".into()));
        }
        for (dst, src) in dec.store.iter_mut().zip(store.iter()) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Format(format!("decoder tensor mismatch at `{}`", src.name)));
            }
            dst.value.clone_from(&src.value);
        }
        Ok(dec)
    }
}
