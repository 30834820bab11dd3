//! Image → spatial representation.
//!
//! Four backbone stages, then the outputs of two of them (by default the
//! third and fourth) are fused: the deeper map is upsampled to the
//! shallower one's grid, both are concatenated channel-wise (`c1 + c2`), and
//! two 1×1 convolution + ReLU layers compress the result to `c3` channels.
//! Grid cell `(i, j)` of the output corresponds to the pixel block
//! `[i·ph, (i+1)·ph) × [j·pw, (j+1)·pw)` of the input.

use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{
    relu, relu_backward, split_channels, upsample, upsample_backward, Bottleneck, BottleneckCache, Conv2d, ConvCache,
    FrozenBatchNorm, Grads, MaxPool2d, MaxPoolCache, ParamGroup, ParamStore, UpsampleMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Four 3×3 stride-2 conv + ReLU stages, randomly initialized.
    ScratchTiny,
    WideResnet50_2,
    WideResnet101_2,
}

impl BackboneKind {
    /// Bottleneck blocks per residual layer; `None` for scratch-tiny.
    fn residual_layers(self) -> Option<[usize; 3]> {
        match self {
            BackboneKind::ScratchTiny => None,
            BackboneKind::WideResnet50_2 => Some([3, 4, 6]),
            BackboneKind::WideResnet101_2 => Some([3, 4, 23]),
        }
    }

    /// ImageNet statistics for residual backbones, identity otherwise.
    pub fn normalization(self) -> ([f32; 3], [f32; 3]) {
        match self {
            BackboneKind::ScratchTiny => ([0.0; 3], [1.0; 3]),
            _ => ([0.485, 0.456, 0.406], [0.229, 0.224, 0.225]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Conv1,
    Conv2,
    Conv3,
    Conv4,
}

impl Stage {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    Pretrained,
    #[default]
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub backbone: BackboneKind,
    pub fuse_layers: [Stage; 2],
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    /// Width of the first compression layer; `(c1 + c2) / 2` when unset.
    pub head_hidden: Option<usize>,
    pub upsample: UpsampleMode,
    pub init: Init,
    /// Safetensors file with backbone weights, required for `init = "pretrained"`.
    pub pretrained_weights: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::scratch_tiny()
    }
}

impl EncoderConfig {
    pub fn scratch_tiny() -> Self {
        EncoderConfig {
            input_size: 64,
            backbone: BackboneKind::ScratchTiny,
            fuse_layers: [Stage::Conv3, Stage::Conv4],
            c1: 32,
            c2: 64,
            c3: 48,
            head_hidden: None,
            upsample: UpsampleMode::Nearest,
            init: Init::Random,
            pretrained_weights: None,
        }
    }

    /// Wide residual network layout fused at its 512- and 1024-channel stages.
    pub fn wide_resnet(backbone: BackboneKind, weights: Option<PathBuf>) -> Self {
        EncoderConfig {
            input_size: 224,
            backbone,
            fuse_layers: [Stage::Conv3, Stage::Conv4],
            c1: 512,
            c2: 1024,
            c3: 1024,
            head_hidden: None,
            upsample: UpsampleMode::Nearest,
            init: Init::Pretrained,
            pretrained_weights: weights,
        }
    }

    pub fn hidden(&self) -> usize {
        self.head_hidden.unwrap_or((self.c1 + self.c2).div_ceil(2))
    }

    /// Channel width of each of the four backbone stages.
    pub fn stage_widths(&self) -> [usize; 4] {
        match self.backbone {
            BackboneKind::ScratchTiny => {
                let [a, b] = self.fuse_layers.map(Stage::index);
                let stem = (self.c1 / 2).max(1);
                std::array::from_fn(|s| match s {
                    s if s < a => stem,
                    s if s < b => self.c1,
                    _ => self.c2,
                })
            }
            _ => [64, 256, 512, 1024],
        }
    }

    /// Cumulative stride at the output of each stage.
    pub fn stage_strides(&self) -> [usize; 4] {
        match self.backbone {
            BackboneKind::ScratchTiny => [2, 4, 8, 16],
            _ => [4, 4, 8, 16],
        }
    }

    pub fn patch_px(&self) -> usize {
        self.stage_strides()[self.fuse_layers[0].index()]
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.input_size / self.patch_px();
        (g, g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c1 == 0 || self.c2 == 0 || self.c3 == 0 {
            return Err(Error::config("encoder.c3", "channel widths must be positive"));
        }
        if self.c1 + self.c2 <= self.c3 {
            return Err(Error::config(
                "encoder.c3",
                format!("compression requires c1 + c2 > c3, got {} + {} <= {}", self.c1, self.c2, self.c3),
            ));
        }
        let [a, b] = self.fuse_layers;
        if a >= b {
            return Err(Error::config("encoder.fuse_layers", "first fused stage must precede the second"));
        }
        let widths = self.stage_widths();
        if widths[a.index()] != self.c1 || widths[b.index()] != self.c2 {
            return Err(Error::config(
                "encoder.c1",
                format!(
                    "backbone stages {a:?}/{b:?} have {}/{} channels but c1/c2 = {}/{}",
                    widths[a.index()],
                    widths[b.index()],
                    self.c1,
                    self.c2
                ),
            ));
        }
        let stride = self.patch_px();
        if self.input_size == 0 || !self.input_size.is_multiple_of(stride) {
            return Err(Error::config(
                "encoder.input_size",
                format!("{} is not divisible by the fused stage stride {stride}", self.input_size),
            ));
        }
        if self.head_hidden == Some(0) {
            return Err(Error::config("encoder.head_hidden", "must be positive"));
        }
        Ok(())
    }

    /// SHA-256 over the architecture fields (the weights path is excluded).
    pub fn hash(&self) -> [u8; 32] {
        let mut canonical = self.clone();
        canonical.pretrained_weights = None;
        canonical.head_hidden = Some(self.hidden());
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&bytes).into()
    }
}

/// The representation: `Gh × Gw × c3`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    data: Array3<f32>,
    patch_px: (usize, usize),
}

impl FeatureMap {
    pub fn new(data: Array3<f32>, patch_px: (usize, usize)) -> Self {
        FeatureMap { data, patch_px }
    }

    /// From a channel-first `(c3, Gh, Gw)` activation.
    pub fn from_chw(chw: &Array3<f32>, patch_px: (usize, usize)) -> Self {
        let data = chw.view().permuted_axes([1, 2, 0]).as_standard_layout().into_owned();
        FeatureMap { data, patch_px }
    }

    pub fn to_chw(&self) -> Array3<f32> {
        self.data.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn grid(&self) -> (usize, usize) {
        let (gh, gw, _) = self.data.dim();
        (gh, gw)
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn patch_px(&self) -> (usize, usize) {
        self.patch_px
    }

    pub fn vector(&self, i: usize, j: usize) -> ArrayView1<'_, f32> {
        self.data.slice(ndarray::s![i, j, ..])
    }

    /// Rows in grid row-major order.
    pub fn vectors(&self) -> impl Iterator<Item = ArrayView1<'_, f32>> {
        self.data.lanes(Axis(2)).into_iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Block {
    /// Convolution, optional frozen batch norm, ReLU.
    ConvRelu { conv: Conv2d, bn: Option<FrozenBatchNorm> },
    MaxPool(MaxPool2d),
    Bottleneck(Box<Bottleneck>),
}

enum BlockCache {
    ConvRelu { conv: ConvCache, out: Array3<f32> },
    MaxPool(MaxPoolCache),
    Bottleneck(Box<BottleneckCache>),
}

impl Block {
    fn forward(&self, store: &ParamStore, x: &Array3<f32>) -> (Array3<f32>, BlockCache) {
        match self {
            Block::ConvRelu { conv, bn } => {
                let (mut y, cache) = conv.forward(store, x);
                if let Some(bn) = bn {
                    y = bn.forward(store, &y);
                }
                relu(&mut y);
                (y.clone(), BlockCache::ConvRelu { conv: cache, out: y })
            }
            Block::MaxPool(pool) => {
                let (y, cache) = pool.forward(x);
                (y, BlockCache::MaxPool(cache))
            }
            Block::Bottleneck(b) => {
                let (y, cache) = b.forward(store, x);
                (y, BlockCache::Bottleneck(Box::new(cache)))
            }
        }
    }

    fn backward(&self, store: &ParamStore, cache: &BlockCache, dy: &Array3<f32>, grads: &mut Grads) -> Array3<f32> {
        match (self, cache) {
            (Block::ConvRelu { conv, bn }, BlockCache::ConvRelu { conv: cc, out }) => {
                let mut d = relu_backward(out, dy);
                if let Some(bn) = bn {
                    d = bn.backward(store, &d);
                }
                conv.backward(store, cc, &d, grads)
            }
            (Block::MaxPool(pool), BlockCache::MaxPool(c)) => pool.backward(c, dy),
            (Block::Bottleneck(b), BlockCache::Bottleneck(c)) => b.backward(store, c, dy, grads),
            _ => unreachable!("cache does not match block"),
        }
    }
}

pub struct EncoderCache {
    stages: Vec<Vec<BlockCache>>,
    shallow_hw: (usize, usize),
    deep_hw: (usize, usize),
    head0: ConvCache,
    hidden: Array3<f32>,
    head1: ConvCache,
    out: Array3<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    store: ParamStore,
    stages: Vec<Vec<Block>>,
    head: [Conv2d; 2],
    pretrained: bool,
}

impl Encoder {
    /// Builds the encoder. `Init::Pretrained` loads backbone weights from
    /// `config.pretrained_weights` and fails if they are missing; the
    /// compression head is always randomly initialized from `seed`.
    pub fn build(config: &EncoderConfig, init: Init, seed: u64) -> Result<Encoder> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = config.stage_widths();
        let g = ParamGroup::Backbone;

        let stages = match config.backbone.residual_layers() {
            None => {
                let mut in_c = 3;
                (0..4)
                    .map(|s| {
                        let conv = Conv2d::new(&mut store, &format!("stage{}.conv", s + 1), g, in_c, widths[s], 3, 2, 1, true, &mut rng);
                        in_c = widths[s];
                        vec![Block::ConvRelu { conv, bn: None }]
                    })
                    .collect::<Vec<_>>()
            }
            Some(depths) => {
                let stem = vec![
                    Block::ConvRelu {
                        conv: Conv2d::new(&mut store, "conv1", g, 3, 64, 7, 2, 3, false, &mut rng),
                        bn: Some(FrozenBatchNorm::new(&mut store, "bn1", g, 64)),
                    },
                    Block::MaxPool(MaxPool2d { kernel: 3, stride: 2, pad: 1 }),
                ];
                let mut stages = vec![stem];
                let mut in_c = 64;
                for (l, &depth) in depths.iter().enumerate() {
                    // Wide variant: bottleneck width is twice the standard 64·2^l.
                    let width = 128 << l;
                    let out_c = 256 << l;
                    let stride = if l == 0 { 1 } else { 2 };
                    let blocks = (0..depth)
                        .map(|i| {
                            let b = Bottleneck::new(
                                &mut store,
                                &format!("layer{}.{i}", l + 1),
                                g,
                                if i == 0 { in_c } else { out_c },
                                width,
                                out_c,
                                if i == 0 { stride } else { 1 },
                                &mut rng,
                            );
                            Block::Bottleneck(Box::new(b))
                        })
                        .collect();
                    stages.push(blocks);
                    in_c = out_c;
                }
                stages
            }
        };

        let hidden = config.hidden();
        let head = [
            Conv2d::new(&mut store, "head.0", ParamGroup::Head, config.c1 + config.c2, hidden, 1, 1, 0, true, &mut rng),
            Conv2d::new(&mut store, "head.1", ParamGroup::Head, hidden, config.c3, 1, 1, 0, true, &mut rng),
        ];

        let mut encoder = Encoder {
            config: config.clone(),
            store,
            stages,
            head,
            pretrained: false,
        };
        if init == Init::Pretrained {
            let path = config.pretrained_weights.as_deref().ok_or_else(|| Error::WeightLoad {
                path: PathBuf::new(),
                message: "init = pretrained but encoder.pretrained_weights is not set".into(),
            })?;
            encoder.load_backbone_weights(path)?;
            encoder.pretrained = true;
        }
        Ok(encoder)
    }

    /// Copies every backbone tensor (trainable weights and batch-norm
    /// buffers) from a safetensors file using torchvision parameter names.
    pub fn load_backbone_weights(&mut self, path: &Path) -> Result<()> {
        let load_err = |message: String| Error::WeightLoad {
            path: path.to_path_buf(),
            message,
        };
        let bytes = std::fs::read(path).map_err(|e| load_err(e.to_string()))?;
        let tensors = SafeTensors::deserialize(&bytes).map_err(|e| load_err(e.to_string()))?;
        for param in self.store.iter_mut().filter(|p| p.group == ParamGroup::Backbone) {
            let view = tensors
                .tensor(&param.name)
                .map_err(|_| load_err(format!("tensor `{}` not found", param.name)))?;
            if view.shape() != param.shape.as_slice() {
                return Err(load_err(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    param.name,
                    view.shape(),
                    param.shape
                )));
            }
            let data = view.data();
            param.value = match view.dtype() {
                Dtype::F32 => data.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
                Dtype::F64 => data
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()) as f32)
                    .collect(),
                other => return Err(load_err(format!("tensor `{}` has unsupported dtype {other:?}", param.name))),
            };
        }
        Ok(())
    }

    /// Writes the backbone tensors to a safetensors file that
    /// [`Encoder::load_backbone_weights`] accepts.
    pub fn save_backbone_weights(&self, path: &Path) -> Result<()> {
        let owned: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .store
            .iter()
            .filter(|p| p.group == ParamGroup::Backbone)
            .map(|p| (p.name.clone(), p.shape.clone(), p.value.iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = owned
            .iter()
            .map(|(name, shape, data)| {
                safetensors::tensor::TensorView::new(Dtype::F32, shape.clone(), data)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Format(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize_to_file(views, None, path).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.config.grid()
    }

    pub fn patch_px(&self) -> (usize, usize) {
        let p = self.config.patch_px();
        (p, p)
    }

    /// Resize-free preprocessing: checks the shape and standardizes with the
    /// backbone's canonical statistics.
    pub fn preprocess(&self, image: &Image) -> Result<Array3<f32>> {
        let (h, w, c) = image.shape();
        let s = self.config.input_size;
        if h != s || w != s || c != 3 {
            return Err(Error::Input(format!("expected a {s}×{s}×3 image, got {h}×{w}×{c}")));
        }
        let (mean, std) = self.config.backbone.normalization();
        Ok(image.to_chw_standardized(&mean, &std))
    }

    fn run(&self, x: &Array3<f32>, keep_cache: bool) -> (Array3<f32>, Option<EncoderCache>) {
        let [a, b] = self.config.fuse_layers.map(Stage::index);
        let mut act = x.clone();
        let mut shallow = None;
        let mut stage_caches = Vec::new();
        for (s, stage) in self.stages.iter().enumerate().take(b + 1) {
            let mut caches = Vec::new();
            for block in stage {
                let (y, c) = block.forward(&self.store, &act);
                act = y;
                if keep_cache {
                    caches.push(c);
                }
            }
            stage_caches.push(caches);
            if s == a {
                shallow = Some(act.clone());
            }
        }
        let shallow = shallow.expect("fused stage reached");
        let (_, sh, sw) = shallow.dim();
        let (_, dh, dw) = act.dim();
        let up = upsample(&act, sh, sw, self.config.upsample);
        let cat = crate::nn::concat_channels(&shallow, &up);
        let (mut hidden, head0) = self.head[0].forward(&self.store, &cat);
        relu(&mut hidden);
        let (mut out, head1) = self.head[1].forward(&self.store, &hidden);
        relu(&mut out);
        let cache = keep_cache.then(|| EncoderCache {
            stages: stage_caches,
            shallow_hw: (sh, sw),
            deep_hw: (dh, dw),
            head0,
            hidden,
            head1,
            out: out.clone(),
        });
        (out, cache)
    }

    /// Channel-first forward pass on a preprocessed input.
    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        self.run(x, false).0
    }

    pub fn forward_train(&self, x: &Array3<f32>) -> (Array3<f32>, EncoderCache) {
        let (out, cache) = self.run(x, true);
        (out, cache.expect("cache requested"))
    }

    /// Accumulates parameter gradients for `d_out = ∂ℓ/∂R` (channel-first).
    /// With `through_backbone = false` only the compression head receives
    /// gradients.
    pub fn backward(&self, cache: &EncoderCache, d_out: &Array3<f32>, grads: &mut Grads, through_backbone: bool) {
        let [a, b] = self.config.fuse_layers.map(Stage::index);
        let d = relu_backward(&cache.out, d_out);
        let d = self.head[1].backward(&self.store, &cache.head1, &d, grads);
        let d = relu_backward(&cache.hidden, &d);
        let d_cat = self.head[0].backward(&self.store, &cache.head0, &d, grads);
        if !through_backbone {
            return;
        }
        let (d_shallow, d_up) = split_channels(&d_cat, self.config.c1);
        let mut d_act = upsample_backward(&d_up, cache.deep_hw.0, cache.deep_hw.1, self.config.upsample);
        debug_assert_eq!((d_shallow.dim().1, d_shallow.dim().2), cache.shallow_hw);
        for s in (0..=b).rev() {
            if s == a {
                d_act += &d_shallow;
            }
            for (block, c) in self.stages[s].iter().zip(&cache.stages[s]).rev() {
                d_act = block.backward(&self.store, c, &d_act, grads);
            }
        }
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureMap> {
        let x = self.preprocess(image)?;
        Ok(FeatureMap::from_chw(&self.forward(&x), self.patch_px()))
    }

    pub(crate) fn from_parts(config: EncoderConfig, store: ParamStore, pretrained: bool) -> Result<Encoder> {
        let mut enc = Encoder::build(&config, Init::Random, 0)?;
        if enc.store.len() != store.len() {
            return Err(Error::Format(format!(
                "encoder expects {} tensors, checkpoint has {}",
                enc.store.len(),
                store.len()
            )));
        }
        for (dst, src) in enc.store.iter_mut().zip(store.iter()) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Format(format!(
                    "tensor mismatch: expected `{}` {:?}, found `{}` {:?}",
                    dst.name, dst.shape, src.name, src.shape
                )));
            }
            dst.value.clone_from(&src.value);
        }
        enc.pretrained = pretrained;
        Ok(enc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_params(i: usize, o: usize, k: usize, bias: bool) -> usize {
        i * o * k * k + if bias { o } else { 0 }
    }

    #[test]
    fn scratch_tiny_parameter_count_is_closed_form() {
        let cfg = EncoderConfig::scratch_tiny();
        let enc = Encoder::build(&cfg, Init::Random, 0).unwrap();
        // stage widths 16, 16, 32, 64; head 96 → 48 → 48
        let expected = conv_params(3, 16, 3, true)
            + conv_params(16, 16, 3, true)
            + conv_params(16, 32, 3, true)
            + conv_params(32, 64, 3, true)
            + conv_params(96, 48, 1, true)
            + conv_params(48, 48, 1, true);
        assert_eq!(expected, 448 + 2320 + 4640 + 18496 + 4656 + 2352);
        assert_eq!(enc.num_params(), expected);
    }

    #[test]
    fn wide_resnet_parameter_count_matches_reference() {
        // Backbone through layer3 of wide_resnet50_2 (torchvision), counted
        // with batch-norm buffers, i.e. the tensors a state dict carries for
        // those layers minus num_batches_tracked.
        let cfg = EncoderConfig {
            c3: 1024,
            ..EncoderConfig::wide_resnet(BackboneKind::WideResnet50_2, None)
        };
        let enc = Encoder::build(&cfg, Init::Random, 0).unwrap();
        let bn = |c: usize| 4 * c;
        let bottleneck = |i: usize, w: usize, o: usize, ds: bool| {
            conv_params(i, w, 1, false) + bn(w) + conv_params(w, w, 3, false) + bn(w) + conv_params(w, o, 1, false) + bn(o)
                + if ds { conv_params(i, o, 1, false) + bn(o) } else { 0 }
        };
        let layer = |n: usize, i: usize, w: usize, o: usize| bottleneck(i, w, o, true) + (n - 1) * bottleneck(o, w, o, false);
        let backbone = conv_params(3, 64, 7, false) + bn(64) + layer(3, 64, 128, 256) + layer(4, 256, 256, 512) + layer(6, 512, 512, 1024);
        let head = conv_params(1536, 768, 1, true) + conv_params(768, 1024, 1, true);
        assert_eq!(enc.num_params(), backbone + head);
    }

    #[test]
    fn compression_must_reduce_dimension() {
        let cfg = EncoderConfig {
            c3: 1536,
            ..EncoderConfig::wide_resnet(BackboneKind::WideResnet101_2, None)
        };
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "encoder.c3"), "{err}");
        let cfg = EncoderConfig { c3: 96, ..EncoderConfig::scratch_tiny() };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig { c3: 95, ..EncoderConfig::scratch_tiny() };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = EncoderConfig { input_size: 60, ..EncoderConfig::scratch_tiny() };
        assert!(matches!(cfg.validate(), Err(Error::Config { ref field, .. }) if field == "encoder.input_size"));
    }

    #[test]
    fn grid_follows_stride() {
        let cfg = EncoderConfig::scratch_tiny();
        let enc = Encoder::build(&cfg, Init::Random, 1).unwrap();
        let img = Image::from_fn(64, 64, 3, |(y, x, c)| ((x + 2 * y + c) % 7) as f32 / 7.0);
        let fm = enc.encode(&img).unwrap();
        assert_eq!(fm.grid(), (8, 8));
        assert_eq!(fm.patch_px(), (8, 8));
        assert_eq!(fm.channels(), 48);
        assert!(fm.data().iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_eq!(enc.encode(&img).unwrap(), fm);

        let cfg = EncoderConfig {
            fuse_layers: [Stage::Conv4, Stage::Conv4],
            ..EncoderConfig::scratch_tiny()
        };
        assert!(cfg.validate().is_err());

        // Stride-8 fused stage at 224 px.
        let cfg = EncoderConfig::wide_resnet(BackboneKind::WideResnet50_2, None);
        assert_eq!(cfg.grid(), (28, 28));
        let cfg = EncoderConfig {
            input_size: 224,
            fuse_layers: [Stage::Conv3, Stage::Conv4],
            c1: 64,
            c2: 64,
            c3: 32,
            ..EncoderConfig::scratch_tiny()
        };
        // scratch-tiny stage widths are [32, 32, 64, 64] here
        cfg.validate().unwrap();
        assert_eq!(cfg.grid(), (28, 28));
    }

    #[test]
    fn wrong_input_shape_is_an_input_error() {
        let enc = Encoder::build(&EncoderConfig::scratch_tiny(), Init::Random, 1).unwrap();
        let err = enc.encode(&Image::zeros(32, 32, 3)).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn missing_pretrained_weights_is_a_load_error() {
        let cfg = EncoderConfig::scratch_tiny();
        assert!(matches!(Encoder::build(&cfg, Init::Pretrained, 0), Err(Error::WeightLoad { .. })));
        let cfg = EncoderConfig {
            pretrained_weights: Some("/nonexistent/wrn.safetensors".into()),
            ..EncoderConfig::scratch_tiny()
        };
        assert!(matches!(Encoder::build(&cfg, Init::Pretrained, 0), Err(Error::WeightLoad { .. })));
    }

    #[test]
    fn pretrained_init_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.safetensors");
        let donor = Encoder::build(&EncoderConfig::scratch_tiny(), Init::Random, 99).unwrap();
        donor.save_backbone_weights(&path).unwrap();
        let cfg = EncoderConfig {
            init: Init::Pretrained,
            pretrained_weights: Some(path),
            ..EncoderConfig::scratch_tiny()
        };
        let a = Encoder::build(&cfg, Init::Pretrained, 5).unwrap();
        let b = Encoder::build(&cfg, Init::Pretrained, 5).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(a.is_pretrained());
        for (p, q) in a.params().iter().zip(donor.params().iter()) {
            if p.group == ParamGroup::Backbone {
                assert_eq!(p.value, q.value);
            }
        }
    }

    #[test]
    fn hash_ignores_weights_path() {
        let a = EncoderConfig::scratch_tiny();
        let b = EncoderConfig {
            pretrained_weights: Some("x".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = EncoderConfig { c3: 40, ..a.clone() };
        assert_ne!(a.hash(), c.hash());
    }
}
