//! End-to-end training of encoder and decoder, and memory-bank extraction.
//!
//! Every sample in a batch is augmented with a seed derived from
//! `(seed, epoch, image index)`, pushed through encoder → decoder → loss, and
//! back-propagated into its own gradient buffers. Buffers are then summed in
//! batch order, so results do not depend on how many worker threads ran.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::bank::MemoryBank;
use crate::checkpoint::Checkpoint;
use crate::decoder::{segment, Decoder, DecoderConfig};
use crate::encoder::{Encoder, EncoderConfig, FeatureMap, Init};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{patch_ae_loss_grad, LossConfig};
use crate::nn::{Grads, ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    #[default]
    AdaptiveMoments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning-rate multiplier for pretrained backbone stages.
    pub backbone_lr_scale: f64,
    pub freeze_backbone: bool,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Run samples sequentially on the calling thread.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-4,
            backbone_lr_scale: 0.1,
            freeze_backbone: false,
            seed: 0,
            optimizer: OptimizerKind::AdaptiveMoments,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("training.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("training.learning_rate", "must be finite and non-negative"));
        }
        if !(self.backbone_lr_scale > 0.0 && self.backbone_lr_scale <= 1.0) {
            return Err(Error::config("training.backbone_lr_scale", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("training.momentum", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("training.beta1", "Adam betas must lie in [0, 1)"));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::config("training.adam_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Everything needed to build and train a model from scratch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainSetup {
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub decoder_hidden: Option<usize>,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

/// Mean loss per epoch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub epoch_means: Vec<f64>,
}

impl LossHistory {
    /// `epoch,mean_loss` CSV with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (e, l) in self.epoch_means.iter().enumerate() {
            writeln!(out, "{},{}", e + 1, l).unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for augmenting image `index` in `epoch`.
pub fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch as u64) ^ index as u64)
}

struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

struct Optimizer {
    kind: OptimizerKind,
    config: TrainConfig,
    step: i32,
    states: Vec<AdamState>,
}

impl Optimizer {
    fn new(config: &TrainConfig, stores: &[&ParamStore]) -> Self {
        let zeros = |s: &ParamStore| s.iter().map(|p| vec![0.0f32; p.len()]).collect::<Vec<_>>();
        Optimizer {
            kind: config.optimizer,
            config: config.clone(),
            step: 0,
            states: stores.iter().map(|s| AdamState { m: zeros(s), v: zeros(s) }).collect(),
        }
    }

    /// Applies one update. `lr_for` gives the learning rate of a parameter
    /// group, or `None` to leave the group untouched.
    fn step(&mut self, stores: &mut [&mut ParamStore], grads: &[Grads], lr_for: impl Fn(ParamGroup) -> Option<f64>) {
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let bias1 = 1.0 - b1.powi(self.step);
        let bias2 = 1.0 - b2.powi(self.step);
        for ((store, g), state) in stores.iter_mut().zip(grads).zip(self.states.iter_mut()) {
            for (k, p) in store.iter_mut().enumerate() {
                let Some(lr) = lr_for(p.group).filter(|_| p.trainable) else {
                    continue;
                };
                let lr = lr as f32;
                let (m, v) = (&mut state.m[k], &mut state.v[k]);
                match self.kind {
                    OptimizerKind::AdaptiveMoments => {
                        let eps = c.adam_eps as f32;
                        for (((w, &gi), m), v) in p.value.iter_mut().zip(&g.values[k]).zip(m.iter_mut()).zip(v.iter_mut()) {
                            *m = b1 * *m + (1.0 - b1) * gi;
                            *v = b2 * *v + (1.0 - b2) * gi * gi;
                            *w -= lr * (*m / bias1) / ((*v / bias2).sqrt() + eps);
                        }
                    }
                    OptimizerKind::SgdMomentum => {
                        let mu = c.momentum as f32;
                        for ((w, &gi), m) in p.value.iter_mut().zip(&g.values[k]).zip(m.iter_mut()) {
                            *m = mu * *m + gi;
                            *w -= lr * *m;
                        }
                    }
                }
            }
        }
    }
}

struct SampleResult {
    loss: f64,
    enc: Grads,
    dec: Grads,
}

fn sample_step(
    model: &Checkpoint,
    image: &Image,
    aug: &AugmentConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    through_backbone: bool,
) -> Result<SampleResult> {
    let sample = augment(image, aug, seed)?;
    let input = model.encoder.preprocess(&sample.image)?;
    let (features, enc_cache) = model.encoder.forward_train(&input);
    let (recon, dec_cache) = model.decoder.forward_train(&features)?;
    let grid = model.encoder.grid();
    let recon_p = segment(&recon, grid)?.map(|&v| v as f64);
    let target_p = segment(&sample.image, grid)?.map(|&v| v as f64);
    let (loss, d_patches) = patch_ae_loss_grad(&recon_p, &target_p, loss_cfg)?;
    let d_recon = Image::new(d_patches.map(|&v| v as f32).reassemble());

    let mut dec = model.decoder.params().zero_grads();
    let d_features = model.decoder.backward(&dec_cache, &d_recon, &mut dec);
    let mut enc = model.encoder.params().zero_grads();
    model.encoder.backward(&enc_cache, &d_features, &mut enc, through_backbone);
    Ok(SampleResult { loss, enc, dec })
}

pub struct TrainOutput {
    pub model: Checkpoint,
    pub history: LossHistory,
}

/// Builds a fresh model from `setup` and trains it on `images`.
pub fn train(images: &[Image], setup: &TrainSetup, init: Init) -> Result<TrainOutput> {
    let encoder = Encoder::build(&setup.encoder, init, splitmix(setup.train.seed))?;
    let dec_cfg = DecoderConfig::for_encoder(&setup.encoder, setup.decoder_hidden);
    let decoder = Decoder::build(&dec_cfg, splitmix(setup.train.seed ^ 1))?;
    let mut model = Checkpoint { encoder, decoder };
    let history = fit(&mut model, images, setup)?;
    Ok(TrainOutput { model, history })
}

/// Trains `model` in place and returns the per-epoch mean losses.
pub fn fit(model: &mut Checkpoint, images: &[Image], setup: &TrainSetup) -> Result<LossHistory> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.augment.validate()?;
    setup.loss.validate()?;
    if images.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for (i, img) in images.iter().enumerate() {
        if !img.is_unit_range() {
            return Err(Error::Input(format!("training image {i} has values outside [0, 1]")));
        }
    }

    let through_backbone = !cfg.freeze_backbone;
    let backbone_scale = if model.encoder.is_pretrained() { cfg.backbone_lr_scale } else { 1.0 };
    let lr = cfg.learning_rate;
    let lr_for = move |g: ParamGroup| match g {
        ParamGroup::Backbone if !through_backbone => None,
        ParamGroup::Backbone => Some(lr * backbone_scale),
        ParamGroup::Head | ParamGroup::Decoder => Some(lr),
    };
    let mut optimizer = Optimizer::new(cfg, &[model.encoder.params(), model.decoder.params()]);

    let mut history = LossHistory::default();
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x5eed) ^ epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let run = |&idx: &usize| {
                sample_step(
                    model,
                    &images[idx],
                    &setup.augment,
                    &setup.loss,
                    sample_seed(cfg.seed, epoch, idx),
                    through_backbone,
                )
            };
            let results: Vec<SampleResult> = if cfg.deterministic {
                batch.iter().map(run).collect::<Result<_>>()?
            } else {
                batch.par_iter().map(run).collect::<Result<_>>()?
            };

            let mut enc = model.encoder.params().zero_grads();
            let mut dec = model.decoder.params().zero_grads();
            let mut batch_loss = 0.0;
            for r in &results {
                batch_loss += r.loss;
                enc.add_assign(&r.enc);
                dec.add_assign(&r.dec);
            }
            let inv = 1.0 / batch.len() as f32;
            enc.scale(inv);
            dec.scale(inv);
            let grad_norm = (enc.sum_sq() + dec.sum_sq()).sqrt();
            if !batch_loss.is_finite() || !grad_norm.is_finite() {
                let losses: Vec<String> = results.iter().map(|r| format!("{:.4e}", r.loss)).collect();
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {} batch {b}: sample losses [{}], gradient norm {grad_norm:.4e}, images {batch:?}",
                    epoch + 1,
                    losses.join(", ")
                )));
            }
            epoch_total += batch_loss;
            let Checkpoint { encoder, decoder } = model;
            optimizer.step(&mut [encoder.params_mut(), decoder.params_mut()], &[enc, dec], lr_for);
        }
        let mean = epoch_total / images.len() as f64;
        log::info!("epoch {}/{}: mean loss {mean:.6}", epoch + 1, cfg.epochs);
        history.epoch_means.push(mean);
    }
    Ok(history)
}

/// Encodes images in order, in parallel unless `deterministic`.
pub fn encode_all(encoder: &Encoder, images: &[Image], deterministic: bool) -> Result<Vec<FeatureMap>> {
    if deterministic {
        images.iter().map(|img| encoder.encode(img)).collect()
    } else {
        images.par_iter().map(|img| encoder.encode(img)).collect()
    }
}

/// Every grid vector of every (un-augmented) normal image, image by image.
pub fn extract_normal_bank(encoder: &Encoder, images: &[Image]) -> Result<MemoryBank> {
    if images.is_empty() {
        return Err(Error::Input("cannot build a memory bank from an empty dataset".into()));
    }
    let maps = encode_all(encoder, images, false)?;
    MemoryBank::from_feature_maps(&maps, encoder.config().hash())
}
