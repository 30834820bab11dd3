//! Hybrid patch-wise reconstruction loss.
//!
//! For reconstruction patches `r_p` and target patches `t_p`:
//!
//! ```text
//! ℓ = α Σ_p ‖norm(r_p) − norm(t_p)‖₂ + (1 − α) Σ_p ‖r_p − t_p‖₂
//! ```
//!
//! where `norm(x) = (x − mean(x)) / sqrt(var(x) + eps)` over the patch
//! entries. Norms are unsquared unless [`Distance::SquaredL2`] is selected.
//! All arithmetic is in `f64`.

use serde::{Deserialize, Serialize};

use crate::decoder::PatchSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    L2,
    SquaredL2,
}

/// Which entries share one mean/variance in `norm(·)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormScope {
    #[default]
    AllEntries,
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub norm_eps: f64,
    pub distance: Distance,
    pub norm_scope: NormScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            norm_eps: 1e-6,
            distance: Distance::L2,
            norm_scope: NormScope::AllEntries,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("loss.alpha", "must lie in [0, 1]"));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::config("loss.norm_eps", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Index groups sharing normalization statistics for a flattened `(.., C)` patch.
fn groups(len: usize, channels: usize, scope: NormScope) -> Vec<Vec<usize>> {
    match scope {
        NormScope::AllEntries => vec![(0..len).collect()],
        NormScope::PerChannel => (0..channels).map(|c| (c..len).step_by(channels).collect()).collect(),
    }
}

struct Normalized {
    values: Vec<f64>,
    inv_std: Vec<f64>,
}

fn normalize(x: &[f64], groups: &[Vec<usize>], eps: f64) -> Normalized {
    let mut values = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(groups.len());
    for g in groups {
        let n = g.len() as f64;
        let mean = g.iter().map(|&i| x[i]).sum::<f64>() / n;
        let var = g.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for &i in g {
            values[i] = (x[i] - mean) * inv;
        }
        inv_std.push(inv);
    }
    Normalized { values, inv_std }
}

/// `∂/∂x` of `⟨g, norm(x)⟩`, given the forward result.
fn normalize_backward(norm: &Normalized, groups: &[Vec<usize>], g: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; g.len()];
    for (grp, &inv) in groups.iter().zip(&norm.inv_std) {
        let n = grp.len() as f64;
        let mean_g = grp.iter().map(|&i| g[i]).sum::<f64>() / n;
        let mean_gx = grp.iter().map(|&i| g[i] * norm.values[i]).sum::<f64>() / n;
        for &i in grp {
            dx[i] = inv * (g[i] - mean_g - norm.values[i] * mean_gx);
        }
    }
    dx
}

/// Per-patch standardization over all entries.
pub fn patch_norm(patch: &[f64], eps: f64) -> Vec<f64> {
    normalize(patch, &groups(patch.len(), 1, NormScope::AllEntries), eps).values
}

/// Per-patch standardization computed separately for each channel of an
/// interleaved (`…, C`) patch.
pub fn patch_norm_per_channel(patch: &[f64], channels: usize, eps: f64) -> Vec<f64> {
    normalize(patch, &groups(patch.len(), channels, NormScope::PerChannel), eps).values
}

/// Distance and its gradient w.r.t. the difference vector. The gradient of
/// the unsquared norm at zero is taken to be zero.
fn distance_and_grad(diff: &[f64], distance: Distance) -> (f64, Vec<f64>) {
    let sq: f64 = diff.iter().map(|d| d * d).sum();
    match distance {
        Distance::SquaredL2 => (sq, diff.iter().map(|d| 2.0 * d).collect()),
        Distance::L2 => {
            let norm = sq.sqrt();
            if norm == 0.0 {
                (0.0, vec![0.0; diff.len()])
            } else {
                (norm, diff.iter().map(|d| d / norm).collect())
            }
        }
    }
}

/// Loss of a single flattened patch and its gradient w.r.t. `recon`.
pub fn patch_loss_grad(recon: &[f64], target: &[f64], channels: usize, config: &LossConfig) -> (f64, Vec<f64>) {
    debug_assert_eq!(recon.len(), target.len());
    let alpha = config.alpha;
    let raw_diff: Vec<f64> = recon.iter().zip(target).map(|(r, t)| r - t).collect();
    let (raw, raw_grad) = distance_and_grad(&raw_diff, config.distance);
    let mut loss = (1.0 - alpha) * raw;
    let mut grad: Vec<f64> = raw_grad.iter().map(|g| (1.0 - alpha) * g).collect();

    if alpha > 0.0 {
        let grps = groups(recon.len(), channels.max(1), config.norm_scope);
        let nr = normalize(recon, &grps, config.norm_eps);
        let nt = normalize(target, &grps, config.norm_eps);
        let diff: Vec<f64> = nr.values.iter().zip(&nt.values).map(|(a, b)| a - b).collect();
        let (d, g) = distance_and_grad(&diff, config.distance);
        loss += alpha * d;
        let g: Vec<f64> = g.iter().map(|v| alpha * v).collect();
        for (acc, v) in grad.iter_mut().zip(normalize_backward(&nr, &grps, &g)) {
            *acc += v;
        }
    }
    (loss, grad)
}

pub fn patch_loss(recon: &[f64], target: &[f64], channels: usize, config: &LossConfig) -> f64 {
    patch_loss_grad(recon, target, channels, config).0
}

fn check_shapes(recon: &PatchSet<f64>, target: &PatchSet<f64>) -> Result<()> {
    if recon.len() != target.len() || recon.patch_shape != target.patch_shape {
        return Err(Error::Input(format!(
            "reconstruction has {} patches of {:?}, target has {} of {:?}",
            recon.len(),
            recon.patch_shape,
            target.len(),
            target.patch_shape
        )));
    }
    Ok(())
}

fn flat(p: &ndarray::Array3<f64>) -> std::borrow::Cow<'_, [f64]> {
    match p.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(p.iter().copied().collect()),
    }
}

pub fn patch_ae_loss(recon: &PatchSet<f64>, target: &PatchSet<f64>, config: &LossConfig) -> Result<f64> {
    Ok(patch_ae_loss_grad(recon, target, config)?.0)
}

/// Total loss and `∂ℓ/∂recon` in the same patch layout.
pub fn patch_ae_loss_grad(recon: &PatchSet<f64>, target: &PatchSet<f64>, config: &LossConfig) -> Result<(f64, PatchSet<f64>)> {
    check_shapes(recon, target)?;
    let channels = recon.patch_shape.2;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(recon.len());
    for (r, t) in recon.patches.iter().zip(&target.patches) {
        let (l, g) = patch_loss_grad(&flat(r), &flat(t), channels, config);
        total += l;
        grads.push(ndarray::Array3::from_shape_vec(r.dim(), g).expect("patch shape"));
    }
    Ok((
        total,
        PatchSet {
            patches: grads,
            grid: recon.grid,
            patch_shape: recon.patch_shape,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(alpha: f64, eps: f64) -> LossConfig {
        LossConfig {
            alpha,
            norm_eps: eps,
            ..Default::default()
        }
    }

    fn patchset(patches: Vec<Vec<f64>>, shape: (usize, usize, usize)) -> PatchSet<f64> {
        let n = patches.len();
        PatchSet {
            patches: patches.into_iter().map(|p| Array3::from_shape_vec(shape, p).unwrap()).collect(),
            grid: (1, n),
            patch_shape: shape,
        }
    }

    #[test]
    fn constant_patch_normalizes_to_zero() {
        assert!(patch_norm(&[0.5; 12], 1e-6).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_entry_patch_normalizes_to_unit_pair() {
        let n = patch_norm(&[0.0, 1.0], 1e-12);
        assert!((n[0] + 1.0).abs() < 1e-9 && (n[1] - 1.0).abs() < 1e-9, "{n:?}");
    }

    #[test]
    fn normalized_patch_has_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let p: Vec<f64> = (0..48).map(|_| rng.random()).collect();
            let n = patch_norm(&p, 1e-6);
            let mean = n.iter().sum::<f64>() / 48.0;
            let var = n.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 48.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);

            let pc = patch_norm_per_channel(&p, 3, 1e-6);
            for c in 0..3 {
                let ch: Vec<f64> = pc.iter().skip(c).step_by(3).copied().collect();
                assert!(ch.iter().sum::<f64>().abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_reconstruction_has_zero_loss() {
        let t = patchset(vec![vec![0.1, 0.9, 0.3, 0.4], vec![0.2; 4]], (2, 2, 1));
        for alpha in [0.0, 0.5, 1.0] {
            assert_eq!(patch_ae_loss(&t, &t, &cfg(alpha, 1e-6)).unwrap(), 0.0);
        }
    }

    #[test]
    fn unit_difference_gives_two() {
        let t = patchset(vec![vec![0.1, 0.2, 0.3, 0.4]], (2, 2, 1));
        let r = patchset(vec![vec![1.1, 1.2, 1.3, 1.4]], (2, 2, 1));
        let l = patch_ae_loss(&r, &t, &cfg(0.0, 1e-6)).unwrap();
        assert!((l - 2.0).abs() < 1e-12, "{l}");

        let sq = LossConfig {
            distance: Distance::SquaredL2,
            ..cfg(0.0, 1e-6)
        };
        assert!((patch_ae_loss(&r, &t, &sq).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_term_ignores_per_patch_affine_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Vec<Vec<f64>> = (0..3).map(|_| (0..48).map(|_| rng.random()).collect()).collect();
        let r: Vec<Vec<f64>> = t
            .iter()
            .map(|p| {
                let (a, b) = (rng.random_range(0.5..3.0), rng.random_range(-1.0..1.0));
                p.iter().map(|v| a * v + b).collect()
            })
            .collect();
        let l = patch_ae_loss(&patchset(r, (4, 4, 3)), &patchset(t, (4, 4, 3)), &cfg(1.0, 1e-12)).unwrap();
        assert!(l < 1e-5, "{l}");
    }

    #[test]
    fn shape_mismatch_is_an_input_error() {
        let a = patchset(vec![vec![0.0; 4]], (2, 2, 1));
        let b = patchset(vec![vec![0.0; 4], vec![0.0; 4]], (2, 2, 1));
        assert!(matches!(patch_ae_loss(&a, &b, &LossConfig::default()), Err(Error::Input(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(cfg(1.5, 1e-6).validate().is_err());
        assert!(cfg(0.5, 0.0).validate().is_err());
        assert!(cfg(0.5, 1e-6).validate().is_ok());
    }

    fn finite_difference_check(scope: NormScope, distance: Distance) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for alpha in [0.0, 0.3, 1.0] {
            let config = LossConfig {
                alpha,
                norm_eps: 1e-6,
                distance,
                norm_scope: scope,
            };
            let r: Vec<f64> = (0..12).map(|_| rng.random()).collect();
            let t: Vec<f64> = (0..12).map(|_| rng.random()).collect();
            let (_, g) = patch_loss_grad(&r, &t, 3, &config);
            let h = 1e-6;
            for i in 0..12 {
                let mut rp = r.clone();
                rp[i] += h;
                let mut rm = r.clone();
                rm[i] -= h;
                let fd = (patch_loss(&rp, &t, 3, &config) - patch_loss(&rm, &t, 3, &config)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{scope:?} {distance:?} α={alpha} i={i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_in_every_mode() {
        for scope in [NormScope::AllEntries, NormScope::PerChannel] {
            for distance in [Distance::L2, Distance::SquaredL2] {
                finite_difference_check(scope, distance);
            }
        }
    }

    #[test]
    fn gradient_is_zero_at_exact_reconstruction() {
        let t: Vec<f64> = (0..8).map(|i| i as f64 / 8.0).collect();
        let (l, g) = patch_loss_grad(&t, &t, 1, &LossConfig::default());
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative_and_additive(seed in 0u64..10_000, alpha in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..4).map(|_| (0..12).map(|_| rng.random_range(-1.0..2.0)).collect()).collect()
            };
            let (r, t) = (mk(&mut rng), mk(&mut rng));
            let config = cfg(alpha, 1e-6);
            let total = patch_ae_loss(&patchset(r.clone(), (2, 2, 3)), &patchset(t.clone(), (2, 2, 3)), &config).unwrap();
            prop_assert!(total >= 0.0 && total.is_finite());
            let parts: f64 = r.iter().zip(&t).map(|(a, b)| patch_loss(a, b, 3, &config)).sum();
            prop_assert!((total - parts).abs() <= 1e-12 * (1.0 + total));
        }
    }
}
