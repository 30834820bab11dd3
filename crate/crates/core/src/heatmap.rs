//! Anomaly heatmaps: bilinear upsampling of patch scores to image
//! resolution, per-image min-max normalization, and file export.
//!
//! Normalization is display-only. Raw maps are written unmodified next to
//! the rendered images.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use ndarray_npy::write_npy;

use crate::error::{Error, Result};

/// Half-pixel-aligned bilinear resize with edge clamping.
pub fn upsample_bilinear(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, ty) = coord(y, h, out_h);
        let (x0, x1, tx) = coord(x, w, out_w);
        let top = map[[y0, x0]] * (1.0 - tx) + map[[y0, x1]] * tx;
        let bot = map[[y1, x0]] * (1.0 - tx) + map[[y1, x1]] * tx;
        top * (1.0 - ty) + bot * ty
    })
}

/// Rescales to `[0, 1]`; a constant map becomes all zeros.
pub fn min_max_normalize(map: &Array2<f64>) -> Array2<f64> {
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if range > 0.0 && range.is_finite() {
        map.mapv(|v| (v - min) / range)
    } else {
        Array2::zeros(map.dim())
    }
}

/// Piecewise-linear blue → cyan → yellow → red colormap.
fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [(f64, [f64; 3]); 4] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.35, [0.0, 0.8, 1.0]),
        (0.7, [1.0, 0.9, 0.0]),
        (1.0, [0.8, 0.0, 0.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    let k = STOPS.iter().rposition(|s| s.0 <= t).unwrap().min(STOPS.len() - 2);
    let (t0, c0) = STOPS[k];
    let (t1, c1) = STOPS[k + 1];
    let u = (t - t0) / (t1 - t0);
    let mix = |i: usize| ((c0[i] + (c1[i] - c0[i]) * u) * 255.0).round() as u8;
    [mix(0), mix(1), mix(2)]
}

/// Paths written for one test image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatmapFiles {
    pub raw: PathBuf,
    pub image: PathBuf,
}

/// Writes `<stem>.npy` (raw upsampled scores, f64) and `<stem>.png`
/// (normalized, color-mapped) into `dir`.
pub fn write_heatmap(scores: &Array2<f64>, image_size: (usize, usize), dir: &Path, stem: &str) -> Result<HeatmapFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let raw = upsample_bilinear(scores, image_size.0, image_size.1);
    let raw_path = dir.join(format!("{stem}.npy"));
    write_npy(&raw_path, &raw).map_err(|e| Error::data(&raw_path, e.to_string()))?;

    let norm = min_max_normalize(&raw);
    let (h, w) = norm.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb(colormap(norm[[y as usize, x as usize]])));
    let image_path = dir.join(format!("{stem}.png"));
    img.save_with_format(&image_path, image::ImageFormat::Png)
        .map_err(|e| Error::data(&image_path, e.to_string()))?;
    Ok(HeatmapFiles {
        raw: raw_path,
        image: image_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use ndarray_npy::read_npy;

    #[test]
    fn upsample_preserves_constants_and_range() {
        let c = Array2::from_elem((3, 5), 2.5);
        assert!(upsample_bilinear(&c, 12, 20).iter().all(|&v| (v - 2.5).abs() < 1e-15));
        let m = array![[0.0, 1.0], [2.0, 3.0]];
        let up = upsample_bilinear(&m, 4, 4);
        assert_eq!(up[[0, 0]], 0.0);
        assert_eq!(up[[3, 3]], 3.0);
        // Interior sample at source coordinate (0.25, 0.25).
        assert!((up[[1, 1]] - (0.25 * 2.0 + 0.25 * 1.0)).abs() < 1e-12);
        assert!(up.iter().all(|&v| (0.0..=3.0).contains(&v)));
        assert_eq!(upsample_bilinear(&m, 2, 2), m);
    }

    #[test]
    fn normalization() {
        let n = min_max_normalize(&array![[2.0, 4.0], [3.0, 6.0]]);
        assert_eq!(n, array![[0.0, 0.5], [0.25, 1.0]]);
        assert_eq!(min_max_normalize(&array![[1.0, 1.0]]), array![[0.0, 0.0]]);
    }

    #[test]
    fn files_hold_raw_and_rendered_maps() {
        let dir = tempfile::tempdir().unwrap();
        let scores = array![[0.5, 1.5], [0.0, 4.0]];
        let files = write_heatmap(&scores, (8, 8), dir.path(), "good_000").unwrap();
        let raw: Array2<f64> = read_npy(&files.raw).unwrap();
        assert_eq!(raw, upsample_bilinear(&scores, 8, 8));
        let png = image::open(&files.image).unwrap().to_rgb8();
        assert_eq!(png.dimensions(), (8, 8));
        assert_eq!(png.get_pixel(7, 7).0, colormap(1.0));
        assert_eq!(png.get_pixel(0, 7).0, colormap(0.0));
    }
}
