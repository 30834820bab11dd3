//! Memory bank of normal patch features and nearest-neighbor scoring.
//!
//! # File format
//!
//! All integers little-endian; header is 68 bytes.
//!
//! | offset | size | field                                   |
//! |-------:|-----:|-----------------------------------------|
//! |      0 |    8 | magic `PAEBANK\0`                       |
//! |      8 |    4 | version (`u32`, currently 1)            |
//! |     12 |    8 | `N`, number of rows (`u64`)             |
//! |     20 |    4 | `c3`, row width (`u32`)                 |
//! |     24 |    4 | grid height (`u32`)                     |
//! |     28 |    4 | grid width (`u32`)                      |
//! |     32 |    4 | number of source images (`u32`)         |
//! |     36 |   32 | SHA-256 of the encoder configuration    |
//! |     68 | 4·N·c3 | rows, row-major `f32`                 |

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};

pub const BANK_MAGIC: [u8; 8] = *b"PAEBANK\0";
pub const BANK_VERSION: u32 = 1;
pub const BANK_HEADER_LEN: usize = 68;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BankMeta {
    pub config_hash: [u8; 32],
    pub grid: (u32, u32),
    pub n_images: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    vectors: Array2<f32>,
    meta: BankMeta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Squared Euclidean distance, accumulated in `f64` in dimension order.
pub fn squared_distance(a: ArrayView1<'_, f32>, b: ArrayView1<'_, f32>) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc
}

/// Exact nearest row; ties resolve to the lowest index. Rows whose partial
/// sum already reaches the best distance are abandoned early, which cannot
/// change the result.
fn nearest_row(rows: ArrayView2<'_, f32>, query: ArrayView1<'_, f32>) -> Neighbor {
    let mut best = f64::INFINITY;
    let mut best_idx = 0;
    let q = query.as_slice();
    for (i, row) in rows.outer_iter().enumerate() {
        let mut acc = 0.0;
        let mut abandoned = false;
        match (row.as_slice(), q) {
            (Some(r), Some(q)) => {
                for (chunk_r, chunk_q) in r.chunks(16).zip(q.chunks(16)) {
                    for (&x, &y) in chunk_r.iter().zip(chunk_q) {
                        let d = x as f64 - y as f64;
                        acc += d * d;
                    }
                    if acc >= best {
                        abandoned = true;
                        break;
                    }
                }
            }
            _ => acc = squared_distance(row, query),
        }
        if !abandoned && acc < best {
            best = acc;
            best_idx = i;
        }
    }
    Neighbor {
        index: best_idx,
        distance: best.sqrt(),
    }
}

impl MemoryBank {
    pub fn new(vectors: Array2<f32>, meta: BankMeta) -> Result<MemoryBank> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(Error::Input("memory bank needs at least one non-empty row".into()));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("memory bank contains non-finite entries".into()));
        }
        Ok(MemoryBank {
            vectors: vectors.as_standard_layout().into_owned(),
            meta,
        })
    }

    /// Stacks every grid vector of every feature map, image by image.
    pub fn from_feature_maps(maps: &[FeatureMap], config_hash: [u8; 32]) -> Result<MemoryBank> {
        let first = maps.first().ok_or_else(|| Error::Input("no feature maps to build a bank from".into()))?;
        let (gh, gw) = first.grid();
        let c3 = first.channels();
        let mut vectors = Array2::zeros((maps.len() * gh * gw, c3));
        for (k, fm) in maps.iter().enumerate() {
            if fm.grid() != (gh, gw) || fm.channels() != c3 {
                return Err(Error::Input("feature maps differ in shape".into()));
            }
            let flat = fm.data().to_shape((gh * gw, c3)).expect("contiguous");
            vectors.slice_mut(ndarray::s![k * gh * gw..(k + 1) * gh * gw, ..]).assign(&flat);
        }
        MemoryBank::new(
            vectors,
            BankMeta {
                config_hash,
                grid: (gh as u32, gw as u32),
                n_images: maps.len() as u32,
            },
        )
    }

    pub fn vectors(&self) -> ArrayView2<'_, f32> {
        self.vectors.view()
    }

    pub fn meta(&self) -> &BankMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::Input(format!("query has {d} dims, bank rows have {}", self.dim())));
        }
        Ok(())
    }

    pub fn nearest(&self, query: ArrayView1<'_, f32>) -> Result<Neighbor> {
        self.check_dim(query.len())?;
        Ok(nearest_row(self.vectors.view(), query))
    }

    /// Nearest row for each query row, evaluated in parallel.
    pub fn nearest_batch(&self, queries: ArrayView2<'_, f32>) -> Result<Vec<Neighbor>> {
        self.check_dim(queries.ncols())?;
        let queries = queries.as_standard_layout();
        let rows: Vec<ArrayView1<'_, f32>> = queries.outer_iter().collect();
        Ok(rows.par_iter().map(|q| nearest_row(self.vectors.view(), q.view())).collect())
    }

    /// The `k` nearest rows in ascending distance (ties by index).
    pub fn k_nearest(&self, query: ArrayView1<'_, f32>, k: usize) -> Result<Vec<Neighbor>> {
        self.check_dim(query.len())?;
        let mut all: Vec<Neighbor> = self
            .vectors
            .outer_iter()
            .enumerate()
            .map(|(index, row)| Neighbor {
                index,
                distance: squared_distance(row, query).sqrt(),
            })
            .collect();
        let k = k.min(all.len());
        all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
        all.truncate(k);
        Ok(all)
    }

    pub fn subset(&self, rows: &[usize]) -> MemoryBank {
        MemoryBank {
            vectors: self.vectors.select(Axis(0), rows),
            meta: self.meta,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BANK_HEADER_LEN + 4 * self.vectors.len());
        out.extend_from_slice(&BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        out.extend_from_slice(&self.meta.grid.0.to_le_bytes());
        out.extend_from_slice(&self.meta.grid.1.to_le_bytes());
        out.extend_from_slice(&self.meta.n_images.to_le_bytes());
        out.extend_from_slice(&self.meta.config_hash);
        for v in self.vectors.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MemoryBank> {
        if bytes.len() < BANK_HEADER_LEN {
            return Err(Error::Format(format!("bank file is {} bytes, shorter than its header", bytes.len())));
        }
        if bytes[..8] != BANK_MAGIC {
            return Err(Error::Format("bad magic number: not a memory bank file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != BANK_VERSION {
            return Err(Error::Format(format!("unsupported bank version {version}")));
        }
        let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let c3 = u32_at(20) as usize;
        let meta = BankMeta {
            grid: (u32_at(24), u32_at(28)),
            n_images: u32_at(32),
            config_hash: bytes[36..68].try_into().unwrap(),
        };
        let expected = n
            .checked_mul(c3)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format("bank dimensions overflow".into()))?;
        let payload = &bytes[BANK_HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "bank payload is {} bytes, header promises {expected}",
                payload.len()
            )));
        }
        let data: Vec<f32> = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let vectors = Array2::from_shape_vec((n, c3), data).map_err(|e| Error::Format(e.to_string()))?;
        MemoryBank::new(vectors, meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<MemoryBank> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        MemoryBank::from_bytes(&bytes)
    }
}

/// Distance from `query` to its nearest bank row.
pub fn nn_distance(query: ArrayView1<'_, f32>, bank: &MemoryBank) -> Result<f64> {
    Ok(bank.nearest(query)?.distance)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    /// `Gh × Gw` patch scores.
    pub scores: Array2<f64>,
    pub image_score: f64,
    /// Grid cell holding the maximal patch score.
    pub argmax: (usize, usize),
}

/// Options for [`score_image`]. `reweight_neighbors = Some(b)` enables the
/// neighborhood-softmax rescaling of the maximal patch score.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreOptions {
    pub reweight_neighbors: Option<usize>,
}

/// Patch scores are nearest-neighbor distances; the image score is their
/// maximum. With reweighting, the maximal score `s*` (test vector `q`,
/// nearest bank row `m*`) becomes
///
/// ```text
/// s = (1 − exp‖q − m*‖ / Σ_{m ∈ N_b(m*)} exp‖q − m‖) · s*
/// ```
///
/// where `N_b(m*)` are the `b` bank rows nearest to `m*` (itself included).
/// A one-element neighborhood carries no information and leaves `s*`
/// unchanged.
pub fn score_image(features: &FeatureMap, bank: &MemoryBank, options: ScoreOptions) -> Result<ScoreMap> {
    let (gh, gw) = features.grid();
    let c3 = features.channels();
    bank.check_dim(c3)?;
    let queries = features.data().to_shape((gh * gw, c3)).expect("contiguous");
    let neighbors = bank.nearest_batch(queries.view())?;
    let scores = Array2::from_shape_fn((gh, gw), |(i, j)| neighbors[i * gw + j].distance);

    let mut arg = 0;
    for (k, n) in neighbors.iter().enumerate() {
        if n.distance > neighbors[arg].distance {
            arg = k;
        }
    }
    let top = neighbors[arg];
    let mut image_score = top.distance;

    if let Some(b) = options.reweight_neighbors {
        let anchor = bank.vectors.row(top.index);
        let support = bank.k_nearest(anchor, b)?;
        if support.len() > 1 {
            let q = queries.row(arg);
            let dists: Vec<f64> = support
                .iter()
                .map(|n| squared_distance(q, bank.vectors.row(n.index)).sqrt())
                .collect();
            let max = dists.iter().copied().fold(top.distance, f64::max);
            let denom: f64 = dists.iter().map(|d| (d - max).exp()).sum();
            let weight = 1.0 - (top.distance - max).exp() / denom;
            image_score *= weight;
        }
    }

    Ok(ScoreMap {
        scores,
        image_score,
        argmax: (arg / gw, arg % gw),
    })
}

/// Greedy farthest-point selection of `n_select` rows starting from
/// `start`. Returns row indices in selection order; ties pick the lowest
/// index.
pub fn farthest_point_indices(rows: ArrayView2<'_, f32>, n_select: usize, start: usize) -> Vec<usize> {
    let n = rows.nrows();
    let n_select = n_select.min(n);
    if n_select == 0 {
        return Vec::new();
    }
    let mut selected = Vec::with_capacity(n_select);
    selected.push(start);
    let mut min_dist: Vec<f64> = (0..n).map(|i| squared_distance(rows.row(i), rows.row(start))).collect();
    while selected.len() < n_select {
        let mut next = 0;
        for i in 1..n {
            if min_dist[i] > min_dist[next] {
                next = i;
            }
        }
        selected.push(next);
        let new_row = rows.row(next);
        min_dist.par_iter_mut().enumerate().for_each(|(i, d)| {
            let dn = squared_distance(rows.row(i), new_row);
            if dn < *d {
                *d = dn;
            }
        });
    }
    selected
}

/// Keeps `round(fraction · N)` rows (at least one) by greedy farthest-point
/// selection from a seeded start row; kept rows stay in their original order.
pub fn coreset_subsample(bank: &MemoryBank, fraction: f64, seed: u64) -> Result<MemoryBank> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("bank.coreset_fraction", "must lie in (0, 1]"));
    }
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..bank.len());
    coreset_subsample_from(bank, fraction, start)
}

pub fn coreset_subsample_from(bank: &MemoryBank, fraction: f64, start: usize) -> Result<MemoryBank> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("bank.coreset_fraction", "must lie in (0, 1]"));
    }
    if start >= bank.len() {
        return Err(Error::Input(format!("start row {start} outside bank of {}", bank.len())));
    }
    if fraction == 1.0 {
        return Ok(bank.clone());
    }
    let keep = ((fraction * bank.len() as f64).round() as usize).max(1);
    let mut idx = farthest_point_indices(bank.vectors(), keep, start);
    idx.sort_unstable();
    Ok(bank.subset(&idx))
}
