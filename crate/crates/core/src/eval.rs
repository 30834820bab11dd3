//! Image-level AUROC evaluation and reports.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::{score_image, MemoryBank, ScoreMap, ScoreOptions};
use crate::checkpoint::Checkpoint;
use crate::dataset::{class_name, test_items};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub image_id: String,
    pub score: f64,
    pub label: Label,
}

impl LabeledScore {
    pub fn new(image_id: impl Into<String>, score: f64, label: Label) -> Self {
        LabeledScore {
            image_id: image_id.into(),
            score,
            label,
        }
    }
}

/// Area under the ROC curve as the Mann–Whitney statistic: the probability
/// that a random anomalous score exceeds a random normal one, ties counting
/// one half. Computed from midranks in O(n log n).
pub fn auroc(scores: &[LabeledScore]) -> Result<f64> {
    if let Some(s) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Evaluation(format!("score of `{}` is not finite", s.image_id)));
    }
    let n_pos = scores.iter().filter(|s| s.label == Label::Anomalous).count();
    let n_neg = scores.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Evaluation(format!(
            "AUROC needs both labels, got {n_neg} normal and {n_pos} anomalous"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].score.total_cmp(&scores[b].score));

    // Sum of midranks (1-based) of the anomalous scores.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]].score == scores[order[i]].score {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        let pos_in_tie = order[i..j].iter().filter(|&&k| scores[k].label == Label::Anomalous).count();
        rank_sum += midrank * pos_in_tie as f64;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub count: usize,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl ScoreSummary {
    fn of(values: impl Iterator<Item = f64>) -> Option<ScoreSummary> {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return None;
        }
        Some(ScoreSummary {
            count: v.len(),
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: String,
    /// In `[0, 1]`.
    pub auroc: f64,
    pub n_images: usize,
    pub normal: Option<ScoreSummary>,
    pub anomalous: Option<ScoreSummary>,
    pub scores: Vec<LabeledScore>,
}

impl ClassReport {
    pub fn from_scores(class: impl Into<String>, scores: Vec<LabeledScore>) -> Result<ClassReport> {
        let summary = |label| ScoreSummary::of(scores.iter().filter(|s| s.label == label).map(|s| s.score));
        Ok(ClassReport {
            class: class.into(),
            auroc: auroc(&scores)?,
            n_images: scores.len(),
            normal: summary(Label::Normal),
            anomalous: summary(Label::Anomalous),
            scores,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub classes: Vec<ClassReport>,
    pub average_auroc: f64,
}

impl Report {
    pub fn new(classes: Vec<ClassReport>) -> Report {
        let average_auroc = if classes.is_empty() {
            f64::NAN
        } else {
            classes.iter().map(|c| c.auroc).sum::<f64>() / classes.len() as f64
        };
        Report { classes, average_auroc }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Report> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
    }

    /// Per-class rows plus an average row, AUROC in percent.
    pub fn to_table(&self) -> String {
        let width = self.classes.iter().map(|c| c.class.len()).max().unwrap_or(0).max(7);
        let mut out = String::new();
        writeln!(out, "{:<width$}  {:>9}  {:>6}", "Class", "AUROC (%)", "Images").unwrap();
        writeln!(out, "{}", "-".repeat(width + 19)).unwrap();
        for c in &self.classes {
            writeln!(out, "{:<width$}  {:>9.2}  {:>6}", c.class, 100.0 * c.auroc, c.n_images).unwrap();
        }
        writeln!(out, "{}", "-".repeat(width + 19)).unwrap();
        let total: usize = self.classes.iter().map(|c| c.n_images).sum();
        writeln!(out, "{:<width$}  {:>9.2}  {:>6}", "Average", 100.0 * self.average_auroc, total).unwrap();
        out
    }
}

/// Score map of one test image, kept when maps are requested.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub image_id: String,
    pub label: Label,
    pub map: ScoreMap,
    pub image_size: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEvaluation {
    pub report: ClassReport,
    /// Empty unless maps were requested.
    pub images: Vec<ImageResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub score: ScoreOptions,
    pub keep_maps: bool,
    pub deterministic: bool,
}

/// Refuses banks built by a different encoder configuration or width.
pub fn check_compatible(model: &Checkpoint, bank: &MemoryBank) -> Result<()> {
    let c3 = model.encoder.config().c3;
    if bank.dim() != c3 {
        return Err(Error::Mismatch(format!(
            "encoder produces {c3}-dimensional features but the bank holds {}-dimensional rows",
            bank.dim()
        )));
    }
    let expected = model.encoder.config().hash();
    if bank.meta().config_hash != expected {
        return Err(Error::Mismatch(format!(
            "bank was built with encoder configuration {}, checkpoint has {}",
            hex::encode(bank.meta().config_hash),
            hex::encode(expected)
        )));
    }
    Ok(())
}

/// Scores in-memory images; results are in input order.
pub fn score_images(
    model: &Checkpoint,
    bank: &MemoryBank,
    images: &[Image],
    options: ScoreOptions,
    deterministic: bool,
) -> Result<Vec<ScoreMap>> {
    check_compatible(model, bank)?;
    let one = |img: &Image| score_image(&model.encoder.encode(img)?, bank, options);
    if deterministic {
        images.iter().map(one).collect()
    } else {
        images.par_iter().map(one).collect()
    }
}

/// Scores every test image of an MVTec class directory.
pub fn evaluate_class(model: &Checkpoint, bank: &MemoryBank, class_dir: &Path, options: EvalOptions) -> Result<ClassEvaluation> {
    check_compatible(model, bank)?;
    let items = test_items(class_dir)?;
    let size = model.encoder.config().input_size;
    let score_one = |item: &crate::dataset::TestItem| -> Result<ImageResult> {
        let image = Image::load(&item.path, Some(size))?;
        let map = score_image(&model.encoder.encode(&image)?, bank, options.score)?;
        Ok(ImageResult {
            image_id: item.id.clone(),
            label: item.label,
            map,
            image_size: (image.height(), image.width()),
        })
    };
    let results: Vec<ImageResult> = if options.deterministic {
        items.iter().map(score_one).collect::<Result<_>>()?
    } else {
        items.par_iter().map(score_one).collect::<Result<_>>()?
    };
    let scores = results
        .iter()
        .map(|r| LabeledScore::new(r.image_id.clone(), r.map.image_score, r.label))
        .collect();
    let report = ClassReport::from_scores(class_name(class_dir), scores)?;
    Ok(ClassEvaluation {
        report,
        images: if options.keep_maps { results } else { Vec::new() },
    })
}
