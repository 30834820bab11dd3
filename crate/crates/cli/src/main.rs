use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use patchae::bank::{coreset_subsample, MemoryBank};
use patchae::checkpoint::Checkpoint;
use patchae::config::RunConfig;
use patchae::dataset::{class_dirs, class_name, load_images, train_files};
use patchae::eval::{evaluate_class, EvalOptions, Report};
use patchae::heatmap::write_heatmap;
use patchae::train::{extract_normal_bank, train};
use patchae::{Error, Result};

const CHECKPOINT_FILE: &str = "model.pae";
const BANK_FILE: &str = "bank.paebank";
const LOSS_FILE: &str = "loss.csv";

/// Patch-wise auto-encoder anomaly detection.
#[derive(Parser)]
#[command(name = "patchae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Only process this class.
    #[arg(long = "class")]
    class: Option<String>,
    /// Sequential, bit-reproducible execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural toy dataset under `data.root/<toy.class>`.
    GenToyData {
        /// TOML run configuration; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output class directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generator seed (overrides `toy.seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model per class; writes `model.pae` and `loss.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training seed (overrides `training.seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract the normal-feature memory bank of each class.
    BuildBank {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint (defaults to `<work_dir>/<class>/model.pae`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output bank file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep this fraction of bank vectors by greedy farthest-point selection.
        #[arg(long)]
        coreset_fraction: Option<f64>,
    },
    /// Score test images and report image-level AUROC.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model checkpoint (defaults to `<work_dir>/<class>/model.pae`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Memory bank (defaults to `<work_dir>/<class>/bank.paebank`).
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Write per-image heatmaps under this directory.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        /// Reweight image scores over this many bank neighbors.
        #[arg(long)]
        reweight: Option<usize>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Class directories selected by `--class` or `data.classes`.
fn selected_classes(cfg: &RunConfig, only: Option<&str>) -> Result<Vec<PathBuf>> {
    let wanted: Vec<String> = match only {
        Some(c) => vec![c.to_string()],
        None => cfg.data.classes.clone(),
    };
    if wanted.is_empty() {
        return class_dirs(&cfg.data.root);
    }
    let all = class_dirs(&cfg.data.root)?;
    wanted
        .iter()
        .map(|w| {
            all.iter()
                .find(|d| class_name(d) == *w)
                .cloned()
                .ok_or_else(|| Error::data(cfg.data.root.join(w), "class directory not found"))
        })
        .collect()
}

fn single_override(flag: &str, value: &Option<PathBuf>, classes: &[PathBuf]) -> Result<()> {
    if value.is_some() && classes.len() != 1 {
        return Err(Error::Input(format!("--{flag} needs exactly one class, {} selected", classes.len())));
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_toy_data(config: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(s) = seed {
        cfg.toy.spec.seed = s;
    }
    let out = out.unwrap_or_else(|| cfg.data.root.join(&cfg.toy.class));
    let manifest = patchae::toy::generate(&cfg.toy.spec, &out)?;
    println!(
        "wrote {} train, {} good test and {} defect test images to {}",
        manifest.train.len(),
        manifest.test_good.len(),
        manifest.test_defect.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(common: Common, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref())?;
    if let Some(s) = seed {
        cfg.training.seed = s;
    }
    cfg.training.deterministic |= common.deterministic;
    for dir in selected_classes(&cfg, common.class.as_deref())? {
        let class = class_name(&dir);
        let files = train_files(&dir)?;
        let images = load_images(&files, Some(cfg.encoder.input_size))?;
        info!("{class}: training on {} images", images.len());
        let out = train(&images, &cfg.train_setup(), cfg.encoder.init)?;
        let work = cfg.class_work_dir(&class);
        create_dir(&work)?;
        out.model.save(&work.join(CHECKPOINT_FILE))?;
        out.history.save(&work.join(LOSS_FILE))?;
        let first = out.history.epoch_means.first().copied().unwrap_or(f64::NAN);
        let last = out.history.epoch_means.last().copied().unwrap_or(f64::NAN);
        println!(
            "{class}: {} epochs, mean loss {first:.4} -> {last:.4}, checkpoint {}",
            out.history.epoch_means.len(),
            work.join(CHECKPOINT_FILE).display()
        );
    }
    Ok(())
}

fn cmd_build_bank(common: Common, checkpoint: Option<PathBuf>, out: Option<PathBuf>, coreset: Option<f64>) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref())?;
    if coreset.is_some() {
        cfg.bank.coreset_fraction = coreset;
        cfg.validate()?;
    }
    let classes = selected_classes(&cfg, common.class.as_deref())?;
    single_override("checkpoint", &checkpoint, &classes)?;
    single_override("out", &out, &classes)?;
    for dir in classes {
        let class = class_name(&dir);
        let work = cfg.class_work_dir(&class);
        let ckpt_path = checkpoint.clone().unwrap_or_else(|| work.join(CHECKPOINT_FILE));
        let model = Checkpoint::load(&ckpt_path)?;
        let expected = cfg.encoder.hash();
        let found = model.encoder.config().hash();
        if expected != found {
            return Err(Error::Mismatch(format!(
                "checkpoint {} was trained with encoder configuration {} but the config describes {}",
                ckpt_path.display(),
                hex::encode(found),
                hex::encode(expected)
            )));
        }
        let files = train_files(&dir)?;
        let images = load_images(&files, Some(cfg.encoder.input_size))?;
        let mut bank = extract_normal_bank(&model.encoder, &images)?;
        if let Some(f) = cfg.bank.coreset_fraction {
            let full = bank.len();
            bank = coreset_subsample(&bank, f, cfg.bank.coreset_seed)?;
            info!("{class}: coreset kept {} of {full} rows", bank.len());
        }
        let bank_path = out.clone().unwrap_or_else(|| work.join(BANK_FILE));
        if let Some(parent) = bank_path.parent() {
            create_dir(parent)?;
        }
        bank.save(&bank_path)?;
        println!("{class}: N = {}, c3 = {}, bank {}", bank.len(), bank.dim(), bank_path.display());
    }
    Ok(())
}

fn cmd_evaluate(
    common: Common,
    checkpoint: Option<PathBuf>,
    bank: Option<PathBuf>,
    heatmaps: Option<PathBuf>,
    reweight: Option<usize>,
) -> Result<()> {
    let mut cfg = load_config(common.config.as_deref())?;
    if reweight.is_some() {
        cfg.evaluation.reweight_neighbors = reweight;
        cfg.validate()?;
    }
    if heatmaps.is_some() {
        cfg.evaluation.heatmaps = heatmaps;
    }
    cfg.evaluation.deterministic |= common.deterministic;
    let classes = selected_classes(&cfg, common.class.as_deref())?;
    single_override("checkpoint", &checkpoint, &classes)?;
    single_override("bank", &bank, &classes)?;

    let options = EvalOptions {
        score: cfg.evaluation.score_options(),
        keep_maps: cfg.evaluation.heatmaps.is_some(),
        deterministic: cfg.evaluation.deterministic,
    };
    let mut reports = Vec::new();
    for dir in classes {
        let class = class_name(&dir);
        let work = cfg.class_work_dir(&class);
        let model = Checkpoint::load(&checkpoint.clone().unwrap_or_else(|| work.join(CHECKPOINT_FILE)))?;
        let bank = MemoryBank::load(&bank.clone().unwrap_or_else(|| work.join(BANK_FILE)))?;
        let result = evaluate_class(&model, &bank, &dir, options)?;
        if let Some(root) = &cfg.evaluation.heatmaps {
            let out = root.join(&class);
            for img in &result.images {
                write_heatmap(&img.map.scores, img.image_size, &out, &img.image_id.replace('/', "_"))?;
            }
            info!("{class}: wrote {} heatmaps to {}", result.images.len(), out.display());
        }
        reports.push(result.report);
    }
    let report = Report::new(reports);
    create_dir(&cfg.data.work_dir)?;
    write_text(&cfg.data.work_dir.join("report.json"), &report.to_json())?;
    let table = report.to_table();
    write_text(&cfg.data.work_dir.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenToyData { config, out, seed } => gen_toy_data(config, out, seed),
        Command::Train { common, seed } => cmd_train(common, seed),
        Command::BuildBank {
            common,
            checkpoint,
            out,
            coreset_fraction,
        } => cmd_build_bank(common, checkpoint, out, coreset_fraction),
        Command::Evaluate {
            common,
            checkpoint,
            bank,
            heatmaps,
            reweight,
        } => cmd_evaluate(common, checkpoint, bank, heatmaps, reweight),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
