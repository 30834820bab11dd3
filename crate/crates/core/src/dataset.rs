//! MVTec-style class directories.
//!
//! ```text
//! <class>/train/good/*.png        (PNG only)
//! <class>/test/good/*.png
//! <class>/test/<defect>/*.png
//! <class>/ground_truth/<defect>/*_mask.png   (optional)
//! ```
//!
//! Any test image outside `test/good` is anomalous.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::Label;
use crate::image::Image;

const EXTENSIONS: [&str; 1] = ["png"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestItem {
    /// `<defect>/<file stem>`, unique within a class.
    pub id: String,
    pub path: PathBuf,
    pub label: Label,
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::data(path, "missing directory"))
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Sorted image paths under `<class>/train/good`.
pub fn train_files(class_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = class_dir.join("train").join("good");
    require_dir(&dir)?;
    let files = image_files(&dir)?;
    if files.is_empty() {
        return Err(Error::data(&dir, "no training images"));
    }
    Ok(files)
}

/// Test images ordered by defect directory name, then file name.
pub fn test_items(class_dir: &Path) -> Result<Vec<TestItem>> {
    let test = class_dir.join("test");
    require_dir(&test)?;
    let mut defects: Vec<PathBuf> = std::fs::read_dir(&test)
        .map_err(|e| Error::io(&test, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    defects.sort();
    let mut items = Vec::new();
    for dir in defects {
        let defect = dir.file_name().unwrap().to_string_lossy().into_owned();
        let label = if defect == "good" { Label::Normal } else { Label::Anomalous };
        for path in image_files(&dir)? {
            let stem = path.file_stem().unwrap().to_string_lossy();
            items.push(TestItem {
                id: format!("{defect}/{stem}"),
                path,
                label,
            });
        }
    }
    if items.is_empty() {
        return Err(Error::data(&test, "no test images"));
    }
    Ok(items)
}

/// Loads images in order, resizing to `size` × `size` when given.
pub fn load_images(paths: &[PathBuf], size: Option<usize>) -> Result<Vec<Image>> {
    paths.par_iter().map(|p| Image::load(p, size)).collect()
}

/// Class directories (those containing `train/` or `test/`) under `root`,
/// or `root` itself if it is a class directory.
pub fn class_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    require_dir(root)?;
    let is_class = |p: &Path| p.join("train").is_dir() || p.join("test").is_dir();
    if is_class(root) {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_class(p))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::data(root, "no class directories (expected <class>/train and <class>/test)"));
    }
    Ok(dirs)
}

pub fn class_name(class_dir: &Path) -> String {
    class_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| class_dir.display().to_string())
}
