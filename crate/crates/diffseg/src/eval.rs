//! Scores a directory of predicted label maps against ground truth.

use std::fs;
use std::path::{Path, PathBuf};

use diffseg_core::metrics::{ari, hungarian_iou};

use crate::error::{Error, Result};
use crate::fit::csv_error;
use crate::io::load_labelmap;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub ari: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_ari: f64,
    pub mean_iou: f64,
}

pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(dir.to_path_buf()),
        _ => Error::io(dir, e),
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Pairs every ground-truth PNG with the same file name in `pred_dir`.
pub fn evaluate_dirs(gt_dir: &Path, pred_dir: &Path) -> Result<EvalReport> {
    let gt_files = png_files(gt_dir)?;
    if gt_files.is_empty() {
        return Err(Error::Config(format!("no PNG label maps in {}", gt_dir.display())));
    }
    let missing: Vec<String> = gt_files
        .iter()
        .filter_map(|p| {
            let name = p.file_name().expect("listed file");
            (!pred_dir.join(name).exists()).then(|| name.to_string_lossy().into_owned())
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::Missing(pred_dir.join(missing.join(", "))));
    }
    let mut rows = Vec::with_capacity(gt_files.len());
    for path in &gt_files {
        let name = path.file_name().expect("listed file");
        let gt = load_labelmap(path)?;
        let pred = load_labelmap(&pred_dir.join(name))?;
        rows.push(EvalRow { name: name.to_string_lossy().into_owned(), ari: ari(&gt, &pred)?, iou: hungarian_iou(&gt, &pred)?.mean_iou });
    }
    let n = rows.len() as f64;
    let mean_ari = rows.iter().map(|r| r.ari).sum::<f64>() / n;
    let mean_iou = rows.iter().map(|r| r.iou).sum::<f64>() / n;
    Ok(EvalReport { rows, mean_ari, mean_iou })
}

/// One row per image, then a `mean` row.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["image", "ari", "iou"]).map_err(|e| csv_error(path, e))?;
    for r in &report.rows {
        w.write_record([r.name.clone(), r.ari.to_string(), r.iou.to_string()]).map_err(|e| csv_error(path, e))?;
    }
    w.write_record(["mean".to_string(), report.mean_ari.to_string(), report.mean_iou.to_string()])
        .map_err(|e| csv_error(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
