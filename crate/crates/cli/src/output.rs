//! Run-directory layout and the data files written into it.
//!
//! ```text
//! <output_dir>/config.toml          resolved configuration
//! <output_dir>/seed-<s>/checkpoints last.ckpt, best.ckpt, finetuned.ckpt
//! <output_dir>/seed-<s>/metrics.jsonl
//! <output_dir>/seed-<s>/summary.json
//! <output_dir>/seed-<s>/*.csv       report tables
//! <output_dir>/seed-<s>/plots/      plot data (.csv) and figures (.png)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use biva::training::MetricsRecord;

use crate::error::Result;
use crate::plot;

pub const CONFIG_ECHO: &str = "config.toml";
pub const METRICS: &str = "metrics.jsonl";
pub const SUMMARY: &str = "summary.json";
pub const CHECKPOINTS: &str = "checkpoints";
pub const PLOTS: &str = "plots";

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}

pub fn plots_dir(run: &Path) -> Result<PathBuf> {
    ensure_dir(&run.join(PLOTS))
}

pub fn write_json<S: Serialize + ?Sized>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes a header row and string rows.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.into_iter().collect::<Vec<_>>())?;
    }
    w.flush()?;
    Ok(())
}

pub fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

/// Directory a checkpoint's outputs belong to: the seed directory when the
/// checkpoint sits in its `checkpoints/` folder, its own folder otherwise.
pub fn run_dir_of(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if parent.file_name().is_some_and(|n| n == CHECKPOINTS) {
        parent.parent().unwrap_or(parent).to_path_buf()
    } else {
        parent.to_path_buf()
    }
}

/// Per-variable KL by epoch, as `activity.csv` and a line figure.
pub fn write_activity(run: &Path, names: &[String], records: &[MetricsRecord]) -> Result<()> {
    let mut header = vec!["split", "epoch"];
    header.extend(names.iter().map(String::as_str));
    write_csv(
        &run.join("activity.csv"),
        &header,
        records.iter().map(|r| {
            let mut row = vec![r.split.clone(), r.epoch.to_string()];
            row.extend(r.per_layer_kl.iter().map(|&v| fmt(v)));
            row
        }),
    )?;
    let series: Vec<Vec<(f64, f64)>> = (0..names.len())
        .map(|v| records.iter().filter_map(|r| r.per_layer_kl.get(v).map(|&k| (r.epoch as f64, k))).collect())
        .collect();
    plot::lines(&plots_dir(run)?.join("activity.png"), &series)
}
