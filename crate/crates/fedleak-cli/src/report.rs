//! Artifact inspection: `stats` lists what a run directory contains,
//! `report` merges several runs into one comparison CSV. Both are pure
//! functions of the on-disk artifacts, so re-running them on the same
//! directories reproduces the same bytes.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

#[derive(Deserialize)]
struct ManifestView {
    #[serde(default)]
    name: String,
    seed: u64,
    #[serde(default)]
    stages: Vec<String>,
}

/// One line per artifact file: relative path and CSV row count (blank for
/// non-CSV files). Missing or empty directories yield just the header.
pub fn stats(dir: &Path) -> Result<String> {
    let mut out = String::from("artifact,rows\n");
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files);
    files.sort();
    for rel in files {
        let full = dir.join(&rel);
        let rows = if rel.ends_with(".csv") {
            let text = fs::read_to_string(&full)
                .with_context(|| format!("reading {}", full.display()))?;
            // header excluded
            format!("{}", text.lines().count().saturating_sub(1))
        } else {
            String::new()
        };
        out.push_str(&format!("{},{}\n", rel, rows));
    }
    Ok(out)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return,
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.display().to_string());
        }
    }
}

/// Merges run directories into a comparison table, one row per run:
/// headline leakage and downstream numbers side by side. Missing artifacts
/// leave their cells empty.
pub fn report(dirs: &[&Path]) -> Result<String> {
    let mut out = String::from(
        "run,seed,attack,mean_leak_fraction,gi_mean_psnr,centralized,leaked_scratch,leaked_finetune\n",
    );
    for dir in dirs {
        let manifest_path = dir.join("manifest.json");
        let manifest: ManifestView = serde_json::from_str(
            &fs::read_to_string(&manifest_path)
                .with_context(|| format!("reading {}", manifest_path.display()))?,
        )
        .with_context(|| format!("parsing {}", manifest_path.display()))?;
        let name = if manifest.name.is_empty() {
            dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        } else {
            manifest.name.clone()
        };
        let attack = manifest
            .stages
            .iter()
            .find_map(|s| s.strip_prefix("attack: "))
            .map(|s| s.split_whitespace().next().unwrap_or("").to_string())
            .unwrap_or_default();

        let leak = csv_column_mean(&dir.join("reports/leakage.csv"), "fraction")?
            .map(|v| format!("{:.6}", v))
            .unwrap_or_default();
        let gi = csv_column_mean(&dir.join("reports/gi_sweep.csv"), "mean_psnr")?
            .map(|v| format!("{:.4}", v))
            .unwrap_or_default();
        let (central, scratch, finetune) = downstream_cells(&dir.join("reports/downstream.csv"))?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            name, manifest.seed, attack, leak, gi, central, scratch, finetune
        ));
    }
    Ok(out)
}

/// Mean of a named column; `None` when the file is absent.
fn csv_column_mean(path: &Path, column: &str) -> Result<Option<f64>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty csv")?;
    let col = header
        .split(',')
        .position(|h| h == column)
        .with_context(|| format!("{}: no column {:?}", path.display(), column))?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for line in lines {
        let cell = line.split(',').nth(col).unwrap_or("");
        if let Ok(v) = cell.parse::<f64>() {
            sum += v;
            n += 1;
        }
    }
    Ok(if n == 0 { None } else { Some(sum / n as f64) })
}

fn downstream_cells(path: &Path) -> Result<(String, String, String)> {
    let mut cells = (String::new(), String::new(), String::new());
    if !path.exists() {
        return Ok(cells);
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    for line in text.lines().skip(1) {
        let mut parts = line.split(',');
        let setting = parts.next().unwrap_or("");
        let acc = parts.next().unwrap_or("").to_string();
        match setting {
            "centralized" => cells.0 = acc,
            "leaked_scratch" => cells.1 = acc,
            "leaked_finetune" => cells.2 = acc,
            _ => {}
        }
    }
    Ok(cells)
}
