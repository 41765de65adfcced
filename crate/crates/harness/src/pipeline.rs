//! Steps behind the CLI subcommands.

use std::path::Path;

use log::info;

use crate::aggregate::{delta_tables, summarize};
use crate::config::ExperimentConfig;
use crate::experiment::{committee, evaluate_manifest, read_records, run_setups, Manifest, Setup, VERSION};
use crate::report::{emit, image_grid, write_grid, JsonReport, REPORT_JSON};
use crate::zoo::Zoo;
use crate::{HarnessError, Result};

/// Runs `setups` into `out`. A manifest passed in continues that run.
pub fn generate(cfg: &ExperimentConfig, zoo: &Zoo, setups: &[Setup], out: &Path, resume: Option<Manifest>) -> Result<Manifest> {
    let manifest = match resume {
        Some(m) => m,
        None => Manifest::new(cfg)?,
    };
    std::fs::create_dir_all(out).map_err(HarnessError::io(out))?;
    manifest.save(out)?;
    run_setups(cfg, zoo, setups, out, manifest)
}

/// Scores every complete group of the manifest and writes the reports and
/// image grids.
pub fn evaluate(zoo: &Zoo, mut manifest: Manifest, out: &Path, minimal: bool) -> Result<JsonReport> {
    let cfg = manifest.config.clone();
    let groups = evaluate_manifest(zoo, &manifest, out)?;
    let summaries = summarize(&groups)?;
    let deltas = delta_tables(&summaries)?;
    let report = JsonReport {
        version: VERSION.to_string(),
        config_hash: manifest.config_hash.clone(),
        summaries,
        deltas,
        groups,
    };
    for path in emit(out, &report, minimal)? {
        manifest.add_artifact(path);
    }
    for g in &report.groups {
        let entry = manifest
            .entry(&g.key())
            .ok_or_else(|| HarnessError::Manifest(format!("no entry for group {}", g.key())))?;
        let records = read_records(&out.join(&entry.records))?;
        let members = committee(&cfg, zoo, &g.subject)?;
        let grid = image_grid(&records, &members, cfg.experiment.grid_columns)?;
        manifest.add_artifact(write_grid(out, g, &grid)?);
    }
    manifest.save(out)?;
    info!("reports written to {}", out.join("report").display());
    Ok(report)
}

/// Rewrites the tables from an existing JSON report.
pub fn render(out: &Path, minimal: bool) -> Result<JsonReport> {
    let path = out.join(REPORT_JSON);
    let bytes = std::fs::read(&path).map_err(HarnessError::io(&path))?;
    let report: JsonReport = serde_json::from_slice(&bytes)?;
    emit(out, &report, minimal)?;
    Ok(report)
}
