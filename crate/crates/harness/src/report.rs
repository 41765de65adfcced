//! Report files: CSV, JSON, markdown tables and PGM image grids.
//!
//! CSV columns are fixed: `variant,subject,metric,mean,std,groups`. Numbers
//! are written in shortest round-trip form, so parsing a CSV gives back the
//! exact summaries it was written from.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vce_core::guidance::CounterfactualRecord;
use vce_core::models::ClassifierModel;

use crate::aggregate::{MetricStat, Summary};
use crate::experiment::{GroupReport, Setup};
use crate::{HarnessError, Result};

pub const CSV_HEADER: [&str; 6] = ["variant", "subject", "metric", "mean", "std", "groups"];

/// Metrics kept by `--minimal`.
pub const MINIMAL_METRICS: [&str; 4] = ["TA", "OTA", "LPIPS", "FID"];

const METRIC_ORDER: [&str; 11] = ["TA", "OA", "other", "OS", "OTA", "L1", "L2", "LPIPS", "FID", "failed", "rejected"];

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    variant: String,
    subject: String,
    metric: String,
    mean: f64,
    std: f64,
    groups: usize,
}

pub fn write_csv(summaries: &[Summary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for s in summaries {
        for (metric, stat) in &s.metrics {
            w.write_record([
                s.setup.name().to_string(),
                s.subject.clone(),
                metric.clone(),
                stat.mean.to_string(),
                stat.std.to_string(),
                stat.groups.to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| HarnessError::Report(e.to_string()))
}

/// Summaries from a CSV written by [`write_csv`], in row order.
pub fn parse_csv(bytes: &[u8]) -> Result<Vec<Summary>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(HarnessError::Report(format!("unexpected CSV header {header:?}")));
    }
    let mut out: Vec<Summary> = Vec::new();
    for row in r.deserialize() {
        let row: CsvRow = row?;
        let setup = Setup::parse(&row.variant).ok_or_else(|| HarnessError::Report(format!("unknown variant {}", row.variant)))?;
        let stat = MetricStat {
            mean: row.mean,
            std: row.std,
            groups: row.groups,
        };
        match out.last_mut() {
            Some(s) if s.setup == setup && s.subject == row.subject => {
                s.metrics.insert(row.metric, stat);
            }
            _ => out.push(Summary {
                setup,
                subject: row.subject,
                metrics: [(row.metric, stat)].into_iter().collect(),
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonReport {
    pub version: String,
    pub config_hash: String,
    pub summaries: Vec<Summary>,
    pub deltas: Vec<Summary>,
    pub groups: Vec<GroupReport>,
}

fn ordered_metrics(summaries: &[&Summary], minimal: bool) -> Vec<String> {
    if minimal {
        return MINIMAL_METRICS.iter().map(|m| m.to_string()).collect();
    }
    let present: BTreeSet<&str> = summaries.iter().flat_map(|s| s.metrics.keys().map(String::as_str)).collect();
    let mut out: Vec<String> = METRIC_ORDER.iter().filter(|m| present.contains(*m)).map(|m| m.to_string()).collect();
    out.extend(present.iter().filter(|m| !METRIC_ORDER.contains(m)).map(|m| m.to_string()));
    out
}

fn table(out: &mut String, title: &str, summaries: &[&Summary], minimal: bool, signed: bool) {
    let _ = writeln!(out, "## {title}\n");
    let _ = write!(out, "| metric |");
    for s in summaries {
        let _ = write!(out, " {} |", s.subject);
    }
    let _ = write!(out, "\n|---|");
    for _ in summaries {
        let _ = write!(out, "---|");
    }
    out.push('\n');
    for metric in ordered_metrics(summaries, minimal) {
        let _ = write!(out, "| {metric} |");
        for s in summaries {
            match s.metrics.get(&metric) {
                Some(m) if signed => {
                    let _ = write!(out, " {:+.3} ± {:+.3} |", m.mean, m.std);
                }
                Some(m) => {
                    let _ = write!(out, " {:.3} ± {:.3} |", m.mean, m.std);
                }
                None => out.push_str(" n/a |"),
            }
        }
        out.push('\n');
    }
    out.push('\n');
}

/// One table per setup (rows are metrics, columns subjects), then one delta
/// table per ablation.
pub fn markdown(summaries: &[Summary], deltas: &[Summary], minimal: bool) -> String {
    let mut out = String::from("# Counterfactual metrics\n\nValues are mean ± population std across groups.\n\n");
    for setup in Setup::ALL {
        let rows: Vec<&Summary> = summaries.iter().filter(|s| s.setup == setup).collect();
        if !rows.is_empty() {
            table(&mut out, setup.name(), &rows, minimal, false);
        }
    }
    for setup in Setup::ALL {
        let rows: Vec<&Summary> = deltas.iter().filter(|s| s.setup == setup).collect();
        if !rows.is_empty() {
            table(&mut out, &format!("change of {setup} against base"), &rows, minimal, true);
        }
    }
    out
}

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = || HarnessError::Report("not a binary 8-bit PGM".into());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
        }
        pos += 1;
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        let (width, height) = (num(&fields[1])?, num(&fields[2])?);
        if fields[0] != "P5" || fields[3] != "255" || bytes.len() < pos || bytes.len() - pos != width * height {
            return Err(bad());
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..].to_vec(),
        })
    }
}

/// Row of an example in the image grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridRow {
    /// Subject and committee majority both see the target.
    Success,
    /// The subject does not see the target.
    InsufficientChange,
    /// Generation failed, or only the subject sees the target.
    Failed,
}

pub fn classify(record: &CounterfactualRecord, committee: &[&ClassifierModel]) -> Result<GridRow> {
    let Some(pred) = record.predicted() else {
        return Ok(GridRow::Failed);
    };
    if pred != record.target() {
        return Ok(GridRow::InsufficientChange);
    }
    if committee.is_empty() {
        return Ok(GridRow::Success);
    }
    let x = record.generated();
    let mut votes = 0;
    for o in committee {
        if o.predict(&x)?[0] == record.target() {
            votes += 1;
        }
    }
    Ok(if 2 * votes > committee.len() { GridRow::Success } else { GridRow::Failed })
}

const PAD: usize = 1;
const BACKGROUND: u8 = 128;

/// Pixel size of a 3-row grid of `columns` (original, VCE) pairs.
pub fn grid_size(columns: usize, height: usize, width: usize) -> (usize, usize) {
    (PAD + columns * (2 * width + 1 + PAD), PAD + 3 * (height + PAD))
}

/// Three rows (success, insufficient change, failed) of up to `columns`
/// (original, VCE) pairs each, filled in record order.
pub fn image_grid(records: &[CounterfactualRecord], committee: &[&ClassifierModel], columns: usize) -> Result<Pgm> {
    let first = records.first().ok_or_else(|| HarnessError::Report("image grid of no records".into()))?;
    let (h, w) = (first.original().shape()[2], first.original().shape()[3]);
    let (width, height) = grid_size(columns, h, w);
    let mut img = Pgm {
        width,
        height,
        pixels: vec![BACKGROUND; width * height],
    };
    let mut filled = [0usize; 3];
    for r in records {
        let row = classify(r, committee)? as usize;
        if filled[row] == columns {
            continue;
        }
        let (x0, y0) = (PAD + filled[row] * (2 * w + 1 + PAD), PAD + row * (h + PAD));
        filled[row] += 1;
        let generated = if r.is_failed() { None } else { Some(r.generated()) };
        for (offset, tensor) in [(0, Some(r.original())), (w + 1, generated)] {
            let Some(t) = tensor else { continue };
            for y in 0..h {
                for x in 0..w {
                    let v = t.data()[y * w + x];
                    img.pixels[(y0 + y) * width + x0 + offset + x] = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8;
                }
            }
        }
    }
    Ok(img)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    std::fs::write(path, bytes).map_err(HarnessError::io(path))
}

/// Files written by [`emit`], relative to the output directory.
pub const SUMMARY_CSV: &str = "report/summary.csv";
pub const DELTAS_CSV: &str = "report/deltas.csv";
pub const REPORT_JSON: &str = "report/report.json";
pub const REPORT_MD: &str = "report/report.md";

/// Writes CSV, JSON and markdown reports under `out`; returns their paths
/// relative to `out`.
pub fn emit(out: &Path, report: &JsonReport, minimal: bool) -> Result<Vec<PathBuf>> {
    let files: [(&str, Vec<u8>); 4] = [
        (SUMMARY_CSV, write_csv(&report.summaries)?),
        (DELTAS_CSV, write_csv(&report.deltas)?),
        (REPORT_JSON, serde_json::to_vec_pretty(report)?),
        (REPORT_MD, markdown(&report.summaries, &report.deltas, minimal).into_bytes()),
    ];
    let mut written = Vec::new();
    for (name, bytes) in files {
        write_file(&out.join(name), &bytes)?;
        written.push(PathBuf::from(name));
    }
    Ok(written)
}

pub fn grid_file(report: &GroupReport) -> PathBuf {
    PathBuf::from("report/grids")
        .join(report.setup.name())
        .join(&report.subject)
        .join(format!("{}-{}.pgm", report.source, report.target))
}

pub fn write_grid(out: &Path, report: &GroupReport, grid: &Pgm) -> Result<PathBuf> {
    let rel = grid_file(report);
    write_file(&out.join(&rel), &grid.encode())?;
    Ok(rel)
}
