//! Group runs: one subject, one source→target pair, one guidance setup.
//!
//! Records are appended to a JSON-lines file per group as batches finish, and
//! a manifest in the output directory tracks which groups are complete so an
//! interrupted run can pick up where it stopped.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use tensorgrad::Tensor;
use vce_core::derive_seed;
use vce_core::guidance::{generate_batch, CounterfactualRecord, GuidanceConfig, Guide, Outcome, VceRequest};
use vce_core::metrics::{fid, lpips_batch, minkowski, oracle_score, oracle_target_accuracy, validity};
use vce_core::models::{ClassifierModel, Variant};

use crate::config::ExperimentConfig;
use crate::zoo::Zoo;
use crate::{HarnessError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Per-layer weights of the perceptual distance.
pub const LPIPS_WEIGHTS: [f64; 3] = [1.0, 1.0, 1.0];

/// Guidance setup of a group: the base setup, the three architecture
/// ablations on ideal pairs, and the base setup on non-ideal pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setup {
    Base,
    NoCone,
    NoX0,
    NoConeNoX0,
    NonIdeal,
}

impl Setup {
    pub const ALL: [Setup; 5] = [Setup::Base, Setup::NoCone, Setup::NoX0, Setup::NoConeNoX0, Setup::NonIdeal];

    pub fn name(self) -> &'static str {
        match self {
            Setup::Base => "base",
            Setup::NoCone => "no-cone",
            Setup::NoX0 => "no-x0",
            Setup::NoConeNoX0 => "no-cone-no-x0",
            Setup::NonIdeal => "non-ideal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Setups enabled by the ablation toggles; the base setup is always first.
    pub fn grid(cfg: &ExperimentConfig) -> Vec<Setup> {
        let a = &cfg.ablation;
        let mut out = vec![Setup::Base];
        if a.cone {
            out.push(Setup::NoCone);
        }
        if a.x0pred {
            out.push(Setup::NoX0);
        }
        if a.cone && a.x0pred {
            out.push(Setup::NoConeNoX0);
        }
        if a.targets {
            out.push(Setup::NonIdeal);
        }
        out
    }

    pub fn guidance(self, cfg: &ExperimentConfig) -> GuidanceConfig {
        let mut g = cfg.guidance_config();
        if matches!(self, Setup::NoCone | Setup::NoConeNoX0) {
            g.cone = None;
        }
        if matches!(self, Setup::NoX0 | Setup::NoConeNoX0) {
            g.use_x0_prediction = false;
        }
        g
    }

    pub fn pairs(self, cfg: &ExperimentConfig) -> Vec<[usize; 2]> {
        match self {
            Setup::NonIdeal => cfg.non_ideal_pairs(),
            _ => cfg.ideal_pairs(),
        }
    }
}

impl std::fmt::Display for Setup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub setup: Setup,
    pub subject: String,
    pub source: usize,
    pub target: usize,
}

impl GroupKey {
    /// Records file relative to the output directory.
    pub fn records_file(&self) -> PathBuf {
        PathBuf::from("records")
            .join(self.setup.name())
            .join(&self.subject)
            .join(format!("{}-{}.jsonl", self.source, self.target))
    }
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{} {}->{}", self.setup, self.subject, self.source, self.target)
    }
}

/// Seed of record `k` in the group for `source → target`.
pub fn record_seed(cfg: &ExperimentConfig, source: usize, target: usize, k: usize) -> u64 {
    let pair = (source * cfg.dataset.num_classes() + target) as u64;
    derive_seed(derive_seed(cfg.seed, pair), k as u64)
}

/// Validation images of `class` used as originals, in dataset order.
pub fn originals(zoo: &Zoo, class: usize, count: usize) -> Result<Vec<usize>> {
    let idx = zoo.val.indices_of_class(class);
    if idx.len() < count {
        return Err(HarnessError::Config(format!(
            "class {class} has {} validation images, {count} originals requested",
            idx.len()
        )));
    }
    Ok(idx[..count].to_vec())
}

pub fn requests(cfg: &ExperimentConfig, zoo: &Zoo, source: usize, target: usize) -> Result<Vec<VceRequest>> {
    Ok(originals(zoo, source, cfg.experiment.originals_per_class)?
        .into_iter()
        .enumerate()
        .map(|(k, i)| VceRequest {
            index: k,
            original: zoo.val.image(i),
            source,
            target,
            seed: record_seed(cfg, source, target, k),
        })
        .collect())
}

/// Oracles scoring `subject`: the configured committee minus the subject.
pub fn committee<'z>(cfg: &ExperimentConfig, zoo: &'z Zoo, subject: &str) -> Result<Vec<&'z ClassifierModel>> {
    cfg.classifiers
        .oracles
        .iter()
        .filter(|id| id.as_str() != subject)
        .map(|id| zoo.classifier(id))
        .filter(|m| !matches!(m, Ok(m) if m.variant() == Variant::RandomNet))
        .collect()
}

fn append_records(path: &Path, records: &[CounterfactualRecord]) -> Result<()> {
    let mut file = OpenOptions::new().append(true).open(path).map_err(HarnessError::io(path))?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    file.write_all(&buf).map_err(HarnessError::io(path))?;
    file.sync_data().map_err(HarnessError::io(path))
}

/// Complete lines of a records file; a torn last line is dropped.
pub fn read_records(path: &Path) -> Result<Vec<CounterfactualRecord>> {
    let file = File::open(path).map_err(HarnessError::io(path))?;
    let mut out = Vec::new();
    let mut lines = BufReader::new(file).lines().peekable();
    while let Some(line) = lines.next() {
        let line = line.map_err(HarnessError::io(path))?;
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(_) if lines.peek().is_none() => warn!("{}: dropping torn last line", path.display()),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Generates the records of one group, streaming them to
/// `out/<records file>`. With `resume`, records already on disk are kept
/// and only the rest are generated.
pub fn run_group(
    cfg: &ExperimentConfig,
    zoo: &Zoo,
    key: &GroupKey,
    out: &Path,
    resume: bool,
) -> Result<Vec<CounterfactualRecord>> {
    let guidance = key.setup.guidance(cfg);
    let subject = zoo.classifier(&key.subject)?;
    let robust = match &guidance.cone {
        Some(c) => Some(zoo.classifier(&c.robust_model)?),
        None => None,
    };
    let guide = Guide {
        subject,
        robust,
        denoiser: &zoo.denoiser,
        sched: &zoo.sched,
    };
    let all = requests(cfg, zoo, key.source, key.target)?;

    let path = out.join(key.records_file());
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    let mut records = if resume && path.exists() { read_records(&path)? } else { Vec::new() };
    if records.len() > all.len() || records.iter().zip(&all).any(|(r, q)| r.seed() != q.seed || r.index() != q.index) {
        return Err(HarnessError::Manifest(format!("{} does not match group {key}", path.display())));
    }
    // rewrite so a torn tail is gone before appending
    let mut file = File::create(&path).map_err(HarnessError::io(&path))?;
    file.flush().map_err(HarnessError::io(&path))?;
    append_records(&path, &records)?;

    let pending = &all[records.len()..];
    let workers = cfg.experiment.workers.max(1);
    let batches: Vec<&[VceRequest]> = pending.chunks(cfg.experiment.batch_size).collect();
    for wave in batches.chunks(workers) {
        let results: Vec<Result<Vec<CounterfactualRecord>>> = if wave.len() == 1 {
            vec![generate_batch(&guide, &guidance, wave[0]).map_err(Into::into)]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|b| s.spawn(|| generate_batch(&guide, &guidance, b).map_err(HarnessError::from)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(HarnessError::Report("generation worker panicked".into()))))
                    .collect()
            })
        };
        for batch in results {
            let batch = batch?;
            append_records(&path, &batch)?;
            records.extend(batch);
        }
    }
    Ok(records)
}

/// Metrics of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub setup: Setup,
    pub subject: String,
    pub source: usize,
    pub target: usize,
    /// Records with a prediction.
    pub samples: usize,
    pub failed: usize,
    pub rejected: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl GroupReport {
    pub fn key(&self) -> GroupKey {
        GroupKey {
            setup: self.setup,
            subject: self.subject.clone(),
            source: self.source,
            target: self.target,
        }
    }
}

fn stack(records: &[&CounterfactualRecord], f: impl Fn(&CounterfactualRecord) -> Tensor) -> Result<Tensor> {
    let parts = records.iter().map(|r| f(r).slice_outer(0)).collect::<tensorgrad::Result<Vec<_>>>()?;
    Ok(Tensor::stack(&parts)?)
}

/// Validity rates count every record with a prediction; oracle, distance
/// and FID metrics use the records that were not rejected.
pub fn evaluate_group(cfg: &ExperimentConfig, zoo: &Zoo, key: &GroupKey, records: &[CounterfactualRecord]) -> Result<GroupReport> {
    let failed = records.iter().filter(|r| r.is_failed()).count();
    let rejected = records.iter().filter(|r| r.is_rejected()).count();
    let mut report = GroupReport {
        setup: key.setup,
        subject: key.subject.clone(),
        source: key.source,
        target: key.target,
        samples: records.len() - failed,
        failed,
        rejected,
        metrics: BTreeMap::new(),
    };
    let m = &mut report.metrics;
    m.insert("failed".into(), failed as f64);
    m.insert("rejected".into(), rejected as f64);

    let live: Vec<&CounterfactualRecord> = records.iter().filter(|r| !r.is_failed()).collect();
    if live.is_empty() {
        warn!("group {key}: every generation failed");
        return Ok(report);
    }
    let preds: Vec<usize> = live.iter().filter_map(|r| r.predicted()).collect();
    let v = validity(&preds, key.source, key.target)?;
    m.insert("TA".into(), v.target);
    m.insert("OA".into(), v.original);
    m.insert("other".into(), v.other);

    let accepted: Vec<CounterfactualRecord> = live
        .iter()
        .filter(|r| matches!(r.outcome(), Outcome::Valid))
        .map(|r| (*r).clone())
        .collect();
    if accepted.is_empty() {
        return Ok(report);
    }
    let members = committee(cfg, zoo, &key.subject)?;
    if !members.is_empty() {
        let (mut os, mut ota) = (0.0, 0.0);
        for o in &members {
            let s = oracle_score(&accepted, o)?;
            let t = oracle_target_accuracy(&accepted, o)?;
            m.insert(format!("OS[{}]", o.id()), s);
            m.insert(format!("OTA[{}]", o.id()), t);
            os += s;
            ota += t;
        }
        m.insert("OS".into(), os / members.len() as f64);
        m.insert("OTA".into(), ota / members.len() as f64);
    }

    let acc: Vec<&CounterfactualRecord> = accepted.iter().collect();
    let n = acc.len() as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    for r in &acc {
        l1 += minkowski(&r.original(), &r.generated(), 1.0)?;
        l2 += minkowski(&r.original(), &r.generated(), 2.0)?;
    }
    m.insert("L1".into(), l1 / n);
    m.insert("L2".into(), l2 / n);
    let featurenet = zoo.classifier(&cfg.classifiers.featurenet)?;
    let originals = stack(&acc, |r| r.original())?;
    let generated = stack(&acc, |r| r.generated())?;
    let lp = lpips_batch(&originals, &generated, featurenet, &LPIPS_WEIGHTS)?;
    m.insert("LPIPS".into(), lp.iter().sum::<f64>() / n);

    let all_originals = stack(&live, |r| r.original())?;
    if acc.len() > zoo.space.dim() {
        m.insert("FID".into(), fid(&all_originals, &generated, featurenet, &zoo.space)?);
    } else {
        warn!("group {key}: {} images are too few for FID over {} features", acc.len(), zoo.space.dim());
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub key: GroupKey,
    pub records: PathBuf,
    pub seeds: Vec<u64>,
    pub complete: bool,
    pub seconds: f64,
}

/// Run state kept in `<out>/manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub schedule: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub groups: Vec<GroupEntry>,
    pub artifacts: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            version: VERSION.to_string(),
            schedule: cfg.diffusion.schedule()?.id(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            groups: Vec::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
        let m: Self = serde_json::from_slice(&bytes)?;
        if m.config.hash() != m.config_hash {
            return Err(HarnessError::Manifest(format!("{}: config does not match its hash", path.display())));
        }
        m.config.validate()?;
        Ok(m)
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let path = out.join(MANIFEST_FILE);
        let tmp = out.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?).map_err(HarnessError::io(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(HarnessError::io(&path))
    }

    pub fn entry(&self, key: &GroupKey) -> Option<&GroupEntry> {
        self.groups.iter().find(|g| g.key == *key)
    }

    fn upsert(&mut self, entry: GroupEntry) {
        match self.groups.iter_mut().find(|g| g.key == entry.key) {
            Some(g) => *g = entry,
            None => self.groups.push(entry),
        }
    }

    pub fn add_artifact(&mut self, path: PathBuf) {
        if !self.artifacts.contains(&path) {
            self.artifacts.push(path);
        }
    }
}

/// Group keys of `setups` × `subjects` in run order.
pub fn plan(cfg: &ExperimentConfig, setups: &[Setup]) -> Vec<GroupKey> {
    let mut keys = Vec::new();
    for &setup in setups {
        for subject in &cfg.classifiers.subjects {
            for [source, target] in setup.pairs(cfg) {
                keys.push(GroupKey {
                    setup,
                    subject: subject.clone(),
                    source,
                    target,
                });
            }
        }
    }
    keys
}

/// Runs every group of `setups` into `out`, skipping groups the manifest
/// marks complete and continuing partial ones. The manifest is rewritten
/// after each group.
pub fn run_setups(cfg: &ExperimentConfig, zoo: &Zoo, setups: &[Setup], out: &Path, mut manifest: Manifest) -> Result<Manifest> {
    if manifest.config_hash != cfg.hash() {
        return Err(HarnessError::Manifest("manifest was written for a different configuration".into()));
    }
    std::fs::create_dir_all(out).map_err(HarnessError::io(out))?;
    for key in plan(cfg, setups) {
        let records_file = key.records_file();
        let done = manifest.entry(&key).is_some_and(|e| e.complete) && out.join(&records_file).exists();
        if done {
            continue;
        }
        let start = Instant::now();
        let records = run_group(cfg, zoo, &key, out, true)?;
        let seconds = start.elapsed().as_secs_f64();
        info!("{key}: {} records in {seconds:.1}s", records.len());
        manifest.upsert(GroupEntry {
            key,
            records: records_file,
            seeds: records.iter().map(|r| r.seed()).collect(),
            complete: true,
            seconds,
        });
        manifest.save(out)?;
    }
    Ok(manifest)
}

/// Group reports for every complete group in the manifest, in run order.
pub fn evaluate_manifest(zoo: &Zoo, manifest: &Manifest, out: &Path) -> Result<Vec<GroupReport>> {
    let cfg = &manifest.config;
    let mut entries: Vec<&GroupEntry> = manifest.groups.iter().filter(|g| g.complete).collect();
    entries.sort_by(|a, b| a.key.cmp(&b.key));
    entries
        .into_iter()
        .map(|e| {
            let records = read_records(&out.join(&e.records))?;
            if records.len() != e.seeds.len() {
                return Err(HarnessError::Manifest(format!("group {} has {} of {} records", e.key, records.len(), e.seeds.len())));
            }
            evaluate_group(cfg, zoo, &e.key, &records)
        })
        .collect()
}
