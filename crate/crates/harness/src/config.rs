//! Experiment configuration: a TOML document with fixed sections.
//!
//! Every key is optional and falls back to the defaults below; unknown keys
//! are rejected. See `docs/config.md` for the grammar.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vce_core::diffusion::{make_schedule, NoiseSchedule};
use vce_core::guidance::{ConeConfig, GuidanceConfig};
use vce_core::models::{TrainHyper, Variant};

use crate::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Mnist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub seed: u64,
    /// Synthetic samples per class before the split.
    pub per_class: usize,
    pub resolution: usize,
    pub val_fraction: f64,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            seed: 1,
            per_class: 500,
            resolution: 16,
            val_fraction: 0.2,
            mnist_images: None,
            mnist_labels: None,
        }
    }
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        match self.kind {
            DatasetKind::Synthetic => vce_core::data::SHAPE_CLASSES.len(),
            DatasetKind::Mnist => 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: vce_core::diffusion::DEFAULT_STEPS,
            beta_start: vce_core::diffusion::DEFAULT_BETA_START,
            beta_end: vce_core::diffusion::DEFAULT_BETA_END,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end).map_err(|e| HarnessError::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
}

impl TrainingConfig {
    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            clip_norm: self.clip_norm,
            ..TrainHyper::default()
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 2e-3,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub seed: u64,
    #[serde(flatten)]
    pub training: TrainingConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            seed: 3,
            training: TrainingConfig {
                epochs: 30,
                ..TrainingConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub id: String,
    pub variant: Variant,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSection {
    #[serde(flatten)]
    pub training: TrainingConfig,
    pub models: Vec<ModelSpec>,
    /// Classifiers explained in the experiment.
    pub subjects: Vec<String>,
    pub robust_model: String,
    /// Oracle committee; the subject itself is always left out.
    pub oracles: Vec<String>,
    pub featurenet: String,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let spec = |id: &str, variant, seed| ModelSpec {
            id: id.to_string(),
            variant,
            seed,
        };
        Self {
            training: TrainingConfig {
                epochs: 8,
                ..TrainingConfig::default()
            },
            models: vec![
                spec("standard", Variant::Standard, 10),
                spec("robustnoise", Variant::RobustNoise, 11),
                spec("lowcap", Variant::LowCap, 12),
                spec("featurenet", Variant::FeatureNet, 13),
                spec("randomnet", Variant::RandomNet, 14),
            ],
            subjects: vec!["standard".into(), "robustnoise".into(), "lowcap".into(), "randomnet".into()],
            robust_model: "robustnoise".into(),
            oracles: vec!["standard".into(), "robustnoise".into(), "lowcap".into()],
            featurenet: "featurenet".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub scale: f64,
    pub use_x0_prediction: bool,
    pub cone: bool,
    pub half_angle_deg: f64,
    pub start_fraction: f64,
    pub reject_invalid: bool,
    pub clamp_x0: bool,
}

/// Guidance scale calibrated on the shapes dataset.
pub const CALIBRATED_SCALE: f64 = 15.0;

impl Default for GuidanceSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        Self {
            scale: CALIBRATED_SCALE,
            use_x0_prediction: g.use_x0_prediction,
            cone: true,
            half_angle_deg: vce_core::guidance::DEFAULT_HALF_ANGLE_DEG,
            start_fraction: g.start_fraction,
            reject_invalid: g.reject_invalid,
            clamp_x0: g.clamp_x0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub originals_per_class: usize,
    /// `[source, target]` pairs; empty means the dataset's default pairing.
    pub ideal_pairs: Vec<[usize; 2]>,
    /// Principal directions of the featurenet embedding kept for FID.
    pub fid_features: usize,
    /// Chains generated together in one batch.
    pub batch_size: usize,
    pub workers: usize,
    /// Example pairs per row of the image grids.
    pub grid_columns: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            originals_per_class: 32,
            ideal_pairs: Vec::new(),
            fid_features: 16,
            batch_size: 32,
            workers: 1,
            grid_columns: 8,
        }
    }
}

/// Which ablation variants to run besides the base setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub cone: bool,
    pub x0pred: bool,
    pub targets: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            cone: true,
            x0pred: true,
            targets: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Checkpoint directory; defaults to `<out_dir>/models`.
    pub models_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub diffusion: DiffusionConfig,
    pub denoiser: DenoiserConfig,
    pub classifiers: ClassifierSection,
    pub guidance: GuidanceSection,
    pub experiment: ExperimentSection,
    pub ablation: AblationSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            models_dir: None,
            dataset: DatasetConfig::default(),
            diffusion: DiffusionConfig::default(),
            denoiser: DenoiserConfig::default(),
            classifiers: ClassifierSection::default(),
            guidance: GuidanceSection::default(),
            experiment: ExperimentSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

/// Visually near pairs of the shapes set: filled↔hollow square, disc↔ring,
/// cross↔stripe.
pub const SHAPES_IDEAL_PAIRS: [[usize; 2]; 6] = [[0, 1], [1, 0], [2, 3], [3, 2], [4, 5], [5, 4]];
pub const MNIST_IDEAL_PAIRS: [[usize; 2]; 6] = [[3, 8], [4, 9], [1, 7], [5, 6], [7, 1], [9, 4]];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON form, ignoring where outputs go.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.models_dir.clone().unwrap_or_else(|| self.out_dir.join("models"))
    }

    pub fn ideal_pairs(&self) -> Vec<[usize; 2]> {
        if !self.experiment.ideal_pairs.is_empty() {
            return self.experiment.ideal_pairs.clone();
        }
        match self.dataset.kind {
            DatasetKind::Synthetic => SHAPES_IDEAL_PAIRS.to_vec(),
            DatasetKind::Mnist => MNIST_IDEAL_PAIRS.to_vec(),
        }
    }

    /// For each ideal source, every other class except its ideal target.
    pub fn non_ideal_pairs(&self) -> Vec<[usize; 2]> {
        let classes = self.dataset.num_classes();
        self.ideal_pairs()
            .iter()
            .flat_map(|&[s, t]| (0..classes).filter(move |&c| c != s && c != t).map(move |c| [s, c]))
            .collect()
    }

    pub fn model(&self, id: &str) -> Option<&ModelSpec> {
        self.classifiers.models.iter().find(|m| m.id == id)
    }

    /// Guidance settings of the base setup.
    pub fn guidance_config(&self) -> GuidanceConfig {
        let g = &self.guidance;
        GuidanceConfig {
            scale: g.scale,
            use_x0_prediction: g.use_x0_prediction,
            cone: g.cone.then(|| ConeConfig {
                robust_model: self.classifiers.robust_model.clone(),
                half_angle_deg: g.half_angle_deg,
            }),
            start_fraction: g.start_fraction,
            seed: self.seed,
            reject_invalid: g.reject_invalid,
            clamp_x0: g.clamp_x0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HarnessError::Config(m));
        let classes = self.dataset.num_classes();
        if self.dataset.kind == DatasetKind::Mnist && (self.dataset.mnist_images.is_none() || self.dataset.mnist_labels.is_none()) {
            return err("mnist dataset needs mnist_images and mnist_labels".into());
        }
        if self.dataset.per_class == 0 || self.dataset.resolution < 8 || self.dataset.resolution % 4 != 0 {
            return err("dataset needs per_class >= 1 and a resolution that is a multiple of 4 and >= 8".into());
        }
        if !(self.dataset.val_fraction > 0.0 && self.dataset.val_fraction < 1.0) {
            return err(format!("val_fraction must lie in (0, 1), got {}", self.dataset.val_fraction));
        }
        let sched = self.diffusion.schedule()?;

        let mut ids = BTreeSet::new();
        for m in &self.classifiers.models {
            if !ids.insert(m.id.as_str()) {
                return err(format!("duplicate classifier id {}", m.id));
            }
        }
        let known = |id: &str, role: &str| -> Result<()> {
            if ids.contains(id) {
                Ok(())
            } else {
                Err(HarnessError::Config(format!("{role} {id} is not in the classifier roster")))
            }
        };
        let c = &self.classifiers;
        known(&c.featurenet, "featurenet")?;
        known(&c.robust_model, "robust model")?;
        if c.subjects.is_empty() {
            return err("no subjects configured".into());
        }
        for s in &c.subjects {
            known(s, "subject")?;
            if *s == c.featurenet || self.model(s).is_some_and(|m| m.variant == Variant::FeatureNet) {
                return err(format!("featurenet {s} cannot be a subject"));
            }
        }
        for o in &c.oracles {
            known(o, "oracle")?;
        }

        let pairs = self.ideal_pairs();
        let mut sources = BTreeSet::new();
        for &[s, t] in &pairs {
            if s == t || s >= classes || t >= classes {
                return err(format!("invalid ideal pair {s} -> {t} for {classes} classes"));
            }
            if !sources.insert(s) {
                return err(format!("source {s} has more than one ideal target"));
            }
        }
        let e = &self.experiment;
        if e.originals_per_class == 0 || e.batch_size == 0 || e.workers == 0 || e.grid_columns == 0 {
            return err("originals_per_class, batch_size, workers and grid_columns must be positive".into());
        }
        if e.fid_features == 0 {
            return err("fid_features must be positive".into());
        }
        self.guidance_config()
            .validate(&sched)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }
}
