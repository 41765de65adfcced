//! Datasets and trained models on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use vce_core::data::{load_idx_files, prepare_mnist, stratified_split, synth_shapes, LabeledDataset};
use vce_core::diffusion::NoiseSchedule;
use vce_core::metrics::{embeddings, EmbeddingSpace};
use vce_core::models::{train_classifier, train_denoiser, ClassifierModel, DenoiserModel, UNetConfig};

use crate::config::{DatasetKind, ExperimentConfig, ModelSpec};
use crate::{HarnessError, Result};

/// Train and validation splits; originals are drawn from validation.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let d = &cfg.dataset;
    let full = match d.kind {
        DatasetKind::Synthetic => synth_shapes(d.seed, d.per_class, d.resolution)?,
        DatasetKind::Mnist => {
            let (Some(images), Some(labels)) = (&d.mnist_images, &d.mnist_labels) else {
                return Err(HarnessError::Config("mnist dataset needs image and label files".into()));
            };
            prepare_mnist(&load_idx_files(images, labels)?)?
        }
    };
    if full.height() != d.resolution {
        return Err(HarnessError::Config(format!(
            "dataset resolution {} does not match configured {}",
            full.height(),
            d.resolution
        )));
    }
    Ok(stratified_split(&full, d.val_fraction, d.seed)?)
}

pub fn denoiser_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.models_dir().join("denoiser.vceb")
}

pub fn classifier_path(cfg: &ExperimentConfig, id: &str) -> PathBuf {
    cfg.models_dir().join(format!("{id}.vceb"))
}

fn unet_config(cfg: &ExperimentConfig) -> UNetConfig {
    UNetConfig {
        resolution: cfg.dataset.resolution,
        steps: cfg.diffusion.steps,
        ..UNetConfig::default()
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(HarnessError::io(path))
}

pub fn fit_denoiser(cfg: &ExperimentConfig, train: &LabeledDataset) -> Result<DenoiserModel> {
    let sched = cfg.diffusion.schedule()?;
    let start = Instant::now();
    let model = train_denoiser(train, &sched, unet_config(cfg), &cfg.denoiser.training.hyper(), cfg.denoiser.seed)?;
    info!(
        "denoiser: loss {:?} -> {:?} in {:.1}s",
        model.record().initial_loss,
        model.record().final_loss,
        start.elapsed().as_secs_f64()
    );
    let path = denoiser_path(cfg);
    create_dir(&cfg.models_dir())?;
    model.save(&path)?;
    Ok(model)
}

pub fn fit_classifier(cfg: &ExperimentConfig, spec: &ModelSpec, train: &LabeledDataset, val: &LabeledDataset) -> Result<ClassifierModel> {
    let start = Instant::now();
    let model = train_classifier(&spec.id, train, Some(val), spec.variant, &cfg.classifiers.training.hyper(), spec.seed)?;
    info!(
        "{}: val accuracy {:?} in {:.1}s",
        spec.id,
        model.record().val_accuracy,
        start.elapsed().as_secs_f64()
    );
    create_dir(&cfg.models_dir())?;
    model.save(&classifier_path(cfg, &spec.id))?;
    Ok(model)
}

/// Whether a stored denoiser was produced by the configured recipe.
fn denoiser_current(cfg: &ExperimentConfig, model: &DenoiserModel, sched: &NoiseSchedule) -> bool {
    let r = model.record();
    *model.arch() == unet_config(cfg)
        && r.seed == cfg.denoiser.seed
        && r.epochs == cfg.denoiser.training.epochs
        && r.schedule_id.as_deref() == Some(sched.id().as_str())
}

fn classifier_current(cfg: &ExperimentConfig, spec: &ModelSpec, model: &ClassifierModel) -> bool {
    model.id() == spec.id
        && model.variant() == spec.variant
        && model.record().seed == spec.seed
        && (model.record().epochs == cfg.classifiers.training.epochs || model.record().steps == 0)
        && model.num_classes() == cfg.dataset.num_classes()
}

/// Everything a run reads: schedule, denoiser, classifiers, validation split
/// and the FID embedding space. Shared read-only by all workers.
pub struct Zoo {
    pub sched: NoiseSchedule,
    pub denoiser: DenoiserModel,
    pub classifiers: BTreeMap<String, ClassifierModel>,
    pub val: LabeledDataset,
    pub space: EmbeddingSpace,
}

impl Zoo {
    /// Loads every checkpoint the configuration references; a missing file
    /// is an error.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let sched = cfg.diffusion.schedule()?;
        let path = denoiser_path(cfg);
        if !path.exists() {
            return Err(HarnessError::MissingCheckpoint(path));
        }
        let denoiser = DenoiserModel::load(&path)?;
        if denoiser.record().schedule_id.as_deref() != Some(sched.id().as_str()) {
            return Err(HarnessError::Config(format!(
                "denoiser {} was trained for schedule {:?}, configured {}",
                path.display(),
                denoiser.record().schedule_id,
                sched.id()
            )));
        }
        let mut classifiers = BTreeMap::new();
        for spec in &cfg.classifiers.models {
            let path = classifier_path(cfg, &spec.id);
            if !path.exists() {
                return Err(HarnessError::MissingCheckpoint(path));
            }
            let model = ClassifierModel::load(&path)?;
            if model.id() != spec.id || model.variant() != spec.variant {
                return Err(HarnessError::Config(format!(
                    "checkpoint {} holds {} ({}), configured {} ({})",
                    path.display(),
                    model.id(),
                    model.variant(),
                    spec.id,
                    spec.variant
                )));
            }
            classifiers.insert(spec.id.clone(), model);
        }
        let (_, val) = load_dataset(cfg)?;
        Self::assemble(cfg, sched, denoiser, classifiers, val)
    }

    /// Loads what is current on disk and trains the rest.
    pub fn ensure(cfg: &ExperimentConfig) -> Result<Self> {
        let sched = cfg.diffusion.schedule()?;
        let (train, val) = load_dataset(cfg)?;
        let path = denoiser_path(cfg);
        let denoiser = match DenoiserModel::load(&path) {
            Ok(m) if denoiser_current(cfg, &m, &sched) => m,
            _ => fit_denoiser(cfg, &train)?,
        };
        let mut classifiers = BTreeMap::new();
        for spec in &cfg.classifiers.models {
            let model = match ClassifierModel::load(&classifier_path(cfg, &spec.id)) {
                Ok(m) if classifier_current(cfg, spec, &m) => m,
                _ => fit_classifier(cfg, spec, &train, &val)?,
            };
            classifiers.insert(spec.id.clone(), model);
        }
        Self::assemble(cfg, sched, denoiser, classifiers, val)
    }

    fn assemble(
        cfg: &ExperimentConfig,
        sched: NoiseSchedule,
        denoiser: DenoiserModel,
        classifiers: BTreeMap<String, ClassifierModel>,
        val: LabeledDataset,
    ) -> Result<Self> {
        let featurenet = classifiers
            .get(&cfg.classifiers.featurenet)
            .ok_or_else(|| HarnessError::Config(format!("featurenet {} not loaded", cfg.classifiers.featurenet)))?;
        let space = EmbeddingSpace::principal(&embeddings(val.images(), featurenet)?, cfg.experiment.fid_features)?;
        Ok(Self {
            sched,
            denoiser,
            classifiers,
            val,
            space,
        })
    }

    pub fn classifier(&self, id: &str) -> Result<&ClassifierModel> {
        self.classifiers
            .get(id)
            .ok_or_else(|| HarnessError::Config(format!("classifier {id} is not loaded")))
    }
}
