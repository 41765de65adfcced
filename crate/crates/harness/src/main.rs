use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use vce_harness::config::{DatasetKind, ExperimentConfig};
use vce_harness::experiment::{Manifest, Setup, MANIFEST_FILE};
use vce_harness::zoo::{self, Zoo};
use vce_harness::{pipeline, HarnessError};

/// Diffusion counterfactual experiments on small image datasets.
#[derive(Parser)]
#[command(name = "vce", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the noise-prediction network.
    TrainDenoiser(Common),
    /// Train every classifier in the roster.
    TrainClassifiers(Common),
    /// Generate counterfactuals for the base setup.
    Generate(Common),
    /// Score generated records and write reports.
    Evaluate(Common),
    /// Generate and score every enabled ablation, then write reports.
    Ablate(Common),
    /// Rewrite the report tables from an existing JSON report.
    Report(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for generation.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated subject ids.
    #[arg(long, value_delimiter = ',')]
    subjects: Option<Vec<String>>,
    /// Only TA, OTA, LPIPS and FID in the markdown tables.
    #[arg(long)]
    minimal: bool,
    /// Mark counterfactuals the subject does not assign to the target.
    #[arg(long)]
    reject_invalid: bool,
    /// Continue the run recorded in this manifest.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, requires = "mnist_labels")]
    mnist_images: Option<PathBuf>,
    #[arg(long, requires = "mnist_images")]
    mnist_labels: Option<PathBuf>,
    /// Use the synthetic shapes dataset.
    #[arg(long, conflicts_with = "mnist_images")]
    synthetic: bool,
}

fn config_error(e: impl std::fmt::Display) -> anyhow::Error {
    HarnessError::Config(e.to_string()).into()
}

impl Common {
    fn config(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(subjects) = &self.subjects {
            cfg.classifiers.subjects = subjects.clone();
        }
        if self.reject_invalid {
            cfg.guidance.reject_invalid = true;
        }
        if self.synthetic {
            cfg.dataset.kind = DatasetKind::Synthetic;
        }
        if let (Some(images), Some(labels)) = (&self.mnist_images, &self.mnist_labels) {
            cfg.dataset.kind = DatasetKind::Mnist;
            cfg.dataset.mnist_images = Some(images.clone());
            cfg.dataset.mnist_labels = Some(labels.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configuration and manifest to continue from, if any.
    fn resume(&self) -> anyhow::Result<(ExperimentConfig, Option<Manifest>)> {
        let Some(path) = &self.resume else {
            return Ok((self.config()?, None));
        };
        let manifest = Manifest::load(path).with_context(|| format!("loading manifest {}", path.display()))?;
        let mut cfg = manifest.config.clone();
        cfg.out_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, Some(manifest)))
    }
}

fn manifest_in(out: &Path) -> anyhow::Result<Manifest> {
    let path = out.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(config_error(format!("no manifest at {}; run generate first", path.display())));
    }
    Ok(Manifest::load(&path)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainDenoiser(c) => {
            let cfg = c.config()?;
            let (train, _) = zoo::load_dataset(&cfg)?;
            zoo::fit_denoiser(&cfg, &train)?;
            println!("{}", zoo::denoiser_path(&cfg).display());
        }
        Command::TrainClassifiers(c) => {
            let cfg = c.config()?;
            let (train, val) = zoo::load_dataset(&cfg)?;
            for spec in &cfg.classifiers.models {
                let m = zoo::fit_classifier(&cfg, spec, &train, &val)?;
                println!("{}\t{}\t{:?}", spec.id, zoo::classifier_path(&cfg, &spec.id).display(), m.record().val_accuracy);
            }
        }
        Command::Generate(c) => {
            let (cfg, resume) = c.resume()?;
            let zoo = Zoo::load(&cfg)?;
            pipeline::generate(&cfg, &zoo, &[Setup::Base], &cfg.out_dir, resume)?;
            println!("{}", cfg.out_dir.join(MANIFEST_FILE).display());
        }
        Command::Ablate(c) => {
            let (cfg, resume) = c.resume()?;
            let zoo = Zoo::load(&cfg)?;
            let manifest = pipeline::generate(&cfg, &zoo, &Setup::grid(&cfg), &cfg.out_dir, resume)?;
            pipeline::evaluate(&zoo, manifest, &cfg.out_dir, c.minimal)?;
            println!("{}", cfg.out_dir.join(vce_harness::report::REPORT_MD).display());
        }
        Command::Evaluate(c) => {
            let out = match &c.resume {
                Some(p) => p.parent().map(Path::to_path_buf).unwrap_or_default(),
                None => c.config()?.out_dir,
            };
            let manifest = manifest_in(&out)?;
            let zoo = Zoo::load(&manifest.config)?;
            pipeline::evaluate(&zoo, manifest, &out, c.minimal)?;
            println!("{}", out.join(vce_harness::report::REPORT_MD).display());
        }
        Command::Report(c) => {
            let out = c.config()?.out_dir;
            pipeline::render(&out, c.minimal)?;
            println!("{}", out.join(vce_harness::report::REPORT_MD).display());
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<HarnessError>() {
        Some(h) => h.exit_code() as u8,
        None => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
