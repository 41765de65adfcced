//! Classifier-guided reverse diffusion for counterfactual generation.
//!
//! Each reverse step shifts the posterior mean by `s·β̃_t·g`, where `g` is
//! the input gradient of the subject's target log-probability, optionally
//! evaluated on the denoiser's x̂₀ estimate and optionally replaced by a
//! robust model's gradient projected into a cone around it.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensorgrad::{Element, Tape, Tensor, Var};

use crate::diffusion::{posterior_mean, posterior_sample, q_sample, standard_normal, Denoise, NoiseSchedule};
use crate::models::{argmax_rows, ClassifierModel, DenoiserModel};
use crate::{Result, VceError};

pub const DEFAULT_SCALE: f64 = 6.0;
pub const DEFAULT_HALF_ANGLE_DEG: f64 = 30.0;
pub const DEFAULT_START_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeConfig {
    /// Id of the classifier whose gradient is projected.
    pub robust_model: String,
    pub half_angle_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub use_x0_prediction: bool,
    pub cone: Option<ConeConfig>,
    pub start_fraction: f64,
    pub seed: u64,
    pub reject_invalid: bool,
    /// Clamp x̂₀ to `[-1, 1]` on the gradient path.
    pub clamp_x0: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: DEFAULT_SCALE,
            use_x0_prediction: true,
            cone: None,
            start_fraction: DEFAULT_START_FRACTION,
            seed: 0,
            reject_invalid: false,
            clamp_x0: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(VceError::Config(format!("scale must be finite and >= 0, got {}", self.scale)));
        }
        if let Some(cone) = &self.cone {
            if !(cone.half_angle_deg > 0.0 && cone.half_angle_deg < 90.0) {
                return Err(VceError::Config(format!(
                    "cone half-angle must lie in (0, 90) degrees, got {}",
                    cone.half_angle_deg
                )));
            }
        }
        if !(self.start_fraction > 0.0 && self.start_fraction <= 1.0) {
            return Err(VceError::Config(format!(
                "start_fraction must lie in (0, 1], got {}",
                self.start_fraction
            )));
        }
        if sched.start_step(self.start_fraction) < 1 {
            return Err(VceError::Config("start step rounds to 0".into()));
        }
        Ok(())
    }
}

/// Models and schedule a guided chain runs against.
#[derive(Clone, Copy)]
pub struct Guide<'a> {
    pub subject: &'a ClassifierModel,
    /// Required when the config enables the cone; its id must match.
    pub robust: Option<&'a ClassifierModel>,
    pub denoiser: &'a DenoiserModel,
    pub sched: &'a NoiseSchedule,
}

impl Guide<'_> {
    fn cone_model(&self, cfg: &GuidanceConfig) -> Result<Option<(&ClassifierModel, f64)>> {
        let Some(cone) = &cfg.cone else { return Ok(None) };
        match self.robust {
            Some(r) if r.id() == cone.robust_model => Ok(Some((r, cone.half_angle_deg))),
            Some(r) => Err(VceError::Config(format!(
                "cone expects robust model {}, got {}",
                cone.robust_model,
                r.id()
            ))),
            None => Err(VceError::Config(format!("cone needs robust model {}", cone.robust_model))),
        }
    }
}

/// Euclidean projection of `g_robust` onto the closed cone of half-angle
/// `half_angle_deg` around `g_subject` (both flattened).
pub fn cone_project(g_robust: &Tensor, g_subject: &Tensor, half_angle_deg: f64) -> Result<Tensor> {
    if g_robust.shape() != g_subject.shape() {
        return Err(tensorgrad::TensorError::Shape {
            op: "cone_project",
            shapes: vec![g_robust.shape().to_vec(), g_subject.shape().to_vec()],
        }
        .into());
    }
    if !(half_angle_deg > 0.0 && half_angle_deg < 90.0) {
        return Err(VceError::Config(format!("cone half-angle {half_angle_deg} outside (0, 90)")));
    }
    let r = g_robust.to_f64_vec();
    let a = g_subject.to_f64_vec();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 {
        return Err(VceError::ConeAxis);
    }
    let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nr == 0.0 {
        return Ok(Tensor::zeros(g_robust.shape()));
    }
    let u: Vec<f64> = a.iter().map(|v| v / na).collect();
    let along: f64 = r.iter().zip(&u).map(|(x, y)| x * y).sum();
    let theta = (along / nr).clamp(-1.0, 1.0).acos();
    let alpha = half_angle_deg.to_radians();
    if theta <= alpha {
        return Ok(g_robust.clone());
    }
    if theta >= alpha + std::f64::consts::FRAC_PI_2 {
        return Ok(Tensor::zeros(g_robust.shape()));
    }
    let ortho: Vec<f64> = r.iter().zip(&u).map(|(x, y)| x - along * y).collect();
    let no = ortho.iter().map(|v| v * v).sum::<f64>().sqrt();
    let len = nr * (theta - alpha).cos();
    let (ca, sa) = (alpha.cos(), alpha.sin());
    let data = u
        .iter()
        .zip(&ortho)
        .map(|(ui, oi)| (len * (ca * ui + sa * oi / no)) as f32)
        .collect();
    Ok(Tensor::new(g_robust.shape().to_vec(), data)?)
}

fn one_hot(targets: &[usize], classes: usize) -> Result<Tensor> {
    if let Some(&bad) = targets.iter().find(|&&y| y >= classes) {
        return Err(VceError::Config(format!("target {bad} >= class count {classes}")));
    }
    Ok(Tensor::from_fn(&[targets.len(), classes], |i| {
        if targets[i / classes] == i % classes {
            1.0
        } else {
            0.0
        }
    }))
}

/// `clamp(x, -1, 1)` as `x − relu(x−1) + relu(−x−1)`; the gradient is 1
/// inside the interval and 0 outside.
fn clamp_unit<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let above = tape.add_scalar(x, -1.0)?;
    let above = tape.relu(above)?;
    let neg = tape.scalar_mul(x, -1.0)?;
    let below = tape.add_scalar(neg, -1.0)?;
    let below = tape.relu(below)?;
    let y = tape.sub(x, above)?;
    Ok(tape.add(y, below)?)
}

/// Classifier input at step `t`: `x` itself, or x̂₀(x, t) computed through
/// the denoiser on `tape`, in which case ε̂ is returned too.
pub fn guidance_input<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    t: usize,
    denoiser: &DenoiserModel,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<(Var, Option<Var>)> {
    sched.check_step(t)?;
    if !cfg.use_x0_prediction {
        return Ok((x, None));
    }
    let ab = sched.alpha_bar()[t];
    if ab < crate::diffusion::MIN_ALPHA_BAR {
        return Err(VceError::Degenerate { t, alpha_bar: ab });
    }
    let bound = denoiser.params().bind(tape, false);
    let batch = tape.shape(x)[0];
    let eps = denoiser.forward(tape, &bound, x, &vec![t; batch])?;
    let scaled_x = tape.scalar_mul(x, 1.0 / ab.sqrt())?;
    let scaled_eps = tape.scalar_mul(eps, ((1.0 - ab) / ab).sqrt())?;
    let mut x0 = tape.sub(scaled_x, scaled_eps)?;
    if cfg.clamp_x0 {
        x0 = clamp_unit(tape, x0)?;
    }
    Ok((x0, Some(eps)))
}

/// Scalar `Σ_b log p(targets[b] | input_b)` whose gradient in `x` is the
/// guidance gradient.
#[allow(clippy::too_many_arguments)]
pub fn guidance_objective<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    t: usize,
    targets: &[usize],
    model: &ClassifierModel,
    denoiser: &DenoiserModel,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<Var> {
    let (input, _) = guidance_input(tape, x, t, denoiser, sched, cfg)?;
    let bound = model.params().bind(tape, false);
    let trace = model.forward(tape, &bound, input)?;
    let mask = tape.constant(one_hot(targets, model.num_classes())?.cast());
    let picked = tape.mul(trace.log_probs, mask)?;
    Ok(tape.sum(picked, 0)?)
}

/// Gradient evaluation point: the classifier input and, in x̂₀ mode, ε̂.
struct GradientTape {
    tape: Tape<f32>,
    x: Var,
    classifier_input: Var,
    eps: Option<Var>,
}

fn build_tape(x_t: &Tensor, t: usize, denoiser: &DenoiserModel, sched: &NoiseSchedule, cfg: &GuidanceConfig) -> Result<GradientTape> {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(x_t.clone(), true);
    let (classifier_input, eps) = guidance_input(&mut tape, x, t, denoiser, sched, cfg)?;
    Ok(GradientTape {
        tape,
        x,
        classifier_input,
        eps,
    })
}

fn classifier_gradient(gt: &mut GradientTape, model: &ClassifierModel, targets: &[usize], t: usize) -> Result<Tensor> {
    let bound = model.params().bind(&mut gt.tape, false);
    let trace = model.forward(&mut gt.tape, &bound, gt.classifier_input)?;
    let cot = one_hot(targets, model.num_classes())?;
    let g = gt.tape.vjp(trace.log_probs, &cot, &[gt.x])?.remove(0);
    if !g.is_finite() {
        return Err(VceError::Gradient { t, norm: g.norm() });
    }
    Ok(g)
}

/// `∇_{x_t} Σ_b log p(targets[b] | input_b)` where the input is `x_t` or
/// x̂₀(x_t, t) per `cfg.use_x0_prediction`.
pub fn guidance_gradient(
    x_t: &Tensor,
    t: usize,
    targets: &[usize],
    model: &ClassifierModel,
    denoiser: &DenoiserModel,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<Tensor> {
    let mut gt = build_tape(x_t, t, denoiser, sched, cfg)?;
    classifier_gradient(&mut gt, model, targets, t)
}

/// ε̂ and the (possibly cone-projected) guidance direction for a batch.
fn guidance_direction(x_t: &Tensor, t: usize, targets: &[usize], guide: &Guide, cfg: &GuidanceConfig) -> Result<(Tensor, Tensor)> {
    let cone = guide.cone_model(cfg)?;
    let mut gt = build_tape(x_t, t, guide.denoiser, guide.sched, cfg)?;
    let g_subject = classifier_gradient(&mut gt, guide.subject, targets, t)?;
    let g = match cone {
        None => g_subject,
        Some((robust, half_angle)) => {
            let g_robust = if robust.id() == guide.subject.id() {
                g_subject.clone()
            } else {
                classifier_gradient(&mut gt, robust, targets, t)?
            };
            let mut parts = Vec::with_capacity(targets.len());
            for b in 0..targets.len() {
                parts.push(cone_project(&g_robust.slice_outer(b)?, &g_subject.slice_outer(b)?, half_angle)?);
            }
            Tensor::stack(&parts)?
        }
    };
    let eps = match gt.eps {
        Some(v) => gt.tape.value(v).clone(),
        None => guide.denoiser.predict_eps(x_t, t)?,
    };
    Ok((eps, g))
}

/// One guided reverse step; `rngs` and `targets` hold one entry per sample.
pub fn guided_step<R: Rng>(
    x_t: &Tensor,
    t: usize,
    targets: &[usize],
    guide: &Guide,
    cfg: &GuidanceConfig,
    rngs: &mut [R],
) -> Result<Tensor> {
    guide.sched.check_step(t)?;
    if targets.len() != x_t.shape()[0] {
        return Err(VceError::Config(format!("{} targets for a batch of {}", targets.len(), x_t.shape()[0])));
    }
    if cfg.scale == 0.0 {
        // an exact no-op shift, so skip the gradient entirely
        let eps = guide.denoiser.predict_eps(x_t, t)?;
        let mu = posterior_mean(x_t, &eps, t, guide.sched)?;
        return posterior_sample(mu, t, guide.sched, rngs);
    }
    let (eps, g) = guidance_direction(x_t, t, targets, guide, cfg)?;
    let mut mu = posterior_mean(x_t, &eps, t, guide.sched)?;
    let k = cfg.scale * guide.sched.posterior_var()[t];
    for (m, &gi) in mu.data_mut().iter_mut().zip(g.data()) {
        *m = (*m as f64 + k * gi as f64) as f32;
    }
    if !mu.is_finite() {
        return Err(VceError::NonFiniteStep { what: "guided mean", t });
    }
    posterior_sample(mu, t, guide.sched, rngs)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "lowercase")]
pub enum Outcome {
    Valid,
    /// Kept for accounting; the subject did not predict the target.
    Rejected,
    Failed(String),
}

/// One generation attempt. Fields are set once at construction; equality
/// ignores the wall time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CounterfactualRecord {
    index: usize,
    subject: String,
    shape: Vec<usize>,
    original: Vec<f32>,
    generated: Vec<f32>,
    source: usize,
    target: usize,
    predicted: Option<usize>,
    log_probs: Option<Vec<f32>>,
    config: GuidanceConfig,
    seed: u64,
    outcome: Outcome,
    /// Seconds; excluded from serialized records so streams stay reproducible.
    #[serde(skip)]
    wall_time: f64,
}

impl PartialEq for CounterfactualRecord {
    fn eq(&self, other: &Self) -> bool {
        self.index == other.index
            && self.subject == other.subject
            && self.shape == other.shape
            && self.original == other.original
            && self.generated == other.generated
            && self.source == other.source
            && self.target == other.target
            && self.predicted == other.predicted
            && self.log_probs == other.log_probs
            && self.config == other.config
            && self.seed == other.seed
            && self.outcome == other.outcome
    }
}

impl CounterfactualRecord {
    pub fn index(&self) -> usize {
        self.index
    }

    /// Id of the classifier that guided the generation.
    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn original(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.original.clone()).expect("shape recorded with data")
    }

    pub fn generated(&self) -> Tensor {
        Tensor::new(self.shape.clone(), self.generated.clone()).expect("shape recorded with data")
    }

    pub fn source(&self) -> usize {
        self.source
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// Subject's prediction on the generated image; `None` for failures.
    pub fn predicted(&self) -> Option<usize> {
        self.predicted
    }

    pub fn log_probs(&self) -> Option<&[f32]> {
        self.log_probs.as_deref()
    }

    pub fn config(&self) -> &GuidanceConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn outcome(&self) -> &Outcome {
        &self.outcome
    }

    pub fn is_failed(&self) -> bool {
        matches!(self.outcome, Outcome::Failed(_))
    }

    pub fn is_rejected(&self) -> bool {
        self.outcome == Outcome::Rejected
    }

    pub fn wall_time(&self) -> f64 {
        self.wall_time
    }
}

/// One counterfactual to generate: a `(1, 1, H, W)` original and its labels.
#[derive(Clone, Debug)]
pub struct VceRequest {
    pub index: usize,
    pub original: Tensor,
    pub source: usize,
    pub target: usize,
    pub seed: u64,
}

fn check_request(req: &VceRequest, classes: usize) -> Result<()> {
    let s = req.original.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 1 {
        return Err(VceError::Config(format!("original must be (1, 1, H, W), got {s:?}")));
    }
    if req.source == req.target {
        return Err(VceError::Config(format!("source and target are both {}", req.source)));
    }
    if req.source >= classes || req.target >= classes {
        return Err(VceError::Config(format!("labels {} -> {} outside {classes} classes", req.source, req.target)));
    }
    if req.original.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(VceError::Config("original has pixels outside [-1, 1]".into()));
    }
    Ok(())
}

/// Runs the guided chain for a batch in lockstep.
///
/// Sample `i` draws all its noise from a generator seeded with
/// `requests[i].seed`, so results do not depend on batch composition. A
/// sample whose step fails is retried alone; if it still fails it is frozen
/// and reported as a failed record.
pub fn generate_batch(guide: &Guide, cfg: &GuidanceConfig, requests: &[VceRequest]) -> Result<Vec<CounterfactualRecord>> {
    cfg.validate(guide.sched)?;
    guide.cone_model(cfg)?;
    for req in requests {
        check_request(req, guide.subject.num_classes())?;
    }
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let start = Instant::now();
    let sched = guide.sched;
    let (h, w) = (requests[0].original.shape()[2], requests[0].original.shape()[3]);
    let tau = sched.start_step(cfg.start_fraction);
    let mut rngs: Vec<ChaCha8Rng> = requests.iter().map(|r| ChaCha8Rng::seed_from_u64(r.seed)).collect();
    let noise = standard_normal(&mut rngs, h, w);
    let mut states: Vec<Tensor> = Vec::with_capacity(requests.len());
    for (i, req) in requests.iter().enumerate() {
        let eps = noise.slice_outer(i)?.reshape(&[1, 1, h, w])?;
        states.push(if tau == sched.steps() {
            eps
        } else {
            q_sample(&req.original, tau - 1, &eps, sched)?
        });
    }
    let mut failures: Vec<Option<String>> = vec![None; requests.len()];

    for t in (0..tau).rev() {
        let alive: Vec<usize> = (0..requests.len()).filter(|&i| failures[i].is_none()).collect();
        if alive.is_empty() {
            break;
        }
        let x = Tensor::stack(&alive.iter().map(|&i| states[i].slice_outer(0)).collect::<tensorgrad::Result<Vec<_>>>()?)?;
        let targets: Vec<usize> = alive.iter().map(|&i| requests[i].target).collect();
        let mut batch_rngs: Vec<ChaCha8Rng> = alive.iter().map(|&i| rngs[i].clone()).collect();
        match guided_step(&x, t, &targets, guide, cfg, &mut batch_rngs) {
            Ok(next) => {
                for (k, &i) in alive.iter().enumerate() {
                    states[i] = next.slice_outer(k)?.reshape(&[1, 1, h, w])?;
                    rngs[i] = batch_rngs[k].clone();
                }
            }
            Err(_) if alive.len() > 1 => {
                for &i in &alive {
                    let mut one = [rngs[i].clone()];
                    match guided_step(&states[i], t, &[requests[i].target], guide, cfg, &mut one) {
                        Ok(next) => {
                            states[i] = next;
                            rngs[i] = one[0].clone();
                        }
                        Err(e) => failures[i] = Some(e.to_string()),
                    }
                }
            }
            Err(e) => failures[alive[0]] = Some(e.to_string()),
        }
    }

    let alive: Vec<usize> = (0..requests.len()).filter(|&i| failures[i].is_none()).collect();
    let mut predictions = vec![None; requests.len()];
    if !alive.is_empty() {
        let x = Tensor::stack(&alive.iter().map(|&i| states[i].slice_outer(0)).collect::<tensorgrad::Result<Vec<_>>>()?)?;
        let lp = guide.subject.log_probs(&x)?;
        let c = guide.subject.num_classes();
        for ((&i, label), row) in alive.iter().zip(argmax_rows(&lp)).zip(lp.data().chunks(c)) {
            predictions[i] = Some((label, row.to_vec()));
        }
    }
    let per_record = start.elapsed().as_secs_f64() / requests.len() as f64;
    Ok(requests
        .iter()
        .enumerate()
        .map(|(i, req)| {
            let (predicted, log_probs, outcome) = match (&failures[i], predictions[i].take()) {
                (None, Some((label, row))) => {
                    let outcome = if cfg.reject_invalid && label != req.target {
                        Outcome::Rejected
                    } else {
                        Outcome::Valid
                    };
                    (Some(label), Some(row), outcome)
                }
                (reason, _) => (None, None, Outcome::Failed(reason.clone().unwrap_or_default())),
            };
            let generated = if predicted.is_some() {
                states[i].data().to_vec()
            } else {
                vec![0.0; h * w]
            };
            CounterfactualRecord {
                index: req.index,
                subject: guide.subject.id().to_string(),
                shape: vec![1, 1, h, w],
                original: req.original.data().to_vec(),
                generated,
                source: req.source,
                target: req.target,
                predicted,
                log_probs,
                config: cfg.clone(),
                seed: req.seed,
                outcome,
                wall_time: per_record,
            }
        })
        .collect())
}

/// Single counterfactual seeded with `cfg.seed`.
pub fn generate_vce(original: &Tensor, source: usize, target: usize, guide: &Guide, cfg: &GuidanceConfig) -> Result<CounterfactualRecord> {
    let req = VceRequest {
        index: 0,
        original: original.clone(),
        source,
        target,
        seed: cfg.seed,
    };
    Ok(generate_batch(guide, cfg, &[req])?.remove(0))
}
