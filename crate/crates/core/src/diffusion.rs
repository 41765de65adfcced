//! Noise schedules, closed-form forward noising, x̂₀ recovery and ancestral
//! sampling.
//!
//! Step indices run over `[0, T)`; sampling walks from `T-1` down to `0`
//! and adds no noise on the final step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tensorgrad::Tensor;

use crate::{derive_seed, Result, VceError};

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.04;
/// Below this `ᾱ_t` the x̂₀ inversion is refused.
pub const MIN_ALPHA_BAR: f64 = 1e-8;

/// Linear β schedule with its derived products, all in `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(VceError::Schedule("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(VceError::Schedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|t| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let posterior_var = (0..steps)
        .map(|t| {
            if t == 0 {
                beta[0]
            } else {
                beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t])
            }
        })
        .collect();
    Ok(NoiseSchedule {
        beta_start,
        beta_end,
        beta,
        alpha,
        alpha_bar,
        posterior_var,
    })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("defaults are valid")
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// Stable identifier stored alongside trained denoisers.
    pub fn id(&self) -> String {
        format!("linear-{}-{:e}-{:e}", self.steps(), self.beta_start, self.beta_end)
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn posterior_var(&self) -> &[f64] {
        &self.posterior_var
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(VceError::Step { t, steps: self.steps() })
        }
    }

    /// `round(fraction · T)`, the step count of a partial reverse chain.
    pub fn start_step(&self, fraction: f64) -> usize {
        (fraction * self.steps() as f64).round() as usize
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(tensorgrad::TensorError::Shape {
            op,
            shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
        }
        .into())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x as f64, y as f64) as f32)
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked")
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    same_shape(x0, eps, "q_sample")?;
    let ab = sched.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(zip_map(x0, eps, |x, e| a * x + b * e))
}

/// `x̂₀ = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`, optionally clamped to `[-1, 1]`.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule, clamp: bool) -> Result<Tensor> {
    sched.check_step(t)?;
    same_shape(x_t, eps_hat, "predict_x0")?;
    let ab = sched.alpha_bar[t];
    if ab < MIN_ALPHA_BAR {
        return Err(VceError::Degenerate { t, alpha_bar: ab });
    }
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(zip_map(x_t, eps_hat, |x, e| {
        let v = (x - n * e) / s;
        if clamp {
            v.clamp(-1.0, 1.0)
        } else {
            v
        }
    }))
}

/// Reverse-process mean `μ = (x_t − β_t/√(1−ᾱ_t)·ε̂) / √α_t`.
pub fn posterior_mean(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    same_shape(x_t, eps_hat, "posterior_mean")?;
    let coef = sched.beta[t] / (1.0 - sched.alpha_bar[t]).sqrt();
    let scale = 1.0 / sched.alpha[t].sqrt();
    let mu = zip_map(x_t, eps_hat, |x, e| scale * (x - coef * e));
    if !mu.is_finite() {
        return Err(VceError::NonFiniteStep { what: "posterior mean", t });
    }
    Ok(mu)
}

/// Draws from `N(μ, β̃_t·I)`, one rng per leading-axis sample; `t = 0`
/// returns `μ` and consumes nothing.
pub fn posterior_sample<R: Rng>(mu: Tensor, t: usize, sched: &NoiseSchedule, rngs: &mut [R]) -> Result<Tensor> {
    sched.check_step(t)?;
    check_rngs(&mu, rngs.len())?;
    if t == 0 {
        return Ok(mu);
    }
    let sd = sched.posterior_var[t].sqrt();
    let per = mu.numel() / rngs.len();
    let mut mu = mu;
    for (chunk, rng) in mu.data_mut().chunks_mut(per).zip(rngs.iter_mut()) {
        for v in chunk {
            let z: f64 = rng.sample(StandardNormal);
            *v = (*v as f64 + sd * z) as f32;
        }
    }
    Ok(mu)
}

fn check_rngs(x: &Tensor, n: usize) -> Result<()> {
    match x.shape().first() {
        Some(&b) if b == n && b > 0 => Ok(()),
        _ => Err(VceError::Config(format!("{n} rng streams for batch shape {:?}", x.shape()))),
    }
}

/// Standard-normal batch `(n, 1, h, w)`, sample `i` drawn from `rngs[i]`.
pub fn standard_normal<R: Rng>(rngs: &mut [R], height: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(rngs.len() * height * width);
    for rng in rngs.iter_mut() {
        for _ in 0..height * width {
            let z: f64 = rng.sample(StandardNormal);
            data.push(z as f32);
        }
    }
    Tensor::new(vec![rngs.len(), 1, height, width], data).expect("extent matches")
}

/// Per-sample generators seeded with [`derive_seed`]`(seed, offset + i)`.
pub fn sample_rngs(seed: u64, offset: usize, n: usize) -> Vec<ChaCha8Rng> {
    (0..n)
        .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(seed, (offset + i) as u64)))
        .collect()
}

/// Anything that predicts the noise in a batch at a shared step.
pub trait Denoise {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor>;
}

/// One ancestral step `x_t → x_{t−1}`.
pub fn ddpm_step<D: Denoise + ?Sized, R: Rng>(
    model: &D,
    x_t: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    rngs: &mut [R],
) -> Result<Tensor> {
    sched.check_step(t)?;
    let eps = model.predict_eps(x_t, t)?;
    let mu = posterior_mean(x_t, &eps, t, sched)?;
    posterior_sample(mu, t, sched, rngs)
}

/// Full reverse chain from `x_T ~ N(0, I)`; sample `i` uses the stream
/// `derive_seed(seed, i)`.
pub fn sample_unconditional<D: Denoise + ?Sized>(
    model: &D,
    sched: &NoiseSchedule,
    n: usize,
    resolution: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut rngs = sample_rngs(seed, 0, n);
    let mut x = standard_normal(&mut rngs, resolution, resolution);
    for t in (0..sched.steps()).rev() {
        x = ddpm_step(model, &x, t, sched, &mut rngs)?;
    }
    Ok(x)
}
