//! The ε-prediction U-Net, the classifier zoo, training loops and the
//! checkpoint container.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use tensorgrad::{Conv2dParams, Element, Tape, Tensor, Var};

use crate::data::LabeledDataset;
use crate::diffusion::{q_sample, Denoise, NoiseSchedule};
use crate::{Result, VceError};

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        match self.index(name) {
            Some(i) => self.tensors[i] = tensor,
            None => {
                self.names.push(name.to_string());
                self.tensors.push(tensor);
            }
        }
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Hash over names, shapes and exact bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.iter() {
            name.hash(&mut h);
            t.shape().hash(&mut h);
            t.data().iter().for_each(|v| v.to_bits().hash(&mut h));
        }
        h.finish()
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind<T: Element>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.cast(), requires_grad)).collect())
    }

    fn he_conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) {
        let sd = (2.0 / (cin * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, sd).expect("positive sd");
        self.insert(&format!("{name}.w"), Tensor::from_fn(&[cout, cin, k, k], |_| dist.sample(rng) as f32));
        self.insert(&format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    fn he_conv_transpose(&mut self, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) {
        let sd = (2.0 / (cin * k * k) as f64).sqrt();
        let dist = Normal::new(0.0, sd).expect("positive sd");
        self.insert(&format!("{name}.w"), Tensor::from_fn(&[cin, cout, k, k], |_| dist.sample(rng) as f32));
        self.insert(&format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    fn he_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        let sd = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, sd).expect("positive sd");
        self.insert(&format!("{name}.w"), Tensor::from_fn(&[fan_in, fan_out], |_| dist.sample(rng) as f32));
        self.insert(&format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }

    fn norm(&mut self, name: &str, ch: usize) {
        self.insert(&format!("{name}.gamma"), Tensor::full(&[ch], 1.0));
        self.insert(&format!("{name}.beta"), Tensor::zeros(&[ch]));
    }
}

/// Tape handles of a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Resolves parameter names to tape handles during a forward pass.
struct Net<'a> {
    store: &'a ParamStore,
    bound: &'a Bound,
}

impl Net<'_> {
    fn p(&self, name: &str) -> Result<Var> {
        self.store
            .index(name)
            .map(|i| self.bound.0[i])
            .ok_or_else(|| VceError::Model(format!("missing parameter {name}")))
    }

    fn conv<T: Element>(&self, tape: &mut Tape<T>, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let pad = tape.shape(w)[2] / 2;
        let y = tape.conv2d(x, w, Conv2dParams::new(stride, pad))?;
        Ok(tape.add(y, self.p(&format!("{name}.b"))?)?)
    }

    fn up<T: Element>(&self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        let y = tape.conv_transpose2d(x, self.p(&format!("{name}.w"))?, 2, 0)?;
        Ok(tape.add(y, self.p(&format!("{name}.b"))?)?)
    }

    fn linear<T: Element>(&self, tape: &mut Tape<T>, x: Var, name: &str) -> Result<Var> {
        let y = tape.matmul(x, self.p(&format!("{name}.w"))?)?;
        Ok(tape.add(y, self.p(&format!("{name}.b"))?)?)
    }

    fn norm<T: Element>(&self, tape: &mut Tape<T>, x: Var, name: &str, groups: usize) -> Result<Var> {
        let g = self.p(&format!("{name}.gamma"))?;
        let b = self.p(&format!("{name}.beta"))?;
        Ok(tape.group_norm(x, g, b, groups)?)
    }
}

/// U-Net shape: three widths at resolutions `r`, `r/2`, `r/4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub widths: [usize; 3],
    pub time_dim: usize,
    pub groups: usize,
    pub resolution: usize,
    pub steps: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            widths: [32, 64, 128],
            time_dim: 64,
            groups: 8,
            resolution: 16,
            steps: crate::diffusion::DEFAULT_STEPS,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub seed: u64,
    pub epochs: usize,
    pub steps: usize,
    /// Mean loss of the first and last epoch; `None` when never trained.
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub schedule_id: Option<String>,
    pub val_accuracy: Option<f64>,
}

/// ε-prediction network `(x_t, t) ↦ ε̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    arch: UNetConfig,
    params: ParamStore,
    record: TrainingRecord,
}

/// Stages that receive a projection of the time embedding, with widths.
fn unet_stages(w: [usize; 3]) -> [(&'static str, usize, usize); 6] {
    [
        ("enc0", w[0], w[0]),
        ("down0", w[0], w[1]),
        ("enc1", w[1], w[1]),
        ("down1", w[1], w[2]),
        ("dec1", 2 * w[1], w[1]),
        ("dec0", 2 * w[0], w[0]),
    ]
}

fn sinusoidal_table(steps: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[steps, dim], |i| {
        let (t, j) = (i / dim, i % dim);
        let k = j % half;
        let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        (if j < half { arg.sin() } else { arg.cos() }) as f32
    })
}

impl DenoiserModel {
    pub fn new(arch: UNetConfig, seed: u64) -> Result<Self> {
        let [w0, _, _] = arch.widths;
        if arch.resolution % 4 != 0 || arch.time_dim % 2 != 0 || arch.widths.iter().any(|w| w % arch.groups != 0) {
            return Err(VceError::Model(format!("unsupported U-Net configuration {arch:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        p.he_linear("time.fc", arch.time_dim, arch.time_dim, &mut rng);
        p.he_conv("in", w0, 1, 3, &mut rng);
        let w = arch.widths;
        for (name, cin, cout) in unet_stages(w) {
            p.he_linear(&format!("{name}.time"), arch.time_dim, cout, &mut rng);
            p.he_conv(name, cout, cin, 3, &mut rng);
            p.norm(&format!("{name}.norm"), cout);
        }
        p.he_conv_transpose("up1", w[2], w[1], 2, &mut rng);
        p.he_conv_transpose("up0", w[1], w[0], 2, &mut rng);
        p.he_conv("out", 1, w0, 3, &mut rng);
        Ok(Self {
            arch,
            params: p,
            record: TrainingRecord {
                seed,
                ..TrainingRecord::default()
            },
        })
    }

    pub fn arch(&self) -> &UNetConfig {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn record(&self) -> &TrainingRecord {
        &self.record
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Records the forward pass for `x: (B, 1, R, R)` at steps `t` (one per sample).
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, t: &[usize]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let r = self.arch.resolution;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != r || shape[3] != r || shape[0] != t.len() {
            return Err(VceError::Model(format!(
                "denoiser expects ({}, 1, {r}, {r}), got {shape:?}",
                t.len()
            )));
        }
        if let Some(&bad) = t.iter().find(|&&s| s >= self.arch.steps) {
            return Err(VceError::Step {
                t: bad,
                steps: self.arch.steps,
            });
        }
        let net = Net {
            store: &self.params,
            bound,
        };
        let groups = self.arch.groups;
        let table = tape.constant(sinusoidal_table(self.arch.steps, self.arch.time_dim).cast());
        let emb = tape.embedding(table, t)?;
        let emb = net.linear(tape, emb, "time.fc")?;
        let emb = tape.silu(emb)?;

        let block = |tape: &mut Tape<T>, h: Var, name: &str, stride: usize| -> Result<Var> {
            let h = net.conv(tape, h, name, stride)?;
            let te = net.linear(tape, emb, &format!("{name}.time"))?;
            let h = tape.add(h, te)?;
            let h = net.norm(tape, h, &format!("{name}.norm"), groups)?;
            Ok(tape.silu(h)?)
        };

        let h = net.conv(tape, x, "in", 1)?;
        let h0 = block(tape, h, "enc0", 1)?;
        let d = block(tape, h0, "down0", 2)?;
        let h1 = block(tape, d, "enc1", 1)?;
        let m = block(tape, h1, "down1", 2)?;
        let u = net.up(tape, m, "up1")?;
        let u = tape.concat(&[u, h1], 1)?;
        let u = block(tape, u, "dec1", 1)?;
        let u = net.up(tape, u, "up0")?;
        let u = tape.concat(&[u, h0], 1)?;
        let u = block(tape, u, "dec0", 1)?;
        net.conv(tape, u, "out", 1)
    }

    /// ε̂ for a batch with per-sample steps, outside any caller tape.
    pub fn predict(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(x_t.clone());
        let out = self.forward(&mut tape, &bound, x, t)?;
        Ok(tape.value(out).clone())
    }
}

impl Denoise for DenoiserModel {
    fn predict_eps(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        let batch = x_t.shape().first().copied().unwrap_or(0);
        self.predict(x_t, &vec![t; batch])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Standard,
    RobustNoise,
    LowCap,
    RandomNet,
    FeatureNet,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Standard,
        Variant::RobustNoise,
        Variant::LowCap,
        Variant::RandomNet,
        Variant::FeatureNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::RobustNoise => "robustnoise",
            Variant::LowCap => "lowcap",
            Variant::RandomNet => "randomnet",
            Variant::FeatureNet => "featurenet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn default_arch(self, classes: usize, resolution: usize) -> ClassifierConfig {
        let (widths, hidden) = match self {
            Variant::LowCap => ([8, 16, 32], 16),
            _ => ([32, 64, 128], 64),
        };
        ClassifierConfig {
            widths,
            hidden,
            classes,
            resolution,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub widths: [usize; 3],
    pub hidden: usize,
    pub classes: usize,
    pub resolution: usize,
}

/// Tape handles of one classifier forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierTrace {
    /// Post-ReLU outputs of the three conv blocks.
    pub activations: [Var; 3],
    /// Penultimate (pre-ReLU) embedding `(B, hidden)`.
    pub embedding: Var,
    pub logits: Var,
    pub log_probs: Var,
}

/// Three-conv CNN with a two-layer head.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    id: String,
    variant: Variant,
    arch: ClassifierConfig,
    params: ParamStore,
    record: TrainingRecord,
}

impl ClassifierModel {
    pub fn new(id: &str, variant: Variant, arch: ClassifierConfig, seed: u64) -> Result<Self> {
        if arch.classes < 2 || arch.resolution % 4 != 0 {
            return Err(VceError::Model(format!("unsupported classifier configuration {arch:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let [w0, w1, w2] = arch.widths;
        p.he_conv("c1", w0, 1, 3, &mut rng);
        p.he_conv("c2", w1, w0, 3, &mut rng);
        p.he_conv("c3", w2, w1, 3, &mut rng);
        p.he_linear("fc1", w2, arch.hidden, &mut rng);
        p.he_linear("fc2", arch.hidden, arch.classes, &mut rng);
        Ok(Self {
            id: id.to_string(),
            variant,
            arch,
            params: p,
            record: TrainingRecord {
                seed,
                ..TrainingRecord::default()
            },
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn arch(&self) -> &ClassifierConfig {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn record(&self) -> &TrainingRecord {
        &self.record
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.classes
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<ClassifierTrace> {
        let shape = tape.shape(x);
        let r = self.arch.resolution;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != r || shape[3] != r {
            return Err(VceError::Model(format!("classifier expects (B, 1, {r}, {r}), got {shape:?}")));
        }
        let net = Net {
            store: &self.params,
            bound,
        };
        let a1 = net.conv(tape, x, "c1", 1)?;
        let a1 = tape.relu(a1)?;
        let a2 = net.conv(tape, a1, "c2", 2)?;
        let a2 = tape.relu(a2)?;
        let a3 = net.conv(tape, a2, "c3", 2)?;
        let a3 = tape.relu(a3)?;
        let pooled = tape.mean(a3, 2)?;
        let embedding = net.linear(tape, pooled, "fc1")?;
        let hidden = tape.relu(embedding)?;
        let logits = net.linear(tape, hidden, "fc2")?;
        let log_probs = tape.log_softmax(logits)?;
        Ok(ClassifierTrace {
            activations: [a1, a2, a3],
            embedding,
            logits,
            log_probs,
        })
    }

    /// Runs a frozen forward pass and hands the trace to `f`.
    pub fn inspect<R>(&self, x: &Tensor, f: impl FnOnce(&Tape<f32>, &ClassifierTrace) -> R) -> Result<R> {
        let mut tape = Tape::<f32>::new();
        let bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let trace = self.forward(&mut tape, &bound, xv)?;
        Ok(f(&tape, &trace))
    }

    /// Row-normalized log-probabilities `(B, C)`.
    pub fn log_probs(&self, x: &Tensor) -> Result<Tensor> {
        self.inspect(x, |tape, tr| tape.value(tr.log_probs).clone())
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.inspect(x, |tape, tr| tape.value(tr.embedding).clone())
    }

    pub fn activations(&self, x: &Tensor) -> Result<[Tensor; 3]> {
        self.inspect(x, |tape, tr| tr.activations.map(|a| tape.value(a).clone()))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.log_probs(x)?))
    }

    /// Fraction of `dataset` classified correctly, in chunks of 256.
    pub fn accuracy(&self, dataset: &LabeledDataset) -> Result<f64> {
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..dataset.len()).collect();
        for chunk in idx.chunks(256) {
            let pred = self.predict(&dataset.batch(chunk))?;
            correct += chunk.iter().zip(&pred).filter(|(&i, &p)| dataset.labels()[i] == p).count();
        }
        Ok(correct as f64 / dataset.len() as f64)
    }
}

/// Log-probabilities of `model` on `x`.
pub fn classifier_logprobs(model: &ClassifierModel, x: &Tensor) -> Result<Tensor> {
    model.log_probs(x)
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Optimizer and budget for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

/// Adaptive-moment updates without a first-moment average.
struct Optimizer {
    hyper: TrainHyper,
    second: Vec<Vec<f64>>,
    step: i32,
}

impl Optimizer {
    fn new(hyper: &TrainHyper, params: &ParamStore) -> Self {
        Self {
            hyper: hyper.clone(),
            second: params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }

    /// Applies one clipped update; `grads` follow the store order.
    fn apply(&mut self, params: &mut ParamStore, grads: &[Option<&Tensor>]) {
        self.step += 1;
        let norm: f64 = grads.iter().flatten().map(|g| g.norm_sq()).sum::<f64>().sqrt();
        let clip = if norm > self.hyper.clip_norm { self.hyper.clip_norm / norm } else { 1.0 };
        let correction = 1.0 - self.hyper.beta2.powi(self.step);
        let b2 = self.hyper.beta2;
        for ((p, g), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.second) {
            let Some(g) = g else { continue };
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let gi = gi as f64 * clip;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = self.hyper.learning_rate * gi / ((*vi / correction).sqrt() + self.hyper.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}

fn check_hyper(hyper: &TrainHyper) -> Result<()> {
    if hyper.batch_size == 0 || hyper.learning_rate <= 0.0 || !(0.0..1.0).contains(&hyper.beta2) || hyper.clip_norm <= 0.0 {
        return Err(VceError::Model(format!("invalid training hyperparameters {hyper:?}")));
    }
    Ok(())
}

/// Runs `epochs` shuffled passes, calling `loss_fn` per minibatch.
fn train_loop(
    params: &mut ParamStore,
    dataset_len: usize,
    hyper: &TrainHyper,
    rng: &mut ChaCha8Rng,
    mut loss_fn: impl FnMut(&ParamStore, &[usize], &mut ChaCha8Rng) -> Result<(f64, Vec<Option<Tensor>>)>,
) -> Result<(usize, f64, f64)> {
    check_hyper(hyper)?;
    let mut opt = Optimizer::new(hyper, params);
    let mut order: Vec<usize> = (0..dataset_len).collect();
    let (mut steps, mut initial, mut last_epoch) = (0, None, f64::NAN);
    for epoch in 0..hyper.epochs {
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0usize);
        for batch in order.chunks(hyper.batch_size) {
            let (loss, grads) = loss_fn(params, batch, rng)?;
            if !loss.is_finite() {
                return Err(VceError::Diverged { epoch, loss });
            }
            initial.get_or_insert(loss);
            let refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
            opt.apply(params, &refs);
            total += loss * batch.len() as f64;
            count += batch.len();
            steps += 1;
        }
        last_epoch = total / count as f64;
        log::debug!("epoch {epoch}: loss {last_epoch:.5}");
    }
    Ok((steps, initial.unwrap_or(f64::NAN), last_epoch))
}

fn leaf_grads(tape: &Tape<f32>, bound: &Bound) -> Vec<Option<Tensor>> {
    bound.0.iter().map(|&v| tape.grad(v).cloned()).collect()
}

/// Noise-prediction MSE of one minibatch, with gradients.
fn denoiser_batch_loss(
    model: &DenoiserModel,
    dataset: &LabeledDataset,
    sched: &NoiseSchedule,
    batch: &[usize],
    rng: &mut ChaCha8Rng,
    with_grad: bool,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let x0 = dataset.batch(batch);
    let t: Vec<usize> = batch.iter().map(|_| rng.random_range(0..sched.steps())).collect();
    let eps = Tensor::from_fn(x0.shape(), |_| {
        let z: f64 = rng.sample(StandardNormal);
        z as f32
    });
    let px = x0.numel() / batch.len();
    let mut xt = Vec::with_capacity(x0.numel());
    for (i, &ti) in t.iter().enumerate() {
        let one = |a: &Tensor| Tensor::new(vec![1, 1, px], a.data()[i * px..(i + 1) * px].to_vec()).expect("extent");
        xt.extend(q_sample(&one(&x0), ti, &one(&eps), sched)?.into_data());
    }
    let xt = Tensor::new(x0.shape().to_vec(), xt)?;

    let mut tape = Tape::<f32>::new();
    let bound = model.params.bind(&mut tape, with_grad);
    let xv = tape.constant(xt);
    let target = tape.constant(eps);
    let out = model.forward(&mut tape, &bound, xv, &t)?;
    let diff = tape.sub(out, target)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean(sq, 0)?;
    let value = tape.value(loss).item()? as f64;
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss)?;
    Ok((value, leaf_grads(&tape, &bound)))
}

pub fn train_denoiser(
    dataset: &LabeledDataset,
    sched: &NoiseSchedule,
    arch: UNetConfig,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<DenoiserModel> {
    if arch.steps != sched.steps() || arch.resolution != dataset.height() {
        return Err(VceError::Model("denoiser architecture does not match schedule or data".into()));
    }
    let mut model = DenoiserModel::new(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1FF);
    let mut params = std::mem::take(&mut model.params);
    let (steps, initial, last) = train_loop(&mut params, dataset.len(), hyper, &mut rng, |p, batch, rng| {
        model.params = p.clone();
        denoiser_batch_loss(&model, dataset, sched, batch, rng, true)
    })?;
    model.params = params;
    model.record = TrainingRecord {
        seed,
        epochs: hyper.epochs,
        steps,
        initial_loss: Some(initial),
        final_loss: Some(last),
        schedule_id: Some(sched.id()),
        val_accuracy: None,
    };
    Ok(model)
}

/// Mean noise-prediction error over `dataset` with fresh noise and steps.
pub fn denoiser_mse(model: &DenoiserModel, dataset: &LabeledDataset, sched: &NoiseSchedule, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(128) {
        let (loss, _) = denoiser_batch_loss(model, dataset, sched, chunk, &mut rng, false)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

/// Largest noise level drawn for `robustnoise` inputs.
pub const ROBUST_SIGMA_MAX: f64 = 0.5;

pub fn train_classifier(
    id: &str,
    dataset: &LabeledDataset,
    val: Option<&LabeledDataset>,
    variant: Variant,
    hyper: &TrainHyper,
    seed: u64,
) -> Result<ClassifierModel> {
    let arch = variant.default_arch(dataset.num_classes(), dataset.height());
    let mut model = ClassifierModel::new(id, variant, arch, seed)?;
    let mut steps = 0;
    let (mut initial, mut last) = (None, None);
    if variant != Variant::RandomNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5);
        let mut params = std::mem::take(&mut model.params);
        let noisy = variant == Variant::RobustNoise;
        let (n, first, final_) = train_loop(&mut params, dataset.len(), hyper, &mut rng, |p, batch, rng| {
            let mut x = dataset.batch(batch);
            if noisy {
                let px = x.numel() / batch.len();
                for chunk in x.data_mut().chunks_mut(px) {
                    let sigma = rng.random_range(0.0..=ROBUST_SIGMA_MAX);
                    for v in chunk {
                        let z: f64 = rng.sample(StandardNormal);
                        *v = (*v as f64 + sigma * z) as f32;
                    }
                }
            }
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.labels()[i]).collect();
            let mut tape = Tape::<f32>::new();
            let bound = p.bind(&mut tape, true);
            let xv = tape.constant(x);
            model.params = p.clone();
            let trace = model.forward(&mut tape, &bound, xv)?;
            // negative log-likelihood via a one-hot mask
            let classes = model.arch.classes;
            let mask = Tensor::from_fn(&[labels.len(), classes], |i| {
                if labels[i / classes] == i % classes {
                    -1.0 / labels.len() as f32
                } else {
                    0.0
                }
            });
            let mask = tape.constant(mask);
            let picked = tape.mul(trace.log_probs, mask)?;
            let loss = tape.sum(picked, 0)?;
            let value = tape.value(loss).item()? as f64;
            tape.backward(loss)?;
            Ok((value, leaf_grads(&tape, &bound)))
        })?;
        (steps, initial, last) = (n, Some(first), Some(final_));
        model.params = params;
    }
    model.record = TrainingRecord {
        seed,
        epochs: if variant == Variant::RandomNet { 0 } else { hyper.epochs },
        steps,
        initial_loss: initial,
        final_loss: last,
        schedule_id: None,
        val_accuracy: val.map(|v| model.accuracy(v)).transpose()?,
    };
    Ok(model)
}

const MAGIC: &[u8; 4] = b"VCEB";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;
const META_NAME: &str = "__meta__";

/// Serializes `params` plus a JSON metadata blob into the checkpoint layout.
pub fn encode_checkpoint(meta: &serde_json::Value, params: &ParamStore) -> Vec<u8> {
    let meta_bytes = serde_json::to_vec(meta).expect("json values serialize");
    let mut entries: Vec<(&str, u8, Vec<usize>, Vec<u8>)> = vec![(META_NAME, DTYPE_U8, vec![meta_bytes.len()], meta_bytes)];
    for (name, t) in params.iter() {
        let payload = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        entries.push((name, DTYPE_F32, t.shape().to_vec(), payload));
    }
    let table_len: usize = 12
        + entries
            .iter()
            .map(|(n, _, s, _)| 4 + n.len() + 1 + 4 + 4 * s.len() + 8)
            .sum::<usize>();
    let mut out = Vec::with_capacity(table_len + entries.iter().map(|e| e.3.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = table_len as u64;
    for (name, dtype, shape, payload) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(*dtype);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        shape.iter().for_each(|&d| out.extend_from_slice(&(d as u32).to_le_bytes()));
        out.extend_from_slice(&offset.to_le_bytes());
        offset += payload.len() as u64;
    }
    debug_assert_eq!(out.len(), table_len);
    entries.iter().for_each(|e| out.extend_from_slice(&e.3));
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| VceError::Checkpoint(format!("truncated table at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Inverse of [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(serde_json::Value, ParamStore)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(VceError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(VceError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut meta = None;
    let mut params = ParamStore::default();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| VceError::Checkpoint("tensor name is not utf-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let numel: usize = shape.iter().product();
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_U8 => 1,
            other => return Err(VceError::Checkpoint(format!("unknown dtype code {other}"))),
        };
        let payload = offset
            .checked_add(numel * width)
            .and_then(|end| bytes.get(offset..end))
            .ok_or_else(|| VceError::Checkpoint(format!("payload of {name} out of bounds")))?;
        if dtype == DTYPE_U8 {
            if name == META_NAME {
                meta = Some(
                    serde_json::from_slice(payload).map_err(|e| VceError::Checkpoint(format!("metadata: {e}")))?,
                );
            }
            continue;
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(&name, Tensor::new(shape, data)?);
    }
    Ok((meta.unwrap_or(serde_json::Value::Null), params))
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Meta {
    Denoiser {
        arch: UNetConfig,
        record: TrainingRecord,
    },
    Classifier {
        id: String,
        variant: Variant,
        arch: ClassifierConfig,
        record: TrainingRecord,
    },
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| VceError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| VceError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn decode_meta(bytes: &[u8]) -> Result<(Meta, ParamStore)> {
    let (meta, params) = decode_checkpoint(bytes)?;
    let meta = serde_json::from_value(meta).map_err(|e| VceError::Checkpoint(format!("metadata: {e}")))?;
    Ok((meta, params))
}

fn check_params(reference: &ParamStore, loaded: &ParamStore) -> Result<()> {
    for (name, t) in reference.iter() {
        match loaded.get(name) {
            Some(l) if l.shape() == t.shape() => {}
            _ => return Err(VceError::Checkpoint(format!("parameter {name} missing or misshapen"))),
        }
    }
    Ok(())
}

impl DenoiserModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta::Denoiser {
            arch: self.arch.clone(),
            record: self.record.clone(),
        };
        encode_checkpoint(&serde_json::to_value(meta).expect("serializable"), &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match decode_meta(bytes)? {
            (Meta::Denoiser { arch, record }, params) => {
                check_params(DenoiserModel::new(arch.clone(), 0)?.params(), &params)?;
                Ok(Self { arch, params, record })
            }
            _ => Err(VceError::Checkpoint("not a denoiser checkpoint".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

impl ClassifierModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta::Classifier {
            id: self.id.clone(),
            variant: self.variant,
            arch: self.arch.clone(),
            record: self.record.clone(),
        };
        encode_checkpoint(&serde_json::to_value(meta).expect("serializable"), &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match decode_meta(bytes)? {
            (
                Meta::Classifier {
                    id,
                    variant,
                    arch,
                    record,
                },
                params,
            ) => {
                check_params(ClassifierModel::new(&id, variant, arch.clone(), 0)?.params(), &params)?;
                Ok(Self {
                    id,
                    variant,
                    arch,
                    params,
                    record,
                })
            }
            _ => Err(VceError::Checkpoint("not a classifier checkpoint".into())),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}
