//! Guided sampling: gradient path, degenerate identities, cone geometry.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tensorgrad::{finite_difference_gradient, Tape, Tensor};
use vce_core::derive_seed;
use vce_core::diffusion::*;
use vce_core::guidance::*;
use vce_core::models::*;

const RES: usize = 8;
const STEPS: usize = 20;

fn sched() -> NoiseSchedule {
    make_schedule(STEPS, 1e-3, 0.2).unwrap()
}

fn denoiser(seed: u64) -> DenoiserModel {
    let arch = UNetConfig {
        widths: [8, 16, 16],
        time_dim: 16,
        groups: 4,
        resolution: RES,
        steps: STEPS,
    };
    DenoiserModel::new(arch, seed).unwrap()
}

fn classifier(id: &str, variant: Variant, seed: u64) -> ClassifierModel {
    let arch = ClassifierConfig {
        widths: [8, 16, 16],
        hidden: 16,
        classes: 6,
        resolution: RES,
    };
    ClassifierModel::new(id, variant, arch, seed).unwrap()
}

fn image(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_fn(&[n, 1, RES, RES], |_| rng.random_range(-1.0f32..1.0))
}

fn f64_objective(x: &Tensor<f64>, t: usize, y: usize, model: &ClassifierModel, den: &DenoiserModel, cfg: &GuidanceConfig) -> tensorgrad::Result<f64> {
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(x.clone(), false);
    let s = guidance_objective(&mut tape, v, t, &[y], model, den, &sched(), cfg).map_err(|e| tensorgrad::TensorError::InvalidParam {
        op: "objective",
        detail: e.to_string(),
    })?;
    tape.value(s).item()
}

#[test]
fn x0_gradient_matches_finite_differences() {
    let den = denoiser(1);
    let model = classifier("s", Variant::Standard, 2);
    let sched = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (instance, use_x0) in [true, true, true, true, true, false].into_iter().enumerate() {
        let cfg = GuidanceConfig {
            use_x0_prediction: use_x0,
            clamp_x0: false,
            ..Default::default()
        };
        let t = rng.random_range(1..STEPS);
        let y = rng.random_range(0..6);
        let x = image(&mut rng, 1).cast::<f64>();
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(x.clone(), true);
        let s = guidance_objective(&mut tape, v, t, &[y], &model, &den, &sched, &cfg).unwrap();
        tape.backward(s).unwrap();
        let ad = tape.grad(v).unwrap().clone();
        let fd = finite_difference_gradient(|p| f64_objective(p, t, y, &model, &den, &cfg), &x, 1e-5).unwrap();
        let norm = fd.norm();
        let diff = ad.data().iter().zip(fd.data()).map(|(a, f)| (a - f).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= 1e-3 * norm, "instance {instance}: |ad - fd| = {diff:e}, |fd| = {norm:e}");

        // the f32 production path agrees with the f64 reference
        let g = guidance_gradient(&x.cast(), t, &[y], &model, &den, &sched, &cfg).unwrap();
        let diff32 = g.to_f64_vec().iter().zip(ad.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(diff32 <= 1e-3 * norm, "instance {instance}: f32 path off by {diff32:e}");
    }
}

#[test]
fn zero_head_gives_zero_gradient() {
    let den = denoiser(1);
    let mut model = classifier("r", Variant::RandomNet, 3);
    for name in ["fc2.w", "fc2.b"] {
        model.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let x = image(&mut ChaCha8Rng::seed_from_u64(1), 2);
    for use_x0 in [true, false] {
        let cfg = GuidanceConfig { use_x0_prediction: use_x0, ..Default::default() };
        let g = guidance_gradient(&x, 7, &[1, 4], &model, &den, &sched(), &cfg).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
    let lp = model.log_probs(&x).unwrap();
    assert!(lp.data().iter().all(|&v| (v as f64 + (6.0f64).ln()).abs() < 1e-6));
}

#[test]
fn without_x0_the_gradient_is_classifier_only() {
    let den = denoiser(1);
    let model = classifier("s", Variant::Standard, 2);
    let x = image(&mut ChaCha8Rng::seed_from_u64(3), 2);
    let cfg = GuidanceConfig { use_x0_prediction: false, ..Default::default() };

    let mut tape = Tape::<f32>::new();
    let v = tape.leaf(x.clone(), true);
    let (input, eps) = guidance_input(&mut tape, v, 9, &den, &sched(), &cfg).unwrap();
    assert_eq!(input, v);
    assert!(eps.is_none());
    assert_eq!(tape.len(), 1, "no denoiser nodes recorded");

    let bound = model.params().bind(&mut tape, false);
    let trace = model.forward(&mut tape, &bound, v).unwrap();
    let cot = Tensor::from_fn(&[2, 6], |i| if i == 2 || i == 6 + 5 { 1.0 } else { 0.0 });
    let direct = tape.vjp(trace.log_probs, &cot, &[v]).unwrap().remove(0);
    let g = guidance_gradient(&x, 9, &[2, 5], &model, &den, &sched(), &cfg).unwrap();
    assert_eq!(g, direct);
}

#[test]
fn zero_scale_step_is_the_unguided_step() {
    let den = denoiser(4);
    let model = classifier("s", Variant::Standard, 2);
    let sched = sched();
    let guide = Guide { subject: &model, robust: None, denoiser: &den, sched: &sched };
    let cfg = GuidanceConfig { scale: 0.0, ..Default::default() };
    let x = image(&mut ChaCha8Rng::seed_from_u64(8), 3);
    for t in [0, 6, STEPS - 1] {
        let mut a = sample_rngs(9, 0, 3);
        let mut b = a.clone();
        let guided = guided_step(&x, t, &[1, 2, 3], &guide, &cfg, &mut a).unwrap();
        let plain = ddpm_step(&den, &x, t, &sched, &mut b).unwrap();
        assert_eq!(guided, plain);
        assert_eq!(a, b);
    }
}

#[test]
fn zero_scale_full_chain_is_unconditional_sampling() {
    let den = denoiser(4);
    let model = classifier("s", Variant::Standard, 2);
    let sched = sched();
    let guide = Guide { subject: &model, robust: None, denoiser: &den, sched: &sched };
    let cfg = GuidanceConfig { scale: 0.0, start_fraction: 1.0, ..Default::default() };
    let originals = image(&mut ChaCha8Rng::seed_from_u64(2), 4);
    let requests: Vec<VceRequest> = (0..4)
        .map(|i| VceRequest {
            index: i,
            original: originals.slice_outer(i).unwrap().reshape(&[1, 1, RES, RES]).unwrap(),
            source: 0,
            target: 1,
            seed: derive_seed(77, i as u64),
        })
        .collect();
    let records = generate_batch(&guide, &cfg, &requests).unwrap();
    let uncond = sample_unconditional(&den, &sched, 4, RES, 77).unwrap();
    for (i, r) in records.iter().enumerate() {
        let want = uncond.slice_outer(i).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&r.generated()), bits(&want), "sample {i}");
    }
}

#[test]
fn self_cone_is_the_cone_free_run() {
    let den = denoiser(4);
    let model = classifier("robust", Variant::RobustNoise, 2);
    let sched = sched();
    let with = Guide { subject: &model, robust: Some(&model), denoiser: &den, sched: &sched };
    let without = Guide { subject: &model, robust: None, denoiser: &den, sched: &sched };
    let cone = GuidanceConfig {
        cone: Some(ConeConfig { robust_model: "robust".into(), half_angle_deg: 30.0 }),
        ..Default::default()
    };
    let plain = GuidanceConfig { cone: None, ..cone.clone() };
    let originals = image(&mut ChaCha8Rng::seed_from_u64(2), 3);
    let requests: Vec<VceRequest> = (0..3)
        .map(|i| VceRequest {
            index: i,
            original: originals.slice_outer(i).unwrap().reshape(&[1, 1, RES, RES]).unwrap(),
            source: 0,
            target: 3,
            seed: 100 + i as u64,
        })
        .collect();
    let a = generate_batch(&with, &cone, &requests).unwrap();
    let b = generate_batch(&without, &plain, &requests).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.generated(), y.generated());
        assert_eq!(x.log_probs(), y.log_probs());
    }
}

#[test]
fn step_shifts_mean_by_scaled_posterior_variance() {
    let den = denoiser(6);
    let model = classifier("s", Variant::Standard, 7);
    let sched = sched();
    let guide = Guide { subject: &model, robust: None, denoiser: &den, sched: &sched };
    let cfg = GuidanceConfig { scale: 1.0, ..Default::default() };
    let x = image(&mut ChaCha8Rng::seed_from_u64(11), 2);
    for t in [0, 4, 13] {
        let g = guidance_gradient(&x, t, &[0, 5], &model, &den, &sched, &cfg).unwrap();
        let eps = den.predict(&x, &[t, t]).unwrap();
        let mut mu = posterior_mean(&x, &eps, t, &sched).unwrap();
        let k = sched.posterior_var()[t];
        for (m, &gi) in mu.data_mut().iter_mut().zip(g.data()) {
            *m = (*m as f64 + k * gi as f64) as f32;
        }
        let mut a = sample_rngs(3, 0, 2);
        let mut b = a.clone();
        let want = posterior_sample(mu, t, &sched, &mut a).unwrap();
        let got = guided_step(&x, t, &[0, 5], &guide, &cfg, &mut b).unwrap();
        assert_eq!(got, want, "t={t}");
    }
}

#[test]
fn guidance_leaves_weights_untouched() {
    let den = denoiser(4);
    let subject = classifier("s", Variant::Standard, 2);
    let robust = classifier("r", Variant::RobustNoise, 3);
    let sched = sched();
    let sums = (den.params().checksum(), subject.params().checksum(), robust.params().checksum());
    let guide = Guide { subject: &subject, robust: Some(&robust), denoiser: &den, sched: &sched };
    let cfg = GuidanceConfig {
        cone: Some(ConeConfig { robust_model: "r".into(), half_angle_deg: 30.0 }),
        ..Default::default()
    };
    let original = image(&mut ChaCha8Rng::seed_from_u64(1), 1);
    generate_vce(&original, 0, 2, &guide, &cfg).unwrap();
    assert_eq!(sums, (den.params().checksum(), subject.params().checksum(), robust.params().checksum()));
}

#[test]
fn records_are_deterministic_and_write_once() {
    let den = denoiser(4);
    let subject = classifier("s", Variant::Standard, 2);
    let sched = sched();
    let guide = Guide { subject: &subject, robust: None, denoiser: &den, sched: &sched };
    let cfg = GuidanceConfig { seed: 42, ..Default::default() };
    let original = image(&mut ChaCha8Rng::seed_from_u64(1), 1);
    let a = generate_vce(&original, 0, 2, &guide, &cfg).unwrap();
    let b = generate_vce(&original, 0, 2, &guide, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.generated().shape(), original.shape());
    assert_eq!((a.source(), a.target(), a.seed()), (0, 2, 42));
    assert_eq!(a.log_probs().unwrap().len(), 6);
    assert!(matches!(a.outcome(), Outcome::Valid));
}

#[test]
fn rejection_flags_misses() {
    let den = denoiser(4);
    let mut subject = classifier("s", Variant::Standard, 2);
    // a head that always prefers class 0
    subject.params_mut().get_mut("fc2.w").unwrap().data_mut().fill(0.0);
    subject.params_mut().get_mut("fc2.b").unwrap().data_mut()[0] = 50.0;
    let sched = sched();
    let guide = Guide { subject: &subject, robust: None, denoiser: &den, sched: &sched };
    let cfg = GuidanceConfig { reject_invalid: true, ..Default::default() };
    let original = image(&mut ChaCha8Rng::seed_from_u64(1), 1);
    let r = generate_vce(&original, 1, 2, &guide, &cfg).unwrap();
    assert!(r.is_rejected());
    assert_eq!(r.predicted(), Some(0));
}

#[test]
fn invalid_requests_error() {
    let den = denoiser(4);
    let subject = classifier("s", Variant::Standard, 2);
    let sched = sched();
    let guide = Guide { subject: &subject, robust: None, denoiser: &den, sched: &sched };
    let original = image(&mut ChaCha8Rng::seed_from_u64(1), 1);
    let cfg = GuidanceConfig::default();
    assert!(generate_vce(&original, 2, 2, &guide, &cfg).is_err());
    assert!(generate_vce(&original.map(|v| v * 3.0), 0, 2, &guide, &cfg).is_err());
    let cone = GuidanceConfig {
        cone: Some(ConeConfig { robust_model: "missing".into(), half_angle_deg: 30.0 }),
        ..Default::default()
    };
    assert!(generate_vce(&original, 0, 2, &guide, &cone).is_err());
}

#[test]
fn larger_scale_raises_target_log_probability() {
    let den = denoiser(4);
    let subject = classifier("s", Variant::Standard, 2);
    let sched = sched();
    let guide = Guide { subject: &subject, robust: None, denoiser: &den, sched: &sched };
    let originals = image(&mut ChaCha8Rng::seed_from_u64(21), 16);
    let requests: Vec<VceRequest> = (0..16)
        .map(|i| VceRequest {
            index: i,
            original: originals.slice_outer(i).unwrap().reshape(&[1, 1, RES, RES]).unwrap(),
            source: 0,
            target: 1 + i % 5,
            seed: 500 + i as u64,
        })
        .collect();
    let mut last = f64::NEG_INFINITY;
    for s in [0.0, 0.5, 1.0, 2.0] {
        let cfg = GuidanceConfig { scale: s, ..Default::default() };
        let recs = generate_batch(&guide, &cfg, &requests).unwrap();
        let mean = recs.iter().map(|r| r.log_probs().unwrap()[r.target()] as f64).sum::<f64>() / recs.len() as f64;
        assert!(mean >= last - 1e-3, "s={s}: {mean} after {last}");
        last = mean;
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos()
}

fn t64(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.iter().map(|&x| x as f32).collect()).unwrap()
}

#[test]
fn cone_examples() {
    let p = cone_project(&t64(&[0.0, 1.0]), &t64(&[1.0, 0.0]), 30.0).unwrap();
    assert!((p.data()[0] - 0.4330).abs() < 1e-4 && (p.data()[1] - 0.25).abs() < 1e-4);
    let p = cone_project(&t64(&[-1.0, 0.0]), &t64(&[1.0, 0.0]), 30.0).unwrap();
    assert_eq!(p.data(), &[0.0, 0.0]);
    let p = cone_project(&t64(&[2.0, 0.0]), &t64(&[1.0, 0.0]), 30.0).unwrap();
    assert_eq!(p.data(), &[2.0, 0.0]);
    assert!(cone_project(&t64(&[1.0, 0.0]), &t64(&[0.0, 0.0]), 30.0).is_err());
}

/// Brute-force nearest in-cone point over a fine grid in 2-D.
#[test]
fn cone_matches_grid_search_in_2d() {
    let target = [0.0, 1.0];
    let mut best = (f64::INFINITY, [0.0, 0.0]);
    let half = 30f64.to_radians();
    for i in 0..=600 {
        let phi = -half + 2.0 * half * i as f64 / 600.0;
        for j in 0..=400 {
            let r = j as f64 / 400.0;
            let q = [r * phi.cos(), r * phi.sin()];
            let d = ((q[0] - target[0]).powi(2) + (q[1] - target[1]).powi(2)).sqrt();
            if d < best.0 {
                best = (d, q);
            }
        }
    }
    let p = cone_project(&t64(&target), &t64(&[1.0, 0.0]), 30.0).unwrap();
    assert!((p.data()[0] as f64 - best.1[0]).abs() < 5e-3);
    assert!((p.data()[1] as f64 - best.1[1]).abs() < 5e-3);
}

fn in_cone_probe(rng: &mut ChaCha8Rng, axis: &[f64], half: f64, radius: f64) -> Vec<f64> {
    let u: Vec<f64> = axis.iter().map(|a| a / norm(axis)).collect();
    let r: Vec<f64> = (0..axis.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dot: f64 = r.iter().zip(&u).map(|(a, b)| a * b).sum();
    let w: Vec<f64> = r.iter().zip(&u).map(|(a, b)| a - dot * b).collect();
    let wn = norm(&w).max(1e-12);
    let phi = rng.random_range(0.0..=half);
    let len = rng.random_range(0.0..radius);
    u.iter().zip(&w).map(|(a, b)| len * (phi.cos() * a + phi.sin() * b / wn)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cone_projection_properties(dim_idx in 0usize..3, seed in any::<u64>()) {
        let dim = [2, 10, 256][dim_idx];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let axis: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect();
        let g: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0) as f64).collect();
        prop_assume!(norm(&axis) > 1e-3);
        let p = cone_project(&t64(&g), &t64(&axis), 30.0).unwrap();
        let pv = p.to_f64_vec();

        if norm(&pv) > 1e-6 {
            prop_assert!(angle(&pv, &axis) <= 30f64.to_radians() + 1e-4);
        }
        let again = cone_project(&p, &t64(&axis), 30.0).unwrap();
        for (a, b) in again.data().iter().zip(p.data()) {
            prop_assert!((a - b).abs() <= 1e-6, "idempotence {a} vs {b}");
        }
        let gap = |q: &[f64]| q.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let dp = gap(&pv);
        for _ in 0..1000 {
            let q = in_cone_probe(&mut rng, &axis, 30f64.to_radians(), 2.0 * norm(&g));
            prop_assert!(dp <= gap(&q) + 1e-3);
        }
    }
}
