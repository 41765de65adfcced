//! Metric suite against brute-force recounts and closed forms.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tensorgrad::Tensor;
use vce_core::data::synth_shapes;
use vce_core::diffusion::make_schedule;
use vce_core::guidance::{generate_batch, CounterfactualRecord, GuidanceConfig, Guide, VceRequest};
use vce_core::metrics::*;
use vce_core::models::*;

fn classifier(id: &str, seed: u64, res: usize) -> ClassifierModel {
    ClassifierModel::new(id, Variant::Standard, Variant::Standard.default_arch(6, res), seed).unwrap()
}

fn count(xs: &[usize], y: usize) -> usize {
    let mut c = 0;
    for &x in xs {
        if x == y {
            c += 1;
        }
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn rates_equal_brute_force_recount(
        classes in 3usize..10,
        seed in any::<u64>(),
        n in 1usize..60,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let source = rng.random_range(0..classes);
        let target = (source + rng.random_range(1..classes)) % classes;
        let subject: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let oracle: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();

        let v = validity(&subject, source, target).unwrap();
        prop_assert_eq!(v.target, count(&subject, target) as f64 / n as f64);
        prop_assert_eq!(v.original, count(&subject, source) as f64 / n as f64);
        prop_assert_eq!(v.target + v.original + v.other, 1.0);

        let mut same = 0;
        for i in 0..n {
            if subject[i] == oracle[i] {
                same += 1;
            }
        }
        prop_assert_eq!(agreement(&subject, &oracle).unwrap(), same as f64 / n as f64);
        prop_assert_eq!(hit_rate(&oracle, target).unwrap(), count(&oracle, target) as f64 / n as f64);
    }
}

#[test]
fn rate_examples() {
    let v = validity(&[4, 4, 1], 1, 4).unwrap();
    assert_eq!(v.target, 2.0 / 3.0);
    let v = validity(&[1, 1, 4], 1, 4).unwrap();
    assert_eq!(v.original, 2.0 / 3.0);
    let v = validity(&[1, 4, 2], 1, 4).unwrap();
    assert_eq!((v.target, v.original), (1.0 / 3.0, 1.0 / 3.0));
    assert!((v.other - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(agreement(&[0, 1], &[0, 2]).unwrap(), 0.5);
    assert_eq!(hit_rate(&[3, 3, 1, 2], 3).unwrap(), 0.5);
    assert!(validity(&[], 0, 1).is_err());
}

#[test]
fn random_oracle_agrees_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let subject: Vec<usize> = (0..60_000).map(|i| i % 6).collect();
    let random: Vec<usize> = (0..60_000).map(|_| rng.random_range(0..6)).collect();
    assert!((agreement(&subject, &random).unwrap() - 1.0 / 6.0).abs() < 0.01);
}

/// Records generated by a tiny untrained pipeline.
fn records(subject: &ClassifierModel, n: usize) -> Vec<CounterfactualRecord> {
    let sched = make_schedule(10, 1e-3, 0.2).unwrap();
    let den = DenoiserModel::new(
        UNetConfig {
            widths: [8, 8, 8],
            time_dim: 8,
            groups: 4,
            resolution: 8,
            steps: 10,
        },
        1,
    )
    .unwrap();
    let guide = Guide { subject, robust: None, denoiser: &den, sched: &sched };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reqs: Vec<VceRequest> = (0..n)
        .map(|i| VceRequest {
            index: i,
            original: Tensor::from_fn(&[1, 1, 8, 8], |_| rng.random_range(-1.0f32..1.0)),
            source: 0,
            target: 3,
            seed: i as u64,
        })
        .collect();
    generate_batch(&guide, &GuidanceConfig::default(), &reqs).unwrap()
}

#[test]
fn record_rates_recount_predictions() {
    let subject = classifier("s", 1, 8);
    let recs = records(&subject, 12);
    let preds: Vec<usize> = recs.iter().map(|r| r.predicted().unwrap()).collect();
    assert_eq!(target_accuracy(&recs).unwrap(), count(&preds, 3) as f64 / 12.0);
    assert_eq!(original_accuracy(&recs).unwrap(), count(&preds, 0) as f64 / 12.0);

    // a weight copy under another id agrees everywhere
    let twin = classifier("twin", 1, 8);
    assert_eq!(oracle_score(&recs, &twin).unwrap(), 1.0);
    assert_eq!(oracle_target_accuracy(&recs, &twin).unwrap(), target_accuracy(&recs).unwrap());
    assert!(oracle_score(&recs, &subject).is_err());

    let other = classifier("other", 7, 8);
    let op = oracle_predictions(&recs, &other).unwrap();
    assert_eq!(oracle_target_accuracy(&recs, &other).unwrap(), count(&op, 3) as f64 / 12.0);
    let committee = committee_ota(&recs, &[&twin, &other]).unwrap();
    let want = (oracle_target_accuracy(&recs, &twin).unwrap() + oracle_target_accuracy(&recs, &other).unwrap()) / 2.0;
    assert_eq!(committee, want);
    let random = ClassifierModel::new("rnd", Variant::RandomNet, Variant::RandomNet.default_arch(6, 8), 3).unwrap();
    assert_eq!(committee_ota(&recs, &[&twin, &other, &random]).unwrap(), want);
}

#[test]
fn minkowski_examples() {
    let t = |v: &[f32]| Tensor::new(vec![v.len()], v.to_vec()).unwrap();
    assert_eq!(minkowski(&t(&[0.0, 0.0]), &t(&[3.0, 4.0]), 2.0).unwrap(), 5.0);
    assert_eq!(minkowski(&t(&[0.0, 0.0]), &t(&[1.0, 1.0]), 1.0).unwrap(), 2.0);
    assert!((minkowski(&t(&[0.0, 0.0]), &t(&[1.0, 1.0]), 1.5).unwrap() - 2f64.powf(2.0 / 3.0)).abs() < 1e-12);
    assert_eq!(minkowski(&t(&[0.5, -0.5]), &t(&[0.5, -0.5]), 2.0).unwrap(), 0.0);
    assert!(minkowski(&t(&[0.0]), &t(&[0.0, 1.0]), 2.0).is_err());
}

fn noisy(rng: &mut ChaCha8Rng, x: &Tensor, sigma: f64) -> Tensor {
    let data = x.data().iter().map(|&v| (v as f64 + sigma * rng.sample::<f64, _>(StandardNormal)) as f32).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

#[test]
fn lpips_properties() {
    let net = classifier("feat", 13, 16);
    let ds = synth_shapes(3, 2, 16).unwrap();
    let a = ds.image(0);
    let b = ds.image(5);
    assert_eq!(lpips(&a, &a, &net).unwrap(), 0.0);
    assert_eq!(lpips(&a, &b, &net).unwrap(), lpips(&b, &a, &net).unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut small, mut large) = (0.0, 0.0);
    for _ in 0..100 {
        small += lpips(&a, &noisy(&mut rng, &a, 0.05), &net).unwrap();
        large += lpips(&a, &noisy(&mut rng, &a, 0.3), &net).unwrap();
    }
    assert!(large > small, "{large} vs {small}");
}

fn g1(mu: f64, var: f64) -> (DVector<f64>, DMatrix<f64>) {
    (DVector::from_element(1, mu), DMatrix::from_element(1, 1, var))
}

#[test]
fn frechet_examples() {
    let (m, c) = g1(0.3, 2.0);
    assert!(frechet_gaussian(&m, &c, &m, &c).unwrap().abs() < 1e-6);
    let ((m1, c1), (m2, c2)) = (g1(0.0, 1.0), g1(1.0, 1.0));
    assert!((frechet_gaussian(&m1, &c1, &m2, &c2).unwrap() - 1.0).abs() < 1e-6);
    let ((m1, c1), (m2, c2)) = (g1(0.0, 4.0), g1(0.0, 1.0));
    assert!((frechet_gaussian(&m1, &c1, &m2, &c2).unwrap() - 1.0).abs() < 1e-6);
    let bad = DMatrix::from_element(1, 1, -1.0);
    assert!(frechet_gaussian(&m1, &bad, &m2, &c2).is_err());
}

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mu = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    (mu, &a * a.transpose())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn frechet_is_symmetric_and_zero_only_on_equal(seed in any::<u64>(), d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m1, c1) = random_gaussian(&mut rng, d);
        let (m2, c2) = random_gaussian(&mut rng, d);
        let ab = frechet_gaussian(&m1, &c1, &m2, &c2).unwrap();
        let ba = frechet_gaussian(&m2, &c2, &m1, &c1).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-6 * (1.0 + ab.abs()), "{ab} vs {ba}");
        prop_assert!(ab > 1e-6);
        prop_assert!(frechet_gaussian(&m1, &c1, &m1, &c1).unwrap().abs() < 1e-6);
    }
}

#[test]
fn fid_properties() {
    let net = classifier("feat", 13, 16);
    let ds = synth_shapes(4, 40, 16).unwrap();
    let space = EmbeddingSpace::principal(&embeddings(ds.images(), &net).unwrap(), 8).unwrap();
    let class = |c: usize| ds.indices_of_class(c);
    let squares = ds.batch(&class(0));
    assert!(fid(&squares, &squares, &net, &space).unwrap() <= 1e-5);

    let mut reversed = class(0);
    reversed.reverse();
    let a = ds.batch(&class(0)[..20]);
    let b = ds.batch(&class(2)[..20]);
    assert_eq!(fid(&squares, &b, &net, &space).unwrap(), fid(&ds.batch(&reversed), &b, &net, &space).unwrap());

    let halves = fid(&a, &ds.batch(&class(0)[20..]), &net, &space).unwrap();
    let across = fid(&a, &b, &net, &space).unwrap();
    assert!(halves < across, "{halves} vs {across}");
    assert!(fid(&ds.batch(&class(0)[..8]), &b, &net, &space).is_err());
}

#[test]
fn diversity_examples() {
    let net = classifier("feat", 13, 16);
    let ds = synth_shapes(4, 3, 16).unwrap();
    let same = Tensor::stack(&[ds.image(0).slice_outer(0).unwrap(), ds.image(0).slice_outer(0).unwrap()]).unwrap();
    assert_eq!(diversity(&[same], &net).unwrap(), 0.0);
    let pair = ds.batch(&[0, 4]);
    let single = lpips(&ds.image(0), &ds.image(4), &net).unwrap();
    assert!((diversity(&[pair.clone()], &net).unwrap() - single).abs() < 1e-12);
    let copies = vec![pair.clone(); 4];
    assert!((diversity(&copies, &net).unwrap() - single).abs() < 1e-12);
    assert!(diversity(&[ds.batch(&[1])], &net).is_err());
}
