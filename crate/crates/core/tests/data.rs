//! IDX codec and dataset preparation.

use proptest::prelude::*;
use vce_core::data::*;

fn idx_bytes(n: usize, h: usize, w: usize, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = vec![0, 0, 8, 3];
    for d in [n, h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = vec![0, 0, 8, 1];
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn idx_round_trip_is_byte_exact(
        n in 1usize..12,
        h in 1usize..9,
        w in 1usize..9,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<u8> = (0..n * h * w).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let (img, lab) = idx_bytes(n, h, w, &pixels, &labels);
        let ds = parse_idx(&img, &lab).unwrap();
        prop_assert_eq!(ds.len(), n);
        prop_assert_eq!((ds.height(), ds.width()), (h, w));
        prop_assert!(ds.images().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let (img2, lab2) = serialize_idx(&ds);
        prop_assert_eq!(img2, img);
        prop_assert_eq!(lab2, lab);
    }

    #[test]
    fn split_partitions_each_class(per_class in 2usize..30, frac in 0.05f64..0.9, seed in any::<u64>()) {
        let ds = synth_shapes(3, per_class, 8).unwrap();
        let Ok((train, val)) = stratified_split(&ds, frac, seed) else {
            return Ok(());
        };
        prop_assert_eq!(train.len() + val.len(), ds.len());
        for (c, &count) in ds.class_counts().iter().enumerate() {
            let want = count as f64 * frac;
            prop_assert!((val.class_counts()[c] as f64 - want).abs() <= 1.0);
        }
    }
}

#[test]
fn malformed_files_are_rejected() {
    let (img, lab) = idx_bytes(2, 2, 2, &[0; 8], &[1, 2]);
    assert!(parse_idx(&img, &lab).is_ok());

    let mut bad = img.clone();
    bad[3] = 1;
    assert!(matches!(parse_idx(&bad, &lab), Err(DataError::Format { .. })));
    assert!(matches!(parse_idx(&img, &img), Err(DataError::Format { .. })));
    assert!(matches!(parse_idx(&img[..img.len() - 1], &lab), Err(DataError::Length { .. })));
    assert!(matches!(parse_idx(&img, &lab[..9]), Err(DataError::Length { .. })));
    assert!(parse_idx(&img[..10], &lab).is_err());
    assert!(parse_idx(&[], &lab).is_err());

    let (img3, lab3) = idx_bytes(3, 2, 2, &[0; 12], &[1, 2]);
    assert!(matches!(parse_idx(&img3, &lab3), Err(DataError::Consistency { images: 3, labels: 2 })));
}

#[test]
fn idx_files_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = idx_bytes(3, 28, 28, &vec![255; 3 * 784], &[0, 5, 9]);
    let (ip, lp) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    std::fs::write(&ip, img).unwrap();
    std::fs::write(&lp, lab).unwrap();
    let ds = load_idx_files(&ip, &lp).unwrap();
    assert_eq!(ds.labels(), &[0, 5, 9]);
    let small = prepare_mnist(&ds).unwrap();
    assert_eq!((small.height(), small.width()), (16, 16));
    assert!(small.images().data().iter().all(|&v| v == 1.0));
    assert!(matches!(load_idx_files(&dir.path().join("missing"), &lp), Err(DataError::Io { .. })));
}

#[test]
fn shapes_cover_the_pixel_range_and_classes() {
    let ds = synth_shapes(5, 20, 16).unwrap();
    assert_eq!(ds.class_counts(), vec![20; 6]);
    assert_eq!(ds.num_classes(), 6);
    assert!(ds.images().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(ds.images(), synth_shapes(5, 20, 16).unwrap().images());
    assert_ne!(ds.images(), synth_shapes(6, 20, 16).unwrap().images());
}
