use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rdunet::data::{
    decode_pgm, encode_pgm, generate_synthetic, image_from_bytes, image_to_bytes, read_mask, to_batch, write_dataset,
    AugmentParams, GeneratorParams, Manifest, Sample, Split, SplitCounts, MAX_SCALE, MAX_SHIFT,
};
use rdunet::Tensor;

fn blocky(seed: u64, size: usize) -> Sample {
    // binary image equal to its mask: one axis-aligned rectangle of land
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::Rng;
    let (y0, x0) = (rng.gen_range(0..size / 2), rng.gen_range(0..size / 2));
    let (y1, x1) = (rng.gen_range(y0 + 1..=size), rng.gen_range(x0 + 1..=size));
    let mask: Vec<u8> = (0..size * size)
        .map(|i| u8::from((y0..y1).contains(&(i / size)) && (x0..x1).contains(&(i % size))))
        .collect();
    let image = mask.iter().map(|&m| f64::from(m)).collect();
    Sample::new(size, size, image, mask).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmentation_keeps_shape_and_binary_mask(seed in any::<u64>(), draw in any::<u64>()) {
        let s = &generate_synthetic(seed, 1, 32, &GeneratorParams::default()).unwrap()[0];
        let p = AugmentParams::sample(&mut ChaCha8Rng::seed_from_u64(draw));
        prop_assert!(p.shift.0.abs() <= MAX_SHIFT && p.shift.1.abs() <= MAX_SHIFT);
        prop_assert!((1.0..=MAX_SCALE).contains(&p.scale));
        let out = p.apply(s);
        prop_assert_eq!((out.height, out.width), (32, 32));
        prop_assert_eq!(out.image.len(), 32 * 32);
        prop_assert!(out.mask.iter().all(|&m| m <= 1));
        prop_assert!(out.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn image_and_mask_stay_aligned(seed in any::<u64>(), draw in any::<u64>()) {
        let s = blocky(seed, 32);
        let p = AugmentParams::sample(&mut ChaCha8Rng::seed_from_u64(draw));
        let out = p.apply(&s);
        let mut checked = 0;
        for (v, &m) in out.image.iter().zip(&out.mask) {
            if *v == 0.0 || *v == 1.0 {
                prop_assert_eq!(*v, f64::from(m));
                checked += 1;
            }
        }
        prop_assert!(checked >= out.mask.len() / 2, "{} of {}", checked, out.mask.len());
    }

    #[test]
    fn identity_augmentation_is_exact(seed in any::<u64>()) {
        let s = &generate_synthetic(seed, 1, 16, &GeneratorParams::default()).unwrap()[0];
        prop_assert_eq!(&AugmentParams::IDENTITY.apply(s), s);
    }

    #[test]
    fn byte_quantization_round_trip(bytes in proptest::collection::vec(any::<u8>(), 1..200)) {
        prop_assert_eq!(image_to_bytes(&image_from_bytes(&bytes)), bytes);
    }

    #[test]
    fn pgm_round_trip(w in 1usize..20, h in 1usize..20, fill in any::<u8>()) {
        let pixels: Vec<u8> = (0..w * h).map(|i| fill.wrapping_add(i as u8)).collect();
        prop_assert_eq!(decode_pgm(&encode_pgm(w, h, &pixels)).unwrap(), (w, h, pixels));
    }
}

#[test]
fn sea_fraction_stays_in_range() {
    for seed in 0..1000 {
        let s = &generate_synthetic(seed, 1, 32, &GeneratorParams::default()).unwrap()[0];
        let f = s.sea_fraction();
        assert!((0.2..=0.8).contains(&f), "seed {seed}: {f}");
    }
}

#[test]
fn generation_is_indexable() {
    let all = generate_synthetic(5, 6, 16, &GeneratorParams::default()).unwrap();
    let again = generate_synthetic(5, 6, 16, &GeneratorParams::default()).unwrap();
    assert_eq!(all, again);
    assert_ne!(all[0], all[1]);
    assert!(generate_synthetic(5, 1, 20, &GeneratorParams::default()).is_err());
}

#[test]
fn batches_are_nchw() {
    let samples = generate_synthetic(1, 3, 16, &GeneratorParams::default()).unwrap();
    let refs: Vec<&Sample> = samples.iter().collect();
    let (x, labels): (Tensor<f64>, _) = to_batch(&refs).unwrap();
    assert_eq!(x.shape(), rdunet::Shape::new(3, 1, 16, 16));
    assert_eq!(x.plane(2, 0), &samples[2].image[..]);
    let expected: Vec<usize> = samples
        .iter()
        .flat_map(|s| s.mask.iter().map(|&m| m as usize))
        .collect();
    assert_eq!(labels, expected);
}

#[test]
fn dataset_on_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate_synthetic(3, 20, 16, &GeneratorParams::default()).unwrap();
    let counts = SplitCounts::for_count(20);
    assert_eq!((counts.train, counts.val, counts.test), (16, 2, 2));
    let written = write_dataset(&samples, dir.path(), counts).unwrap();

    let manifest = Manifest::load(&dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(manifest.entries, written.entries);
    manifest.check_disjoint().unwrap();
    let mut seen = std::collections::HashSet::new();
    for e in &manifest.entries {
        assert!(seen.insert(e.image.clone()) && seen.insert(e.mask.clone()));
    }

    let mut loaded = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        loaded.extend(manifest.load_split(split).unwrap());
    }
    assert_eq!(loaded.len(), samples.len());
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.mask, b.mask);
        assert!(a
            .image
            .iter()
            .zip(&b.image)
            .all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
    }
    let (w, h, mask) = read_mask(&dir.path().join(&manifest.entries[0].mask)).unwrap();
    assert_eq!((w, h), (16, 16));
    assert_eq!(mask, samples[0].mask);

    assert!(write_dataset(&samples, dir.path(), SplitCounts::for_count(10)).is_err());
}

#[test]
fn corrupt_mask_is_rejected_with_offset() {
    let mut bytes = encode_pgm(2, 1, &[0, 255]);
    let n = bytes.len();
    bytes[n - 1] = 17;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    std::fs::write(&path, &bytes).unwrap();
    let err = read_mask(&path).unwrap_err().to_string();
    assert!(err.contains(&(n - 1).to_string()), "{err}");
}
