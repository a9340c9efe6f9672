use std::fs;

use deshadow::data::{
    crop_pair, crop_pair_exhaustive, load_image, load_mask, load_rgb, pseudo_infrared,
    quantize_tensor, region_means, render_scene, save_image, synth_dataset, Coverage, Manifest,
    SynthConfig,
};
use deshadow::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn png_round_trip_is_exact_after_quantisation() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for channels in [1, 3] {
        let t = quantize_tensor(&Tensor::from_fn([channels, 9, 13], |_| {
            rng.random_range(0.0..1.0)
        }));
        let path = dir.path().join(format!("c{channels}.png"));
        save_image(&path, &t).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }
}

#[test]
fn gray_image_loads_as_three_equal_channels() {
    let dir = tempfile::tempdir().unwrap();
    let t = quantize_tensor(&Tensor::from_fn([1, 4, 4], |i| i as f64 / 16.0));
    let path = dir.path().join("g.png");
    save_image(&path, &t).unwrap();
    let rgb = load_rgb(&path).unwrap();
    assert_eq!(rgb.shape(), &[3, 4, 4]);
    for c in 0..3 {
        assert_eq!(&rgb.data()[c * 16..(c + 1) * 16], t.data());
    }
}

#[test]
fn mask_loading_binarises() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::from_fn([1, 2, 3], |i| [0.0, 0.2, 0.49, 0.51, 0.8, 1.0][i]);
    let path = dir.path().join("m.png");
    save_image(&path, &t).unwrap();
    let m = load_mask(&path).unwrap();
    assert_eq!(m.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
}

#[test]
fn left_half_mask_crops_land_on_the_right_sides() {
    // Shadow in columns < 32 of a 64x64 image: a 32x32 window is ≥ 70%
    // covered only when it starts at column ≤ 9, and ≤ 2% covered only when
    // it starts at column 32.
    let mask = Tensor::from_fn([1, 64, 64], |i| if i % 64 < 32 { 1.0 } else { 0.0 });
    let image = Tensor::from_fn([3, 64, 64], |i| (i % 64) as f64 / 64.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let pair = crop_pair(&image, &mask, 32, 0.7, 0.02, &mut rng).unwrap();
        assert!(pair.shadow_at.1 <= 9, "{:?}", pair.shadow_at);
        assert_eq!(pair.shadow_free_at.1, 32);
        assert_eq!(pair.shadow.shape(), &[3, 32, 32]);
        assert_eq!(pair.shadow_free.data()[0], 32.0 / 64.0);
        assert_eq!(pair.shadow.data()[0], pair.shadow_at.1 as f64 / 64.0);
    }
}

#[test]
fn crops_fail_cleanly_without_valid_windows() {
    let full = Tensor::ones([1, 16, 16]);
    let image = Tensor::zeros([3, 16, 16]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert!(crop_pair(&image, &full, 8, 0.7, 0.02, &mut rng).is_err());
    assert!(crop_pair_exhaustive(&image, &full, 8, 0.7, 0.02, &mut rng).is_err());
    assert!(crop_pair(&image, &full, 32, 0.7, 0.02, &mut rng).is_err());
}

#[test]
fn exhaustive_crop_finds_a_single_valid_window() {
    // Only the window at (0, 0) is fully shadowed; only (8, 8) is clear.
    let mask = Tensor::from_fn([1, 16, 16], |i| {
        let (y, x) = (i / 16, i % 16);
        if y < 8 && x < 8 {
            1.0
        } else if y >= 8 && x >= 8 {
            0.0
        } else {
            0.5
        }
    });
    let image = Tensor::zeros([3, 16, 16]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pair = crop_pair_exhaustive(&image, &mask, 8, 0.95, 0.05, &mut rng).unwrap();
    assert_eq!(pair.shadow_at, (0, 0));
    assert_eq!(pair.shadow_free_at, (8, 8));
}

#[test]
fn coverage_fractions_for_a_band() {
    let mask = Tensor::from_fn([1, 10, 10], |i| if i / 10 < 5 { 1.0 } else { 0.0 });
    let cov = Coverage::new(&mask);
    assert_eq!(cov.window(0, 0, 5), 1.0);
    assert_eq!(cov.window(5, 5, 5), 0.0);
    assert_eq!(cov.window(3, 0, 4), 0.5);
}

#[test]
fn synthetic_scenes_recompose_from_their_parts() {
    let cfg = SynthConfig::new(1, 48, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let s = render_scene(&cfg, &mut rng).unwrap();
        let n = 48 * 48;
        for i in 0..3 * n {
            let d = s.darkening.data()[i % n];
            assert_eq!(s.shadow.data()[i], s.gt.data()[i] * d);
            if s.mask.data()[i % n] < 0.5 {
                assert_eq!(d, 1.0);
            } else {
                assert!((0.3..1.0).contains(&d));
            }
        }
        let (inside, outside) = region_means(&s.shadow, &s.mask);
        assert!(inside < outside);
        let (a, b) = Coverage::new(&s.mask).valid_fractions(24, 0.7, 0.02);
        assert!(a >= 0.02 && b >= 0.02);
    }
}

#[test]
fn synthetic_dataset_is_deterministic_and_split() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::new(10, 32, 9);
    let m = synth_dataset(a.path(), &cfg).unwrap();
    synth_dataset(b.path(), &cfg).unwrap();
    assert_eq!(m.entries.len(), 10);
    for e in &m.entries {
        for rel in [&e.image, &e.mask] {
            assert_eq!(
                fs::read(a.path().join(rel)).unwrap(),
                fs::read(b.path().join(rel)).unwrap()
            );
        }
    }
    let train = Manifest::load(a.path().join("train.tsv")).unwrap();
    let test = Manifest::load(a.path().join("test.tsv")).unwrap();
    assert_eq!((train.entries.len(), test.entries.len()), (9, 1));
    let samples = test.load_samples().unwrap();
    let s = &samples[0];
    assert!(s.gt.is_some());
    assert!(s.infrared_is_proxy);
    assert_eq!(s.infrared.data(), pseudo_infrared(&s.visible).data());

    let other = tempfile::tempdir().unwrap();
    synth_dataset(other.path(), &SynthConfig::new(10, 32, 10)).unwrap();
    let first = |d: &std::path::Path| fs::read(d.join("images/00000.png")).unwrap();
    assert_ne!(first(a.path()), first(other.path()));
}

#[test]
fn manifest_rejects_missing_columns() {
    assert!(Manifest::parse("/tmp", "only_one_column.png\n").is_err());
    let m = Manifest::parse("/data", "# comment\na.png\tb.png\n\nc.png\td.png\te.png\n").unwrap();
    assert_eq!(m.entries.len(), 2);
    assert!(m.entries[1].infrared.is_some());
}

#[test]
fn pseudo_infrared_stays_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = Tensor::from_fn([3, 20, 20], |_| rng.random_range(0.0..1.0));
    let ir = pseudo_infrared(&img);
    assert_eq!(ir.shape(), &[1, 20, 20]);
    assert!(ir.data().iter().all(|v| (0.0..=1.0).contains(v)));
}
