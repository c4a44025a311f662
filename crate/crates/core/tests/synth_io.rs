use std::collections::HashSet;
use std::fs;

use facedepth::dataset_io::{manifest_for, read_dataset, read_manifest, read_split, write_dataset};
use facedepth::gt_io::{compute_patch_targets, read_targets, write_targets};
use facedepth::synth::{
    generate_dataset, generate_fake_sample, generate_real_sample, DatasetConfig, DegradeLevel, GeneratorConfig,
    SampleRecord, Split,
};
use facedepth::Error;
use proptest::prelude::*;

fn small(count: usize, seed: u64, quality: Option<DegradeLevel>) -> DatasetConfig {
    DatasetConfig {
        count,
        seed,
        generator: GeneratorConfig {
            quality,
            ..GeneratorConfig::default()
        },
        ..DatasetConfig::default()
    }
}

#[test]
fn write_then_read_is_bit_exact() {
    let ds = generate_dataset(&small(60, 4, Some(DegradeLevel::Low))).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let m = write_dataset(dir.path(), &ds).unwrap();
    assert_eq!(m, manifest_for(&ds).unwrap());
    assert_eq!(m.splits.values().map(|s| s.count).sum::<usize>(), m.record_count);
    let (m2, back) = read_dataset(dir.path()).unwrap();
    assert_eq!(m2, m);
    assert_eq!(back, ds);
    assert_eq!(read_split(dir.path(), Split::Val).unwrap(), ds.val);
}

#[test]
fn tampered_blob_is_detected() {
    let ds = generate_dataset(&small(20, 5, None)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let path = dir.path().join("train").join("images.f32");
    let mut bytes = fs::read(&path).unwrap();
    bytes[17] ^= 0x01;
    fs::write(&path, bytes).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Corrupt { .. })));
    // other splits still read
    assert_eq!(read_split(dir.path(), Split::Test).unwrap(), ds.test);
}

#[test]
fn missing_file_and_version_mismatch_are_errors() {
    let ds = generate_dataset(&small(20, 6, None)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();

    let manifest = dir.path().join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
    assert!(matches!(read_manifest(dir.path()), Err(Error::Version { found: 99, .. })));
    fs::write(&manifest, &text).unwrap();

    fs::remove_file(dir.path().join("val").join("masks.u8")).unwrap();
    assert!(matches!(read_split(dir.path(), Split::Val), Err(Error::Io { .. })));
}

#[test]
fn regeneration_is_deterministic_and_splits_disjoint() {
    let cfg = small(120, 9, None);
    let a = generate_dataset(&cfg).unwrap();
    assert_eq!(a, generate_dataset(&cfg).unwrap());
    assert_ne!(a, generate_dataset(&small(120, 10, None)).unwrap());
    let mut seen = HashSet::new();
    for split in Split::ALL {
        for r in a.split(split) {
            assert!(seen.insert(r.id), "id {} in two splits", r.id);
        }
    }
    assert_eq!(seen.len(), 120);
}

#[test]
fn class_balance_within_one_percent() {
    let ds = generate_dataset(&small(2000, 1, None)).unwrap();
    let fakes = Split::ALL
        .iter()
        .flat_map(|&s| ds.split(s))
        .filter(|r| r.label.is_fake())
        .count();
    assert!((fakes as f64 / 2000.0 - 0.5).abs() <= 0.01);
}

#[test]
fn patch_target_files_round_trip() {
    let ds = generate_dataset(&small(20, 2, None)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t = compute_patch_targets(&ds.train, 50, 4).unwrap();
    let stem = dir.path().join("train");
    let side = write_targets(&stem, &t, 2).unwrap();
    let (side2, back) = read_targets(&stem).unwrap();
    assert_eq!(side, side2);
    assert_eq!(back, t);
    let bin = stem.with_extension("bin");
    let mut bytes = fs::read(&bin).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&bin, bytes).unwrap();
    assert!(matches!(read_targets(&stem), Err(Error::Corrupt { .. })));
}

/// Features for the probe: image pixels followed by ground-truth depth / 255.
fn probe_features(r: &SampleRecord) -> Vec<f64> {
    r.image
        .as_slice()
        .iter()
        .map(|&v| v as f64)
        .chain(r.gt_depth.0.as_slice().iter().map(|&d| d as f64 / 255.0))
        .collect()
}

/// Plain L2-regularized logistic regression by full-batch gradient descent.
fn fit_logistic(x: &[Vec<f64>], y: &[f64], iters: usize, lr: f64, l2: f64) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let n = x.len() as f64;
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..iters {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - yi;
            for (g, a) in gw.iter_mut().zip(xi) {
                *g += err * a;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * (g / n + l2 * *wi);
        }
        b -= lr * gb / n;
    }
    (w, b)
}

#[test]
fn linear_probe_separates_real_from_fake() {
    let gen = GeneratorConfig::default();
    let make = |offset: u64| -> Vec<SampleRecord> {
        (0..500u64)
            .map(|i| {
                let seed = offset + i;
                if i % 2 == 0 {
                    generate_real_sample(seed, seed, &gen).unwrap()
                } else {
                    generate_fake_sample(seed, seed, &gen).unwrap()
                }
            })
            .collect()
    };
    let (train, test) = (make(0), make(100_000));
    let x: Vec<Vec<f64>> = train.iter().map(probe_features).collect();
    let y: Vec<f64> = train.iter().map(|r| r.label.class_index() as f64).collect();
    let (w, b) = fit_logistic(&x, &y, 300, 0.5, 1e-4);
    let hits = test
        .iter()
        .filter(|r| {
            let z: f64 = probe_features(r).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            (z > 0.0) == r.label.is_fake()
        })
        .count();
    let acc = hits as f64 / test.len() as f64;
    assert!(acc > 0.9, "held-out probe accuracy {acc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn generated_records_are_consistent(seed in any::<u64>(), fake in any::<bool>(), low in any::<bool>()) {
        let cfg = GeneratorConfig {
            quality: low.then_some(DegradeLevel::Low),
            ..GeneratorConfig::default()
        };
        let r = if fake {
            generate_fake_sample(1, seed, &cfg).unwrap()
        } else {
            generate_real_sample(1, seed, &cfg).unwrap()
        };
        prop_assert!(r.check_consistency(cfg.lambda).is_ok());
        prop_assert_eq!(r.label.is_fake(), r.mask.count() > 0);
        prop_assert!(r.image.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let (h, w) = r.mask.plane().dims();
        for y in 0..h {
            for x in 0..w {
                let g = r.gt_depth.0.get(y, x);
                if r.mask.is_fake(y, x) {
                    prop_assert_eq!(g, 0);
                } else {
                    prop_assert!(g as u32 >= cfg.lambda);
                }
            }
        }
    }
}
