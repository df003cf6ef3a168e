mod common;

use damm_core::data::{
    box_smooth, corpus_checksum, distance_transform, gen_nuclei, gen_target, gen_vessels, make_dataset, nuclei_blobs, read_dataset,
    target_map, write_dataset, DatasetSpec, SamplePair, NUCLEI_MAX, NUCLEI_MIN, TARGET_TAU,
};
use damm_core::Tensor;

#[test]
fn generators_are_deterministic() {
    for seed in [0u64, 7, 123456789] {
        assert_eq!(gen_vessels(seed, 32).unwrap(), gen_vessels(seed, 32).unwrap());
        assert_eq!(gen_nuclei(seed, 32).unwrap(), gen_nuclei(seed, 32).unwrap());
        let a = SamplePair::generate(seed, 32, false).unwrap();
        assert_eq!(a, SamplePair::generate(seed, 32, false).unwrap());
    }
    assert_ne!(gen_vessels(1, 32).unwrap(), gen_vessels(2, 32).unwrap());
    assert!(gen_vessels(1, 15).is_err());
}

#[test]
fn vessels_nonempty_and_foreground_in_band() {
    for (size, lo, hi) in [(32usize, 0.20, 0.33), (64, 0.10, 0.18)] {
        let mut total = 0.0;
        for seed in 0..100u64 {
            let v = gen_vessels(seed, size).unwrap();
            let max = v.data().iter().cloned().fold(0.0, f32::max);
            assert!(max >= 0.5 && max <= 1.0);
            total += v.data().iter().filter(|&&x| x >= 0.5).count() as f64 / (size * size) as f64;
        }
        let mean = total / 100.0;
        assert!((lo..=hi).contains(&mean), "size {size}: {mean}");
    }
}

#[test]
fn nuclei_counts_and_range() {
    let mut seen = vec![0usize; NUCLEI_MAX + 1];
    for seed in 0..100u64 {
        let blobs = nuclei_blobs(seed, 32).unwrap();
        assert!((NUCLEI_MIN..=NUCLEI_MAX).contains(&blobs.len()));
        seen[blobs.len()] += 1;
        assert!(blobs.iter().all(|b| (1.0..=3.0).contains(&b.sigma)));
        let n = gen_nuclei(seed, 32).unwrap();
        assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    // The histogram spreads over the whole configured range.
    let lo_half = seen[NUCLEI_MIN..40].iter().sum::<usize>();
    let hi_half = seen[40..=NUCLEI_MAX].iter().sum::<usize>();
    assert!(lo_half > 25 && hi_half > 25, "{lo_half} / {hi_half}");
}

#[test]
fn target_matches_brute_force_on_16px() {
    for seed in [3u64, 4, 5] {
        let v = gen_vessels(seed, 16).unwrap();
        let n = gen_nuclei(seed, 16).unwrap();
        let t = target_map(&v, &n).unwrap();
        let want = common::brute_target(v.data(), n.data(), 16, 16, TARGET_TAU);
        for (a, b) in t.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-6, "{a} vs {b}");
        }
        let max = t.data().iter().cloned().fold(0.0, f32::max);
        assert_eq!(max, 1.0);
    }
}

#[test]
fn uniform_nuclei_leave_pure_distance_decay() {
    let v = gen_vessels(8, 32).unwrap();
    let t = target_map(&v, &Tensor::full(&[1, 32, 32], 0.4)).unwrap();
    let decay = common::brute_target(v.data(), &[1.0; 1024], 32, 32, TARGET_TAU);
    for (a, b) in t.data().iter().zip(&decay) {
        assert!((*a as f64 - b).abs() < 1e-6);
    }
    // On-vessel pixels dominate off-vessel ones at equal nuclei factor.
    let on = (0..1024).filter(|&k| v.data()[k] >= 0.5).map(|k| t.data()[k]).fold(f32::INFINITY, f32::min);
    let off = (0..1024).filter(|&k| v.data()[k] < 0.5).map(|k| t.data()[k]).fold(0.0, f32::max);
    assert!(on >= off);
}

#[test]
fn corrupted_target_uses_other_nuclei() {
    let s = SamplePair::generate(9, 32, true).unwrap();
    let c = SamplePair::generate(9, 32, false).unwrap();
    assert_eq!(s.vessel, c.vessel);
    assert_eq!(s.nuclei, c.nuclei);
    assert_ne!(s.target, c.target);
    assert_eq!(gen_target(&s.vessel, &s.nuclei, true, 9).unwrap(), s.target);
}

#[test]
fn corrupt_fraction_rounding_and_checksums() {
    let spec = DatasetSpec { count: 100, corrupt_fraction: 0.5, seed: 3, image_size: 16, ..Default::default() };
    let a = make_dataset(&spec).unwrap();
    assert_eq!(a.samples.iter().filter(|s| !s.consistent).count(), 50);
    assert_eq!(a.split.train.len() + a.split.val.len() + a.split.test.len(), 100);
    let b = make_dataset(&spec).unwrap();
    assert_eq!(corpus_checksum(&a.samples), corpus_checksum(&b.samples));
    assert_eq!(a.split, b.split);
    let clean = make_dataset(&DatasetSpec { corrupt_fraction: 0.0, ..spec.clone() }).unwrap();
    assert!(clean.samples.iter().all(|s| s.consistent));
    assert_ne!(corpus_checksum(&clean.samples), corpus_checksum(&a.samples));
    let odd = DatasetSpec { count: 7, corrupt_fraction: 0.3, ..spec.clone() };
    assert_eq!(make_dataset(&odd).unwrap().samples.iter().filter(|s| !s.consistent).count(), 2);
    assert!(make_dataset(&DatasetSpec { corrupt_fraction: 1.5, ..spec.clone() }).is_err());
    assert!(make_dataset(&DatasetSpec { train_fraction: 0.9, val_fraction: 0.2, ..spec }).is_err());
}

/// Pixel features `[1, v, g, s, g·s]` with `g` the vessel-distance decay and
/// `s` the box-smoothed nuclei, or zero nuclei when masked.
fn probe_mse(samples: &[SamplePair], masked: bool) -> f64 {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for s in samples {
        let size = s.vessel.shape()[1];
        let sm = box_smooth(s.nuclei.data(), size, size);
        let mask: Vec<bool> = s.vessel.data().iter().map(|&v| v >= 0.5).collect();
        let dist = distance_transform(&mask, size, size);
        for k in 0..size * size {
            let v = s.vessel.data()[k] as f64;
            let g = (-dist[k] / TARGET_TAU).exp();
            let n = if masked { 0.0 } else { sm[k] };
            x.push(vec![1.0, v, g, n, g * n]);
            y.push(s.target.data()[k] as f64);
        }
    }
    common::least_squares_mse(&x, &y)
}

#[test]
fn nuclei_inform_only_consistent_targets() {
    let gen = |c: bool| -> Vec<SamplePair> { (0..40u64).map(|s| SamplePair::generate(1000 + s, 32, c).unwrap()).collect() };
    let (clean, corrupt) = (gen(true), gen(false));
    let gain_clean = probe_mse(&clean, true) - probe_mse(&clean, false);
    let gain_corrupt = probe_mse(&corrupt, true) - probe_mse(&corrupt, false);
    assert!(gain_clean > 0.0);
    assert!(gain_corrupt < 0.1 * gain_clean, "clean gain {gain_clean}, corrupt gain {gain_corrupt}");
}

#[test]
fn dataset_roundtrips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec { count: 6, corrupt_fraction: 0.5, seed: 11, image_size: 16, ..Default::default() };
    let ds = make_dataset(&spec).unwrap();
    let entries = write_dataset(dir.path(), &ds, true).unwrap();
    assert_eq!(entries.len(), 6);
    assert!(dir.path().join("00000_target.png").exists());
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
}
