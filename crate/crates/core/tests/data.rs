use proptest::prelude::*;
use tdmi_core::synth::crop::{BoxCrop, ENLARGEMENT};
use tdmi_core::synth::heatmap::{decode_map, encode};
use tdmi_core::synth::io::{read_dataset, write_dataset};
use tdmi_core::synth::{generate_clip, SynthConfig};
use tdmi_core::train::metrics::pck;
use tdmi_core::train::optim::learning_rate;

fn small() -> SynthConfig {
    SynthConfig {
        image_size: 32,
        ..SynthConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn heatmap_round_trip_within_half_pixel(x in 0.0f64..15.0, y in 0.0f64..15.0, sigma in 1.0f64..3.0) {
        let map = encode(&[[x, y]], &[true], 16, 16, sigma).unwrap();
        let p = decode_map(&map, 16, 16);
        prop_assert!((p.x - x).abs() <= 0.5 && (p.y - y).abs() <= 0.5, "({}, {}) -> ({}, {})", x, y, p.x, p.y);
    }

    #[test]
    fn crop_remap_round_trip(
        cx in 0.0f64..200.0, cy in 0.0f64..200.0, side in 4.0f64..120.0,
        u in 0.0f64..1.0, v in 0.0f64..1.0, out in prop::sample::select(vec![32usize, 64]),
    ) {
        let b = BoxCrop::centered(cx, cy, side).enlarged(ENLARGEMENT);
        let p = [b.x + u * b.w, b.y + v * b.h];
        let q = b.to_image(b.to_crop(p, out, out), out, out);
        prop_assert!((q[0] - p[0]).abs() <= 0.5 && (q[1] - p[1]).abs() <= 0.5);
    }

    #[test]
    fn enlargement_is_exactly_a_quarter(cx in -50.0f64..50.0, cy in -50.0f64..50.0, side in 1.0f64..100.0) {
        let b = BoxCrop::centered(cx, cy, side);
        let e = b.enlarged(ENLARGEMENT);
        prop_assert_eq!(ENLARGEMENT, 1.25);
        prop_assert!((e.w - 1.25 * b.w).abs() <= 1e-12 * b.w);
        prop_assert!((e.x + e.w / 2.0 - (b.x + b.w / 2.0)).abs() <= 1e-9);
    }

    #[test]
    fn pck_matches_brute_force_and_grows_with_radius(
        pts in prop::collection::vec((0.0f64..32.0, 0.0f64..32.0, 0.0f64..32.0, 0.0f64..32.0, any::<bool>()), 3..30),
    ) {
        let pred: Vec<Vec<[f64; 2]>> = pts.iter().map(|p| vec![[p.0, p.1]]).collect();
        let truth: Vec<Vec<[f64; 2]>> = pts.iter().map(|p| vec![[p.2, p.3]]).collect();
        let vis: Vec<Vec<bool>> = pts.iter().map(|p| vec![p.4]).collect();
        let s05 = pck(&pred, &truth, &vis, 0.05, 32, 32);
        let s10 = pck(&pred, &truth, &vis, 0.1, 32, 32);
        let mut hits = 0;
        let mut count = 0;
        for p in &pts {
            if p.4 {
                count += 1;
                if ((p.0 - p.2).powi(2) + (p.1 - p.3).powi(2)).sqrt() <= 0.1 * 32.0 {
                    hits += 1;
                }
            }
        }
        prop_assert_eq!(s10.hits[0], hits);
        prop_assert_eq!(s10.counts[0], count);
        prop_assert!(s10.mean >= s05.mean);
        prop_assert!((0.0..=1.0).contains(&s10.mean));
    }

    #[test]
    fn generator_is_pure_in_seed(seed in any::<u64>()) {
        let a = generate_clip(seed, &small()).unwrap();
        let b = generate_clip(seed, &small()).unwrap();
        prop_assert_eq!(a.digest(), b.digest());
    }
}

#[test]
fn schedule_hits_declared_decays() {
    let total = 2000;
    assert_eq!(learning_rate(1e-3, 0, total), 1e-3);
    assert_eq!(learning_rate(1e-3, 599, total), 1e-3);
    assert!((learning_rate(1e-3, 600, total) - 1e-4).abs() < 1e-18);
    assert!((learning_rate(1e-3, 1200, total) - 1e-5).abs() < 1e-18);
    assert!((learning_rate(1e-3, 1800, total) - 1e-6).abs() < 1e-18);
    assert!((learning_rate(1e-3, 1999, total) - 1e-6).abs() < 1e-18);
}

#[test]
fn static_clip_keeps_joints_in_place() {
    let cfg = SynthConfig {
        v_max: 0.0,
        ..small()
    };
    let c = generate_clip(9, &cfg).unwrap();
    for t in &c.joints {
        assert_eq!(t, &c.joints[0]);
    }
}

#[test]
fn dataset_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), 5, 3, &small()).unwrap();
    let again = write_dataset(&dir.path().join("again"), 5, 3, &small()).unwrap();
    assert_eq!(manifest, again);
    let (cfg, clips) = read_dataset(dir.path()).unwrap();
    assert_eq!(cfg, small());
    assert_eq!(clips.len(), 3);
    for (i, c) in clips.iter().enumerate() {
        let fresh = generate_clip(5 + i as u64, &small()).unwrap();
        assert_eq!(c.visible, fresh.visible);
        assert_eq!(c.frames.len(), fresh.frames.len());
    }
}

#[test]
fn empty_dataset_is_allowed() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), 0, 0, &small()).unwrap();
    let (_, clips) = read_dataset(dir.path()).unwrap();
    assert!(clips.is_empty());
}
