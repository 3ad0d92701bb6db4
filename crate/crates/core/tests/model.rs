use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tdmi_core::backbone::{stage_shapes, Backbone, BackboneConfig, StageFeatures, STAGES};
use tdmi_core::nn::{Graph, Init, ParamStore};
use tdmi_core::rdm::{Factorization, Factorizer};
use tdmi_core::synth::SyntheticClip;
use tdmi_core::tde::compute_differences;
use tdmi_core::train::model::{training_loss, Batch, Model};
use tdmi_core::train::{checkpoint, Dataset, Trainer};
use tdmi_core::verify::tiny_config;
use tdmi_core::{Tape, Tensor, Variant};

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn backbone(seed: u64) -> (ParamStore<f64>, Backbone) {
    let mut store = ParamStore::new();
    let cfg = BackboneConfig {
        in_channels: 1,
        channels: [2, 3, 4, 5],
    };
    let b = Backbone::new(&mut Init::new(&mut store, seed), &cfg).unwrap();
    (store, b)
}

/// Features of `frames` random 32x32 images, or of one image repeated.
fn features(store: &ParamStore<f64>, b: &Backbone, frames: &[Tensor<f64>]) -> Vec<Vec<Tensor<f64>>> {
    let data: Vec<f64> = frames.iter().flat_map(|f| f.data().to_vec()).collect();
    let x = Tensor::new(vec![frames.len(), 1, 32, 32], data).unwrap();
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape).frozen(store);
    let xv = g.constant(x).unwrap();
    let f = b.extract(&mut g, xv, frames.len()).unwrap();
    f.iter()
        .map(|s| s.stages.iter().map(|&v| g.value(v).clone()).collect())
        .collect()
}

fn differences(store: &ParamStore<f64>, b: &Backbone, frames: &[Tensor<f64>]) -> Vec<Vec<Tensor<f64>>> {
    let data: Vec<f64> = frames.iter().flat_map(|f| f.data().to_vec()).collect();
    let x = Tensor::new(vec![frames.len(), 1, 32, 32], data).unwrap();
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape).frozen(store);
    let xv = g.constant(x).unwrap();
    let f: Vec<StageFeatures> = b.extract(&mut g, xv, frames.len()).unwrap();
    let d = compute_differences(&mut g, &f).unwrap();
    d.iter()
        .map(|stage| stage.iter().map(|&v| g.value(v).clone()).collect())
        .collect()
}

fn random_frames(seed: u64, count: usize) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Tensor::uniform(vec![1, 1, 32, 32], 1.0, &mut rng))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stage_shapes_are_pure_arithmetic(h in 1usize..12, w in 1usize..12, c in prop::array::uniform4(1usize..40)) {
        let cfg = BackboneConfig { in_channels: 1, channels: c };
        let s = stage_shapes(&cfg, 32 * h, 32 * w).unwrap();
        for j in 0..STAGES {
            prop_assert_eq!(s[j], (c[j], 32 * h >> (j + 2), 32 * w >> (j + 2)));
        }
        prop_assert!(stage_shapes(&cfg, 32 * h + 16, 32 * w).is_err());
    }

    #[test]
    fn static_clip_has_zero_differences(seed in any::<u64>()) {
        let (store, b) = backbone(seed);
        let one = random_frames(seed, 1).remove(0);
        let d = differences(&store, &b, &vec![one; 5]);
        for stage in d {
            for t in stage {
                prop_assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn reversing_frames_negates_differences(seed in any::<u64>()) {
        let (store, b) = backbone(seed);
        let frames = random_frames(seed ^ 1, 5);
        let mut rev = frames.clone();
        rev.reverse();
        let fwd = differences(&store, &b, &frames);
        let bwd = differences(&store, &b, &rev);
        for (fs, bs) in fwd.iter().zip(&bwd) {
            let k = fs.len();
            for i in 0..k {
                let expected: Vec<u64> = fs[k - 1 - i].data().iter().map(|v| (-v).to_bits()).collect();
                prop_assert_eq!(bits(&bs[i]), expected);
            }
        }
    }

    #[test]
    fn attention_masks_lie_strictly_inside_unit_interval(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut store = ParamStore::<f64>::new();
        let f = Factorizer::new(&mut Init::new(&mut store, seed), Factorization::Attention, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Tensor::<f64>::uniform(vec![3, 6, 4, 4], scale, &mut rng);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape).frozen(&store);
        let mv = g.constant(m).unwrap();
        let out = f.forward(&mut g, mv).unwrap();
        for mask in [out.mask_u.unwrap(), out.mask_n.unwrap()] {
            prop_assert!(g.data(mask).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn frame_permutation_permutes_features() {
    let (store, b) = backbone(4);
    let frames = random_frames(8, 3);
    let perm = [2usize, 0, 1];
    let shuffled: Vec<Tensor<f64>> = perm.iter().map(|&i| frames[i].clone()).collect();
    let a = features(&store, &b, &frames);
    let p = features(&store, &b, &shuffled);
    for (k, &i) in perm.iter().enumerate() {
        for j in 0..STAGES {
            assert_eq!(bits(&p[k][j]), bits(&a[i][j]), "frame {k} stage {j}");
        }
    }
}

fn tiny_batch(variant: Variant) -> (tdmi_core::TrainConfig, Vec<SyntheticClip>) {
    let cfg = tiny_config(variant);
    let data = Dataset::generate(&cfg).unwrap();
    (cfg, data.train)
}

#[test]
fn noisy_motion_never_reaches_the_heatmaps() {
    let (cfg, clips) = tiny_batch(Variant::Tdmi);
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, &cfg).unwrap();
    let refs: Vec<&SyntheticClip> = clips.iter().take(4).collect();
    let batch = Batch::<f64>::from_clips(&refs, cfg.data.sigma).unwrap();
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape).frozen(&store);
    let x = g.constant(batch.frames).unwrap();
    let out = model.forward(&mut g, x).unwrap();
    let full = g.value(out.heatmaps()).clone();

    // Rebuilding the head from the useful part alone reproduces the output.
    let fm = out.factorized.as_ref().unwrap();
    let visual = model.head.visual_feature(&mut g, &out.features, model.frames / 2).unwrap();
    let again = model.head.forward(&mut g, Some(fm.useful), visual).unwrap();
    assert_eq!(bits(&full), bits(g.value(again.heatmaps)));
}

#[test]
fn mi_total_composes_the_four_terms() {
    let (cfg, clips) = tiny_batch(Variant::Tdmi);
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(&mut store, &cfg).unwrap();
    let mut cstore = ParamStore::<f64>::new();
    let critics = model.critics(&mut cstore, &cfg).unwrap().unwrap();
    let refs: Vec<&SyntheticClip> = clips.iter().collect();
    let batch = Batch::<f64>::from_clips(&refs, cfg.data.sigma).unwrap();
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape).frozen(&store).frozen(&cstore);
    let parts = training_loss(&mut g, &model, Some(&critics), &batch, &cfg, 1.0).unwrap();
    let t = parts.mi.unwrap();
    let v = |x| g.value(x).item();
    let composed = v(t.t1) - v(t.t2) + v(t.t3) + v(t.t4);
    assert!((v(t.total) - composed).abs() < 1e-12, "{} vs {composed}", v(t.total));
    let total = v(parts.total);
    assert!((total - (v(parts.heatmap) + v(t.total))).abs() < 1e-12);
}

#[test]
fn zero_alpha_matches_the_no_objective_ablation() {
    std::env::set_var("TDMI_DETERMINISTIC", "1");
    let mut a = tiny_config(Variant::Tdmi);
    a.alpha = 0.0;
    a.data.image_size = 32;
    let b = tdmi_core::TrainConfig {
        variant: Variant::NoMiObjective,
        ..a.clone()
    };
    let data = Dataset::generate(&a).unwrap();
    let mut ta = Trainer::new(&a).unwrap();
    let mut tb = Trainer::new(&b).unwrap();
    for _ in 0..4 {
        let sa = ta.step(&data.train).unwrap();
        let sb = tb.step(&data.train).unwrap();
        assert_eq!(sa.heatmap.to_bits(), sb.heatmap.to_bits());
    }
    let names: Vec<&str> = tb.params.names().collect();
    assert_eq!(ta.params.names().collect::<Vec<_>>(), names);
    for name in names {
        let (x, y) = (ta.params.by_name(name).unwrap(), tb.params.by_name(name).unwrap());
        let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb, "{name}");
    }
}

#[test]
fn checkpoint_names_follow_the_variant() {
    let names = |v: Variant| -> Vec<String> {
        let cfg = tiny_config(v);
        let t = Trainer::new(&cfg).unwrap();
        checkpoint::to_archive(&t)
            .unwrap()
            .manifest()
            .lines()
            .map(str::to_string)
            .collect()
    };
    let full = names(Variant::Tdmi);
    assert!(full.iter().any(|l| l.contains("tde.")));
    assert!(full.iter().any(|l| l.contains("rdm.")));
    let base = names(Variant::BackboneOnly);
    assert!(!base.iter().any(|l| l.contains("tde.") || l.contains("rdm.")));
    assert!(base.iter().any(|l| l.contains("backbone.")));
}

#[test]
fn checkpoint_round_trip_reproduces_forward_outputs() {
    let mut cfg = tiny_config(Variant::Tdmi);
    cfg.iterations = 3;
    let data = Dataset::generate(&cfg).unwrap();
    let mut t = Trainer::new(&cfg).unwrap();
    for _ in 0..3 {
        t.step(&data.train).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tdmi");
    checkpoint::save(&t, &path).unwrap();
    let back = checkpoint::load(&path, &cfg).unwrap();
    let a = t.heatmaps(&data.train[..4]).unwrap();
    let b = back.heatmaps(&data.train[..4]).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(back.iteration, 3);

    let mut other = cfg.clone();
    other.seed += 1;
    assert!(checkpoint::load(&path, &other).is_err());
}
