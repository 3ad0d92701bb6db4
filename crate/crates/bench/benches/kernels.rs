use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use tdmi_bench::{bench_config, bench_data, random};
use tdmi_core::nn::{Graph, Init, ParamStore};
use tdmi_core::rdm::mi::InfoNce;
use tdmi_core::synth::generate_clip;
use tdmi_core::synth::heatmap::{decode, encode};
use tdmi_core::tde::deform_conv;
use tdmi_core::train::{Trainer, Variant};
use tdmi_core::Tape;

fn conv(c: &mut Criterion) {
    let x = random(&[16, 16, 16, 16], 1);
    let w = random(&[32, 16, 3, 3], 2);
    c.bench_function("conv2d_fwd_bwd_16x16", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone().with_requires_grad(true)).unwrap();
            let wv = t.leaf(w.clone().with_requires_grad(true)).unwrap();
            let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
            let s = t.sum(y).unwrap();
            t.backward(s).unwrap();
            black_box(t.grad(wv).map(|g| g[0]))
        })
    });
}

fn deform(c: &mut Criterion) {
    let x = random(&[8, 16, 8, 8], 3);
    let off = random(&[8, 18, 8, 8], 4);
    let mask = random(&[8, 9, 8, 8], 5);
    let w = random(&[16, 16, 3, 3], 6);
    let bias = random(&[16], 7);
    c.bench_function("deform_conv_fwd_bwd_8x8", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let mut g = Graph::new(&mut t);
            let xv = g.leaf(x.clone().with_requires_grad(true)).unwrap();
            let ov = g.leaf(off.clone().with_requires_grad(true)).unwrap();
            let mv = g.constant(mask.clone()).unwrap();
            let wv = g.leaf(w.clone().with_requires_grad(true)).unwrap();
            let bv = g.constant(bias.clone()).unwrap();
            let y = deform_conv(&mut g, xv, ov, Some(mv), wv, bv).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
            black_box(g.grad(ov).map(|v| v[0]))
        })
    });
}

fn infonce(c: &mut Criterion) {
    let mut store = ParamStore::<f32>::new();
    let critic = InfoNce::new(&mut Init::new(&mut store, 1), "bench", 1, 1, 32, 8).unwrap();
    let x = random(&[1024, 1], 8);
    let y = random(&[1024, 1], 9);
    c.bench_function("infonce_objective_b1024", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let mut g = Graph::new(&mut t).trainable(&store);
            let (xv, yv) = (g.constant(x.clone()).unwrap(), g.constant(y.clone()).unwrap());
            let o = critic.objective(&mut g, xv, yv).unwrap();
            g.backward(o).unwrap();
            black_box(g.value(o).item())
        })
    });
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for v in [Variant::BackboneOnly, Variant::TdeOnly, Variant::Tdmi] {
        let cfg = bench_config(v);
        let data = bench_data(&cfg);
        group.bench_function(v.name(), |b| {
            b.iter_batched_ref(
                || Trainer::new(&cfg).unwrap(),
                |t| black_box(t.step(&data.train).unwrap().heatmap),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn synth(c: &mut Criterion) {
    let cfg = bench_config(Variant::Tdmi).data;
    c.bench_function("generate_clip_32px", |b| b.iter(|| black_box(generate_clip(black_box(11), &cfg).unwrap())));
    let joints: Vec<[f64; 2]> = (0..5).map(|k| [1.5 * k as f64 + 0.3, 7.0 - k as f64]).collect();
    let vis = vec![true; 5];
    c.bench_function("heatmap_encode_decode_16", |b| {
        b.iter(|| {
            let maps = encode(&joints, &vis, 16, 16, 2.0).unwrap();
            black_box(decode(&maps, 5, 16, 16))
        })
    });
}

criterion_group!(benches, conv, deform, infonce, train_step, synth);
criterion_main!(benches);
