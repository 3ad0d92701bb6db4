use tdmi_bench::{bench_config, bench_data, random};
use tdmi_core::train::Variant;

#[test]
fn fixtures_are_valid_and_deterministic() {
    let cfg = bench_config(Variant::Tdmi);
    cfg.validate().unwrap();
    let data = bench_data(&cfg);
    assert_eq!(data.train.len(), cfg.train_clips);
    assert_eq!(data.eval.len(), cfg.eval_clips);
    assert_eq!(random(&[3, 4], 1), random(&[3, 4], 1));
    assert!(random(&[64], 2).data().iter().all(|v| (-1.0..1.0).contains(v)));
}
