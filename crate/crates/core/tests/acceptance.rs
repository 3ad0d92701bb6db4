//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-4 and 7-9 are exact or tolerance checks and fail the target
//! when red. The trend criteria 5 and 6 always print their verdict and
//! per-seed table; they fail the target only under
//! `TDMI_ACCEPTANCE_STRICT=1`. `TDMI_ACCEPTANCE_ONLY=1,5` runs a subset.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use tdmi_core::train::ablation::compare;
use tdmi_core::train::{checkpoint, train_on, Dataset, MetricsReport, TrainConfig, Trainer, Variant};
use tdmi_core::verify::{self, VerifyOptions};

const TREND_CONFIG: &str = include_str!("../../../configs/trend.toml");
const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TREND_BUDGET_S: f64 = 3600.0;
const GRAD_BUDGET_S: f64 = 120.0;
const MI_BUDGET_S: f64 = 300.0;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn battery(filter: &str) -> (bool, f64, String) {
    let opts = VerifyOptions {
        filter: Some(filter.into()),
        ..VerifyOptions::default()
    };
    let checks = verify::run(&opts, &mut |c| {
        println!("    {} {} ({:.1}s): {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.seconds, c.detail);
    });
    let secs: f64 = checks.iter().map(|c| c.seconds).sum();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let ok = !checks.is_empty() && failed.is_empty();
    let detail = if failed.is_empty() {
        format!("{} checks", checks.len())
    } else {
        format!("failing: {}", failed.join(", "))
    };
    (ok, secs, detail)
}

fn gradients() -> Outcome {
    let (ok, secs, detail) = battery("grad");
    outcome(
        ok && secs < GRAD_BUDGET_S,
        format!("{detail}, {secs:.1}s (budget {GRAD_BUDGET_S}s)"),
    )
}

fn deformable() -> Outcome {
    let (ok, secs, detail) = battery("deform");
    outcome(ok, format!("{detail}, {secs:.1}s"))
}

fn mi_oracle() -> Outcome {
    let (ok, secs, detail) = battery("mi/infonce_gaussian_oracle");
    outcome(ok && secs < MI_BUDGET_S, format!("{detail}, {secs:.1}s (budget {MI_BUDGET_S}s)"))
}

fn temporal_difference() -> Outcome {
    let (ok, secs, detail) = battery("tde");
    outcome(ok, format!("{detail}, {secs:.1}s"))
}

fn geometry() -> Outcome {
    let (ok, secs, detail) = battery("geometry");
    outcome(ok, format!("{detail}, {secs:.1}s"))
}

fn trend_base() -> TrainConfig {
    TrainConfig::from_toml(TREND_CONFIG).expect("trend config parses")
}

/// Trained reports keyed by (seed, variant), filled lazily so criteria 5
/// and 6 share the full-model runs.
struct TrendRuns {
    runs: HashMap<(u64, Variant), MetricsReport>,
    data: HashMap<u64, Dataset>,
}

impl TrendRuns {
    fn get(&mut self, seed: u64, variant: Variant) -> MetricsReport {
        if let Some(r) = self.runs.get(&(seed, variant)) {
            return r.clone();
        }
        let cfg = TrainConfig {
            seed,
            variant,
            ..trend_base()
        };
        let data = self
            .data
            .entry(seed)
            .or_insert_with(|| Dataset::generate(&cfg).expect("trend data"));
        let (_, report) = train_on(&cfg, data, &mut |_| {}).expect("trend run");
        println!(
            "    seed {seed} {variant}: PCK@0.05 {:.3}  PCK@0.1 {:.3}  ({:.0}s)",
            report.pck_mean(0.05).unwrap_or(f64::NAN),
            report.pck_mean(0.1).unwrap_or(f64::NAN),
            report.wall_clock_s.unwrap_or(0.0)
        );
        self.runs.insert((seed, variant), report.clone());
        report
    }
}

fn trend(runs: &mut TrendRuns) -> Outcome {
    let variants = [Variant::Tdmi, Variant::TdeOnly, Variant::BackboneOnly];
    let start = Instant::now();
    let mut reports = Vec::new();
    for &seed in &TREND_SEEDS {
        for v in variants {
            reports.push(runs.get(seed, v));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let report = compare(&TREND_SEEDS, &variants, reports);
    let p = |v: Variant| report.summary(v).map(|s| s.per_seed.clone()).unwrap_or_default();
    let (full, tde, base) = (p(Variant::Tdmi), p(Variant::TdeOnly), p(Variant::BackboneOnly));
    let chain = (0..TREND_SEEDS.len())
        .filter(|&i| full[i] >= tde[i] && tde[i] >= base[i])
        .count();
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let beats = mean(&full) > mean(&base);
    let ok = chain >= 4 && beats && secs < TREND_BUDGET_S;
    outcome(
        ok,
        format!(
            "chain tdmi >= tde_only >= backbone_only holds on {chain}/5 seeds (need 4); mean PCK@0.1 tdmi {:.3}, tde_only {:.3}, backbone_only {:.3}; {secs:.0}s (budget {TREND_BUDGET_S}s)",
            mean(&full),
            mean(&tde),
            mean(&base)
        ),
    )
}

fn factorization(runs: &mut TrendRuns) -> Outcome {
    let variants = [Variant::Tdmi, Variant::ChannelSplit];
    let mut reports = Vec::new();
    for &seed in &TREND_SEEDS {
        for v in variants {
            reports.push(runs.get(seed, v));
        }
    }
    let report = compare(&TREND_SEEDS, &variants, reports);
    let m = |v: Variant| report.summary(v).map_or(f64::NAN, |s| s.pck10);
    let (att, split) = (m(Variant::Tdmi), m(Variant::ChannelSplit));
    outcome(
        att > split,
        format!("mean PCK@0.1 attention {att:.3} vs channel split {split:.3}"),
    )
}

fn learning_sanity() -> Outcome {
    let cfg = TrainConfig {
        iterations: 200,
        train_clips: 64,
        seed: 0,
        variant: Variant::Tdmi,
        ..trend_base()
    };
    let data = Dataset::generate(&cfg).expect("sanity data");
    let mut t = Trainer::new(&cfg).expect("trainer");
    let mut losses = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        losses.push(t.step(&data.train).expect("step").heatmap);
    }
    let initial = losses[0];
    let tail = &losses[losses.len() - 10..];
    let fin = tail.iter().sum::<f64>() / tail.len() as f64;
    outcome(
        fin < 0.5 * initial,
        format!("L_H {initial:.3} -> {fin:.3} (mean of last 10 steps), ratio {:.3}", fin / initial),
    )
}

fn determinism() -> Outcome {
    // Single-threaded process at this point; nothing else reads the env.
    std::env::set_var("TDMI_DETERMINISTIC", "1");
    let cfg = TrainConfig {
        iterations: 30,
        train_clips: 32,
        eval_clips: 8,
        log_every: 5,
        seed: 3,
        variant: Variant::Tdmi,
        ..trend_base()
    };
    let data = Dataset::generate(&cfg).expect("data");
    let (t1, r1) = train_on(&cfg, &data, &mut |_| {}).expect("first run");
    let (_, r2) = train_on(&cfg, &data, &mut |_| {}).expect("second run");
    let same_metrics = serde_json::to_string(&r1).ok() == serde_json::to_string(&r2).ok();

    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("ckpt.tdmi");
    checkpoint::save(&t1, &path).expect("save");
    let t2 = checkpoint::load(&path, &cfg).expect("load");
    let before = t1.heatmaps(&data.eval).expect("forward");
    let after = t2.heatmaps(&data.eval).expect("forward");
    let bits = |t: &tdmi_core::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let same_forward = bits(&before) == bits(&after);
    std::env::remove_var("TDMI_DETERMINISTIC");
    outcome(
        same_metrics && same_forward,
        format!("identical metrics across runs: {same_metrics}; checkpoint forward bit-identical: {same_forward}"),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("TDMI_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("TDMI_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut runs = TrendRuns {
        runs: HashMap::new(),
        data: HashMap::new(),
    };

    let mut hard_failures = 0;
    let mut trend_failures = 0;
    let mut lines = Vec::new();
    for n in 1..=9 {
        if !wanted(n) {
            continue;
        }
        let (title, o) = match n {
            1 => ("gradient correctness", gradients()),
            2 => ("deformable degeneracy", deformable()),
            3 => ("MI oracle", mi_oracle()),
            4 => ("temporal-difference exactness", temporal_difference()),
            5 => ("trend reproduction", trend(&mut runs)),
            6 => ("attention vs channel-split factorization", factorization(&mut runs)),
            7 => ("learning sanity", learning_sanity()),
            8 => ("determinism and persistence", determinism()),
            _ => ("geometry", geometry()),
        };
        let line = format!("{} criterion {n} ({title}): {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        println!("{line}");
        lines.push(line);
        if !o.passed {
            if matches!(n, 5 | 6) {
                trend_failures += 1;
            } else {
                hard_failures += 1;
            }
        }
    }
    println!("\nsummary:");
    for l in &lines {
        println!("{l}");
    }
    if hard_failures > 0 || (strict && trend_failures > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
