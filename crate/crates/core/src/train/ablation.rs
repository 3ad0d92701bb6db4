//! Trains a set of variants on shared per-seed data and compares them.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{deterministic_mode, metrics, train_on, Dataset, MetricsReport, Record, TrainConfig, Variant};

pub const MIN_ORDERING_SEEDS: usize = 3;
pub const INSUFFICIENT_SEEDS: &str = "insufficient seeds for ordering test";

/// Variants trained when none are named: the full model plus every
/// component, design and factorization ablation.
pub const DEFAULT_VARIANTS: [Variant; 8] = [
    Variant::Tdmi,
    Variant::TdeOnly,
    Variant::BackboneOnly,
    Variant::NoMiObjective,
    Variant::SimpleFusion,
    Variant::NoSpatialModulation,
    Variant::SingleStage,
    Variant::ChannelSplit,
];

/// Expected orderings as (better, worse, axis).
pub const ORDERINGS: [(Variant, Variant, &str); 7] = [
    (Variant::Tdmi, Variant::TdeOnly, "motion disentanglement"),
    (Variant::TdeOnly, Variant::BackboneOnly, "temporal difference encoder"),
    (Variant::Tdmi, Variant::BackboneOnly, "full model vs baseline"),
    (Variant::Tdmi, Variant::SimpleFusion, "progressive vs concat fusion"),
    (Variant::Tdmi, Variant::NoSpatialModulation, "spatial modulation"),
    (Variant::Tdmi, Variant::SingleStage, "multi-stage differences"),
    (Variant::Tdmi, Variant::NoMiObjective, "MI objective"),
];

const FACTORIZATION_ORDERING: (Variant, Variant, &str) =
    (Variant::Tdmi, Variant::ChannelSplit, "attention vs channel split");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub pck05: f64,
    pub pck10: f64,
    /// PCK@0.1 per seed, in seed order.
    pub per_seed: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingCheck {
    pub better: Variant,
    pub worse: Variant,
    pub axis: String,
    /// `better >= worse` on PCK@0.1, per seed.
    pub per_seed: Vec<bool>,
    pub holds_on_mean: bool,
    /// `None` when there are too few seeds to judge.
    pub verdict: Option<bool>,
}

impl OrderingCheck {
    pub fn seeds_holding(&self) -> usize {
        self.per_seed.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub summaries: Vec<VariantSummary>,
    pub checks: Vec<OrderingCheck>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub metric: String,
    pub runs: Vec<MetricsReport>,
}

impl AblationReport {
    pub fn summary(&self, v: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == v)
    }

    pub fn check(&self, better: Variant, worse: Variant) -> Option<&OrderingCheck> {
        self.checks.iter().find(|c| c.better == better && c.worse == worse)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds: {}", seeds.join(", "));
        let _ = writeln!(s, "metric: {}", self.metric);
        let _ = writeln!(s);
        let _ = writeln!(s, "| variant | PCK@0.05 | PCK@0.1 |");
        let _ = writeln!(s, "|---|---|---|");
        for v in &self.summaries {
            let _ = writeln!(s, "| {} | {:.4} | {:.4} |", v.variant, v.pck05, v.pck10);
        }
        let _ = writeln!(s);
        if let Some(n) = &self.note {
            let _ = writeln!(s, "{n}");
        }
        for c in &self.checks {
            let verdict = match c.verdict {
                Some(true) => "holds",
                Some(false) => "violated",
                None => "not judged",
            };
            let _ = writeln!(
                s,
                "{} >= {} ({}): {}/{} seeds, mean {}, {verdict}",
                c.better,
                c.worse,
                c.axis,
                c.seeds_holding(),
                c.per_seed.len(),
                if c.holds_on_mean { "holds" } else { "violated" },
            );
        }
        s
    }
}

/// Trains every `variants` entry on every seed. All variants of one seed
/// share its train and eval clips.
pub fn run_ablation_suite(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    sink: &(dyn Fn(&Record) + Sync),
) -> Result<AblationReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Config("ablation needs at least one seed and one variant".into()));
    }
    let jobs: Vec<(u64, Variant)> = seeds
        .iter()
        .flat_map(|&s| variants.iter().map(move |&v| (s, v)))
        .collect();
    let data: Vec<Dataset> = seeds
        .iter()
        .map(|&s| Dataset::generate(&TrainConfig { seed: s, ..base.clone() }))
        .collect::<Result<_>>()?;
    let run = |&(seed, variant): &(u64, Variant)| -> Result<MetricsReport> {
        let cfg = TrainConfig {
            seed,
            variant,
            ..base.clone()
        };
        let d = &data[seeds.iter().position(|&s| s == seed).unwrap_or(0)];
        let mut forward = |r: &Record| sink(r);
        train_on(&cfg, d, &mut forward).map(|(_, r)| r)
    };
    let runs: Vec<MetricsReport> = if deterministic_mode() {
        jobs.iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    };
    Ok(compare(seeds, variants, runs))
}

/// Builds summaries and ordering checks from finished runs.
pub fn compare(seeds: &[u64], variants: &[Variant], runs: Vec<MetricsReport>) -> AblationReport {
    let pck = |v: Variant, seed: u64, r: f64| -> f64 {
        runs.iter()
            .find(|m| m.variant == v.name() && m.seed == seed)
            .and_then(|m| m.pck_mean(r))
            .unwrap_or(0.0)
    };
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    let summaries: Vec<VariantSummary> = variants
        .iter()
        .map(|&v| {
            let p05: Vec<f64> = seeds.iter().map(|&s| pck(v, s, 0.05)).collect();
            let p10: Vec<f64> = seeds.iter().map(|&s| pck(v, s, 0.1)).collect();
            VariantSummary {
                variant: v,
                pck05: mean(&p05),
                pck10: mean(&p10),
                per_seed: p10,
            }
        })
        .collect();
    let enough = seeds.len() >= MIN_ORDERING_SEEDS;
    let checks = ORDERINGS
        .iter()
        .chain(std::iter::once(&FACTORIZATION_ORDERING))
        .filter(|(b, w, _)| variants.contains(b) && variants.contains(w))
        .map(|&(better, worse, axis)| {
            let b = summaries.iter().find(|s| s.variant == better).expect("listed");
            let w = summaries.iter().find(|s| s.variant == worse).expect("listed");
            let per_seed: Vec<bool> = b.per_seed.iter().zip(&w.per_seed).map(|(x, y)| x >= y).collect();
            let holding = per_seed.iter().filter(|&&h| h).count();
            let holds_on_mean = b.pck10 >= w.pck10;
            // A majority of seeds, allowing one dissenting seed out of five.
            let verdict = enough.then(|| holding + 1 >= per_seed.len() && holds_on_mean);
            OrderingCheck {
                better,
                worse,
                axis: axis.into(),
                per_seed,
                holds_on_mean,
                verdict,
            }
        })
        .collect();
    AblationReport {
        seeds: seeds.to_vec(),
        summaries,
        checks,
        note: (!enough).then(|| INSUFFICIENT_SEEDS.to_string()),
        metric: metrics::METRIC_NOTE.into(),
        runs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::metrics::PckStats;

    fn report(v: Variant, seed: u64, p: f64) -> MetricsReport {
        MetricsReport {
            variant: v.name().into(),
            seed,
            iteration: 1,
            pck: vec![0.05, 0.1]
                .into_iter()
                .map(|r| PckStats {
                    radius: r,
                    per_joint: vec![Some(p)],
                    mean: p,
                    hits: vec![],
                    counts: vec![],
                })
                .collect(),
            loss_curve: vec![],
            wall_clock_s: None,
            note: String::new(),
        }
    }

    #[test]
    fn single_seed_is_flagged() {
        let vs = [Variant::Tdmi, Variant::BackboneOnly];
        let r = compare(&[1], &vs, vec![report(vs[0], 1, 0.6), report(vs[1], 1, 0.4)]);
        assert_eq!(r.note.as_deref(), Some(INSUFFICIENT_SEEDS));
        assert_eq!(r.checks.len(), 1);
        assert_eq!(r.checks[0].verdict, None);
        assert!(r.render().contains("PCK@0.1"));
    }

    #[test]
    fn ordering_tolerates_one_dissenting_seed() {
        let vs = [Variant::Tdmi, Variant::BackboneOnly];
        let seeds = [1, 2, 3, 4, 5];
        let mut runs = vec![];
        for &s in &seeds {
            runs.push(report(vs[0], s, if s == 3 { 0.1 } else { 0.6 }));
            runs.push(report(vs[1], s, 0.4));
        }
        let r = compare(&seeds, &vs, runs);
        let c = r.check(Variant::Tdmi, Variant::BackboneOnly).unwrap();
        assert_eq!(c.seeds_holding(), 4);
        assert_eq!(c.verdict, Some(true));
    }
}
