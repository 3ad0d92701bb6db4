use serde::{Deserialize, Serialize};

/// Radii, as fractions of the larger image side.
pub const PCK_RADII: [f64; 2] = [0.05, 0.1];

pub const METRIC_NOTE: &str =
    "PCK@r on single-person synthetic clips stands in for multi-person keypoint mAP";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckStats {
    pub radius: f64,
    /// `None` for joints never visible in the evaluated set.
    pub per_joint: Vec<Option<f64>>,
    /// Average of the defined per-joint values (0 if none).
    pub mean: f64,
    pub hits: Vec<usize>,
    pub counts: Vec<usize>,
}

/// Fraction of visible joints predicted within `radius * max(h, w)` pixels.
pub fn pck(
    pred: &[Vec<[f64; 2]>],
    truth: &[Vec<[f64; 2]>],
    visible: &[Vec<bool>],
    radius: f64,
    h: usize,
    w: usize,
) -> PckStats {
    let joints = truth.first().map_or(0, Vec::len);
    let thr = radius * h.max(w) as f64;
    let mut hits = vec![0; joints];
    let mut counts = vec![0; joints];
    for ((p, t), v) in pred.iter().zip(truth).zip(visible) {
        for k in 0..joints {
            if !v[k] {
                continue;
            }
            counts[k] += 1;
            let d = ((p[k][0] - t[k][0]).powi(2) + (p[k][1] - t[k][1]).powi(2)).sqrt();
            if d <= thr {
                hits[k] += 1;
            }
        }
    }
    let per_joint: Vec<Option<f64>> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
        .collect();
    let defined: Vec<f64> = per_joint.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    PckStats {
        radius,
        per_joint,
        mean,
        hits,
        counts,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub heatmap: f64,
    pub mi: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub seed: u64,
    pub iteration: usize,
    pub pck: Vec<PckStats>,
    pub loss_curve: Vec<LossPoint>,
    /// Omitted in deterministic mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
    pub note: String,
}

impl MetricsReport {
    pub fn pck_mean(&self, radius: f64) -> Option<f64> {
        self.pck.iter().find(|p| p.radius == radius).map(|p| p.mean)
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Train {
        variant: String,
        seed: u64,
        iteration: usize,
        lr: f64,
        heatmap_loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        mi_loss: Option<f64>,
        total_loss: f64,
    },
    Eval {
        variant: String,
        seed: u64,
        iteration: usize,
        pck: Vec<PckStats>,
        note: String,
    },
}
