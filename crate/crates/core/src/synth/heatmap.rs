//! Gaussian heatmap targets and argmax decoding.

use crate::error::{Error, Result};

/// Image pixel-index coordinate to heatmap coordinate for a `stride`x
/// downsampled map.
pub fn to_heatmap(v: f64, stride: f64) -> f64 {
    (v + 0.5) / stride - 0.5
}

pub fn from_heatmap(v: f64, stride: f64) -> f64 {
    (v + 0.5) * stride - 0.5
}

/// One `h`x`w` map per joint, `exp(-d²/2σ²)` around each visible joint
/// (given in heatmap coordinates); invisible joints get zero maps.
pub fn encode(joints: &[[f64; 2]], visible: &[bool], h: usize, w: usize, sigma: f64) -> Result<Vec<f32>> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("heatmap sigma must be positive, got {sigma}")));
    }
    if joints.len() != visible.len() {
        return Err(Error::dim(format!("{} joints with {} visibility flags", joints.len(), visible.len())));
    }
    let mut out = vec![0.0f32; joints.len() * h * w];
    let denom = 2.0 * sigma * sigma;
    for (k, (p, &vis)) in joints.iter().zip(visible).enumerate() {
        if !vis {
            continue;
        }
        let map = &mut out[k * h * w..(k + 1) * h * w];
        for i in 0..h {
            let dy = i as f64 - p[1];
            for j in 0..w {
                let dx = j as f64 - p[0];
                map[i * w + j] = (-(dx * dx + dy * dy) / denom).exp() as f32;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Argmax of one map (first in row-major order on ties), nudged a quarter
/// pixel toward the larger neighbour on each axis.
pub fn decode_map(map: &[f32], h: usize, w: usize) -> Peak {
    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    let (py, px) = (best / w, best % w);
    let before = |step: usize, at: usize| (at > 0).then(|| map[best - step]);
    let after = |step: usize, at: usize, len: usize| (at + 1 < len).then(|| map[best + step]);
    Peak {
        x: px as f64 + 0.25 * shift(map[best], before(1, px), after(1, px, w)),
        y: py as f64 + 0.25 * shift(map[best], before(w, py), after(w, py, h)),
        confidence: map[best] as f64,
    }
}

/// Direction of the higher neighbour. A border peak leans toward its only
/// neighbour unless the two are level.
fn shift(peak: f32, before: Option<f32>, after: Option<f32>) -> f64 {
    match (before, after) {
        (Some(b), Some(a)) if a > b => 1.0,
        (Some(b), Some(a)) if a < b => -1.0,
        (None, Some(a)) if a < peak => 1.0,
        (Some(b), None) if b < peak => -1.0,
        _ => 0.0,
    }
}

/// Decodes `J` stacked maps.
pub fn decode(maps: &[f32], joints: usize, h: usize, w: usize) -> Vec<Peak> {
    maps.chunks(h * w).take(joints).map(|m| decode_map(m, h, w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_point_peak_is_one() {
        let m = encode(&[[3.0, 2.0]], &[true], 8, 8, 2.0).unwrap();
        assert_eq!(m[2 * 8 + 3], 1.0);
        let at_sigma = m[2 * 8 + 5] as f64;
        assert!((at_sigma - (-0.5f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn invisible_joint_is_zero() {
        let m = encode(&[[3.0, 2.0]], &[false], 8, 8, 2.0).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_map_decodes_to_origin() {
        let p = decode_map(&[0.5; 16], 4, 4);
        assert_eq!((p.x, p.y), (0.0, 0.0));
    }

    #[test]
    fn border_peak_leans_inward() {
        let m = encode(&[[0.3, 6.7]], &[true], 8, 8, 2.0).unwrap();
        let p = decode_map(&m, 8, 8);
        assert_eq!((p.x, p.y), (0.25, 6.75));
    }

    #[test]
    fn larger_peak_wins() {
        let mut m = vec![0.0f32; 25];
        m[6] = 0.7;
        m[18] = 0.9;
        let p = decode_map(&m, 5, 5);
        assert_eq!((p.x, p.y, p.confidence), (3.0, 3.0, 0.9f32 as f64));
    }
}
