//! Synthetic moving-joint clips.
//!
//! A scene twice the network input size holds `J` Gaussian joint blobs laid
//! out on a jittered body template and moving with constant velocity,
//! distractor blobs copied from joint appearance that drift more slowly,
//! an optional static occluder and an optional blurred frame. The key-frame
//! box around the joints is enlarged by 25% and applied to every frame.

pub mod crop;
pub mod heatmap;
pub mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crop::{crop_sequence, BoxCrop, ENLARGEMENT};

use crate::error::{Error, Result};

/// Heatmaps are this many times smaller than the input.
pub const HEATMAP_STRIDE: usize = 4;

/// Single-channel image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    /// 3x3 mean filter with edge replication.
    pub fn box_blur(&self) -> Image {
        let mut out = Image::zeros(self.h, self.w);
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        for i in 0..self.h {
            for j in 0..self.w {
                let mut s = 0.0;
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let y = clamp(i as isize + di, self.h);
                        let x = clamp(j as isize + dj, self.w);
                        s += self.data[y * self.w + x];
                    }
                }
                out.data[i * self.w + j] = s / 9.0;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub joints: usize,
    pub delta: usize,
    /// Network input side; the scene is twice as large.
    pub image_size: usize,
    pub distractors: usize,
    pub occlusion_prob: f64,
    pub blur_prob: f64,
    /// Largest per-frame joint displacement in pixels.
    pub v_max: f64,
    /// Distractor speed relative to `v_max`.
    pub distractor_speed: f64,
    /// Standard deviation of the static background texture.
    pub noise: f64,
    pub sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            joints: 5,
            delta: 2,
            image_size: 64,
            distractors: 3,
            occlusion_prob: 0.5,
            blur_prob: 0.2,
            v_max: 3.0,
            distractor_speed: 0.3,
            noise: 0.03,
            sigma: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.joints == 0 {
            return bad("joints must be at least 1");
        }
        if self.delta == 0 {
            return bad("delta must be at least 1");
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad("image_size must be a positive multiple of 32");
        }
        for (name, p) in [("occlusion_prob", self.occlusion_prob), ("blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.v_max >= 0.0 && self.v_max.is_finite()) {
            return bad("v_max must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.distractor_speed) {
            return bad("distractor_speed must lie in [0, 1]");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("sigma must be positive");
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        2 * self.delta + 1
    }

    pub fn heatmap_size(&self) -> usize {
        self.image_size / HEATMAP_STRIDE
    }

    /// Short stable digest of the configuration.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

/// A cropped clip with key-frame labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    pub seed: u64,
    pub frames: Vec<Image>,
    /// Per frame, per joint `(x, y)` in crop pixel-index coordinates.
    pub joints: Vec<Vec<[f64; 2]>>,
    /// Key-frame visibility per joint.
    pub visible: Vec<bool>,
    pub crop: BoxCrop,
}

impl SyntheticClip {
    pub fn key(&self) -> usize {
        self.frames.len() / 2
    }

    pub fn key_joints(&self) -> &[[f64; 2]] {
        &self.joints[self.key()]
    }

    /// Key-frame targets `[J, H/4, W/4]`.
    pub fn heatmaps(&self, sigma: f64) -> Result<Vec<f32>> {
        let f = &self.frames[self.key()];
        let s = HEATMAP_STRIDE as f64;
        let pts: Vec<[f64; 2]> = self
            .key_joints()
            .iter()
            .map(|p| [heatmap::to_heatmap(p[0], s), heatmap::to_heatmap(p[1], s)])
            .collect();
        heatmap::encode(&pts, &self.visible, f.h / HEATMAP_STRIDE, f.w / HEATMAP_STRIDE, sigma)
    }

    /// Canonical byte form used for digests.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.seed.to_le_bytes());
        for f in &self.frames {
            out.extend_from_slice(&(f.h as u32).to_le_bytes());
            out.extend_from_slice(&(f.w as u32).to_le_bytes());
            f.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for frame in &self.joints {
            for p in frame {
                out.extend_from_slice(&p[0].to_le_bytes());
                out.extend_from_slice(&p[1].to_le_bytes());
            }
        }
        out.extend(self.visible.iter().map(|&v| v as u8));
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct Blob {
    pos: [f64; 2],
    vel: [f64; 2],
    size: f64,
    amp: f64,
}

fn joint_look(k: usize, scale: f64) -> (f64, f64) {
    let size = (1.0 + 0.5 * (k % 3) as f64) * scale;
    let amp = 0.7 + 0.3 * ((k + 1) % 2) as f64;
    (size, amp)
}

fn random_velocity(rng: &mut ChaCha8Rng, min: f64, max: f64) -> [f64; 2] {
    let speed = rng.random_range(min..=1.0) * max;
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    [speed * a.cos(), speed * a.sin()]
}

fn render(blobs: &[Blob], t: f64, background: &[f32], size: usize, out: &mut [f32]) {
    out.copy_from_slice(background);
    for b in blobs {
        let cx = b.pos[0] + t * b.vel[0];
        let cy = b.pos[1] + t * b.vel[1];
        let r = (4.0 * b.size).ceil();
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as isize).clamp(0, size as isize - 1) as usize;
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as isize).clamp(0, size as isize - 1) as usize;
        let denom = 2.0 * b.size * b.size;
        for i in y0..=y1 {
            for j in x0..=x1 {
                let d2 = (j as f64 - cx).powi(2) + (i as f64 - cy).powi(2);
                out[i * size + j] += (b.amp * (-d2 / denom).exp()) as f32;
            }
        }
    }
}

/// Renders and crops one clip. Pure in `(seed, cfg)`.
pub fn generate_clip(seed: u64, cfg: &SynthConfig) -> Result<SyntheticClip> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = cfg.image_size;
    let scene = 2 * img;
    let unit = img as f64 / 32.0;
    let frames = cfg.frames();
    let key = cfg.delta as f64;

    // Body template: joints on a jittered, rotated star around the centre.
    let centre = [
        rng.random_range(0.75..1.25) * img as f64,
        rng.random_range(0.75..1.25) * img as f64,
    ];
    let radius = 0.25 * img as f64 * rng.random_range(0.85..1.15);
    let rot = rng.random_range(0.0..std::f64::consts::TAU);
    let body_v = random_velocity(&mut rng, 0.5, 0.6 * cfg.v_max);
    let mut joints = Vec::with_capacity(cfg.joints);
    for k in 0..cfg.joints {
        let theta = std::f64::consts::TAU * k as f64 / cfg.joints as f64 + rot + rng.random_range(-0.2..0.2);
        let rho = if cfg.joints == 1 {
            0.0
        } else {
            radius * (0.45 + 0.55 * ((k as f64 * 0.618).fract())) * rng.random_range(0.9..1.1)
        };
        let own = random_velocity(&mut rng, 0.0, 0.4 * cfg.v_max);
        let (size, amp) = joint_look(k, unit);
        joints.push(Blob {
            pos: [centre[0] + rho * theta.cos(), centre[1] + rho * theta.sin()],
            vel: [body_v[0] + own[0], body_v[1] + own[1]],
            size,
            amp,
        });
    }
    // Decoys: each copies one joint's look and sits near that joint.
    let mut distractors = Vec::with_capacity(cfg.distractors);
    for _ in 0..cfg.distractors {
        let copy = rng.random_range(0..cfg.joints);
        let (size, amp) = joint_look(copy, unit);
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let dist = rng.random_range(0.12..0.3) * img as f64;
        let at = joints[copy].pos;
        distractors.push(Blob {
            pos: [at[0] + dist * ang.cos(), at[1] + dist * ang.sin()],
            vel: random_velocity(&mut rng, 0.0, cfg.distractor_speed * cfg.v_max),
            size,
            amp,
        });
    }

    // Static background: level, a gentle linear gradient and pixel texture.
    let level = rng.random_range(0.0..0.2);
    let (gx, gy) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let noise = Normal::new(0.0, cfg.noise).expect("validated noise");
    let mut background = vec![0.0f32; scene * scene];
    for i in 0..scene {
        for j in 0..scene {
            let v = level + gx * j as f64 / scene as f64 + gy * i as f64 / scene as f64;
            background[i * scene + j] = (v + noise.sample(&mut rng)) as f32;
        }
    }

    let mut visible = vec![true; cfg.joints];
    let key_pos: Vec<[f64; 2]> = joints.iter().map(|b| b.pos).collect();
    let occluder = if rng.random_bool(cfg.occlusion_prob) {
        let target = rng.random_range(0..cfg.joints);
        let p = key_pos[target];
        let half_w = rng.random_range(1.5..3.0) * joints[target].size + unit;
        let half_h = rng.random_range(1.5..3.0) * joints[target].size + unit;
        let (ox, oy) = (rng.random_range(-0.5..0.5) * half_w, rng.random_range(-0.5..0.5) * half_h);
        let rect = [p[0] + ox - half_w, p[1] + oy - half_h, p[0] + ox + half_w, p[1] + oy + half_h];
        for (v, q) in visible.iter_mut().zip(&key_pos) {
            if q[0] >= rect[0] && q[0] <= rect[2] && q[1] >= rect[1] && q[1] <= rect[3] {
                *v = false;
            }
        }
        Some((rect, rng.random_range(0.3..0.6) as f32))
    } else {
        None
    };
    let blurred = if rng.random_bool(cfg.blur_prob) {
        Some(rng.random_range(0..frames))
    } else {
        None
    };

    let all: Vec<Blob> = joints.into_iter().chain(distractors).collect();
    let mut scenes = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut data = vec![0.0f32; scene * scene];
        render(&all, t as f64 - key, &background, scene, &mut data);
        if let Some((r, shade)) = occluder {
            let y0 = r[1].floor().max(0.0) as usize;
            let y1 = (r[3].ceil().max(0.0) as usize).min(scene - 1);
            let x0 = r[0].floor().max(0.0) as usize;
            let x1 = (r[2].ceil().max(0.0) as usize).min(scene - 1);
            for i in y0..=y1 {
                for j in x0..=x1 {
                    data[i * scene + j] = shade;
                }
            }
        }
        let mut frame = Image { h: scene, w: scene, data };
        if blurred == Some(t) {
            frame = frame.box_blur();
        }
        frame.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        scenes.push(frame);
    }

    let n = cfg.joints as f64;
    let cx = key_pos.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = key_pos.iter().map(|p| p[1]).sum::<f64>() / n;
    let crop = BoxCrop::centered(cx, cy, img as f64 / ENLARGEMENT).enlarged(ENLARGEMENT);
    let frames_out = crop_sequence(&scenes, &crop, img, img)?;
    let joint_tracks = (0..frames)
        .map(|t| {
            let dt = t as f64 - key;
            all[..cfg.joints]
                .iter()
                .map(|b| crop.to_crop([b.pos[0] + dt * b.vel[0], b.pos[1] + dt * b.vel[1]], img, img))
                .collect()
        })
        .collect();
    Ok(SyntheticClip {
        seed,
        frames: frames_out,
        joints: joint_tracks,
        visible,
        crop,
    })
}

/// Clips `seed + i` for `i` in `0..count`.
pub fn generate_set(seed: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<SyntheticClip>> {
    (0..count as u64)
        .map(|i| generate_clip(seed.wrapping_add(i), cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_clip() {
        let cfg = SynthConfig {
            image_size: 32,
            ..SynthConfig::default()
        };
        let a = generate_clip(11, &cfg).unwrap();
        let b = generate_clip(11, &cfg).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), generate_clip(12, &cfg).unwrap().digest());
    }

    #[test]
    fn zero_speed_is_static() {
        let cfg = SynthConfig {
            image_size: 32,
            v_max: 0.0,
            ..SynthConfig::default()
        };
        let c = generate_clip(5, &cfg).unwrap();
        assert!(c.joints.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn forced_occlusion_hides_single_joint() {
        let cfg = SynthConfig {
            joints: 1,
            image_size: 32,
            occlusion_prob: 1.0,
            ..SynthConfig::default()
        };
        assert_eq!(generate_clip(9, &cfg).unwrap().visible, vec![false]);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SynthConfig {
            image_size: 30,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_clip(0, &cfg), Err(Error::Config(_))));
    }
}
