//! Multi-stage temporal difference encoder.
//!
//! Adjacent-frame feature differences are fused within each stage, spatially
//! calibrated by a modulated deformable convolution, aligned to the finest
//! stage and accumulated stage by stage into one motion map.

use serde::{Deserialize, Serialize};

use crate::backbone::{StageFeatures, STAGES};
use crate::error::{Error, Result};
use crate::nn::{lrelu, residual_stack, run_stack, Conv2d, Graph, Init, ParamId, ResidualBlock};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `A_1 = Conv(D̄_1)`, `A_k = Conv(A_{k-1} + D̄_k)`.
    Progressive,
    /// One convolution over the concatenated stages.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdeConfig {
    pub delta: usize,
    pub motion_channels: usize,
    /// 1-based stage indices that contribute, in ascending order.
    pub stages: Vec<usize>,
    pub intra_blocks: [usize; STAGES],
    pub branch_blocks: usize,
    pub modulation: bool,
    pub fusion: Fusion,
}

impl Default for TdeConfig {
    fn default() -> Self {
        TdeConfig {
            delta: 2,
            motion_channels: 32,
            stages: vec![1, 2, 3, 4],
            intra_blocks: [3, 3, 2, 2],
            branch_blocks: 2,
            modulation: true,
            fusion: Fusion::Progressive,
        }
    }
}

impl TdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta == 0 {
            return Err(Error::Config("delta must be at least 1".into()));
        }
        if self.motion_channels == 0 {
            return Err(Error::Config("motion_channels must be positive".into()));
        }
        let ascending = self.stages.windows(2).all(|w| w[0] < w[1]);
        if self.stages.is_empty() || !ascending || self.stages.iter().any(|&s| s == 0 || s > STAGES) {
            return Err(Error::Config(format!(
                "tde stages {:?} must be ascending indices in 1..=4",
                self.stages
            )));
        }
        Ok(())
    }
}

/// `S^j_k = F^j_{k+1} - F^j_k` for every stage, one entry per adjacent
/// frame pair.
pub fn compute_differences<T: Scalar>(g: &mut Graph<T>, frames: &[StageFeatures]) -> Result<Vec<Vec<Var>>> {
    if frames.len() < 2 {
        return Err(Error::dim(format!("need at least 2 frames, got {}", frames.len())));
    }
    (0..STAGES)
        .map(|j| {
            frames
                .windows(2)
                .map(|p| {
                    let (a, b) = (p[0].stages[j], p[1].stages[j]);
                    if g.shape(a) != g.shape(b) {
                        return Err(Error::dim(format!(
                            "stage {} shapes differ between frames: {:?} vs {:?}",
                            j + 1,
                            g.shape(a),
                            g.shape(b)
                        )));
                    }
                    g.sub(b, a)
                })
                .collect()
        })
        .collect()
}

/// Modulated deformable 3x3-style convolution (stride 1, "same" padding).
///
/// `offsets [N, 2K, H, W]` holds K row shifts followed by K column shifts;
/// `mask [N, K, H, W]` scales each tap. `weight` is `[O, C, kh, kw]`.
pub fn deform_conv<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    offsets: Var,
    mask: Option<Var>,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(weight).to_vec();
    if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] {
        return Err(Error::dim(format!("deform_conv: input {xs:?} with weight {ws:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (o, kh, kw) = (ws[0], ws[2], ws[3]);
    let k = kh * kw;
    if g.shape(offsets) != [n, 2 * k, h, w] {
        return Err(Error::dim(format!(
            "deform_conv: offsets {:?}, expected {:?}",
            g.shape(offsets),
            [n, 2 * k, h, w]
        )));
    }
    if let Some(m) = mask {
        if g.shape(m) != [n, k, h, w] {
            return Err(Error::dim(format!("deform_conv: mask {:?}", g.shape(m))));
        }
    }
    let (py, px) = (kh / 2, kw / 2);
    let mut base_y = Vec::with_capacity(k * h * w);
    let mut base_x = Vec::with_capacity(k * h * w);
    for ky in 0..kh {
        for kx in 0..kw {
            for i in 0..h {
                for j in 0..w {
                    base_y.push(T::lit(i as f64 + ky as f64 - py as f64));
                    base_x.push(T::lit(j as f64 + kx as f64 - px as f64));
                }
            }
        }
    }
    let by = g.constant(Tensor::new(vec![1, k, h, w], base_y)?)?;
    let bx = g.constant(Tensor::new(vec![1, k, h, w], base_x)?)?;
    let dy = g.slice(offsets, 1, 0, k)?;
    let dx = g.slice(offsets, 1, k, k)?;
    let ys = g.add(dy, by)?;
    let xs_ = g.add(dx, bx)?;
    // [N, C, K, H, W]
    let mut sampled = g.bilinear_sample(x, ys, xs_)?;
    if let Some(m) = mask {
        let m5 = g.reshape(m, vec![n, 1, k, h, w])?;
        sampled = g.mul(sampled, m5)?;
    }
    let cols = g.reshape(sampled, vec![n, c * k, h * w])?;
    let wm = g.reshape(weight, vec![o, c * k])?;
    let y = g.bmm_shared(wm, cols)?;
    let y = g.reshape(y, vec![n, o, h, w])?;
    let b = g.reshape(bias, vec![1, o, 1, 1])?;
    g.add(y, b)
}

#[derive(Clone, Debug)]
struct IntraStage {
    stage: usize,
    proj: Conv2d,
    blocks: Vec<ResidualBlock>,
}

/// Offset and modulation branches plus the deformable convolution of one
/// stage.
#[derive(Clone, Debug)]
pub struct SpatialModulation {
    offset_blocks: Vec<ResidualBlock>,
    offset_conv: Conv2d,
    mask_blocks: Vec<ResidualBlock>,
    mask_conv: Conv2d,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Per-stage intermediate values, exposed for inspection.
#[derive(Clone, Debug)]
pub struct StageMotion {
    pub stage: usize,
    pub fused: Var,
    pub calibrated: Var,
    pub offsets: Option<Var>,
    pub mask: Option<Var>,
}

impl SpatialModulation {
    fn new<T: Scalar>(init: &mut Init<T>, name: &str, cm: usize, blocks: usize) -> Result<Self> {
        let k = 9;
        Ok(SpatialModulation {
            offset_blocks: residual_stack(init, &format!("{name}.offset"), cm, blocks)?,
            offset_conv: Conv2d::new(init, &format!("{name}.offset.out"), cm, 2 * k, 3, 1)?,
            mask_blocks: residual_stack(init, &format!("{name}.mask"), cm, blocks)?,
            mask_conv: Conv2d::new(init, &format!("{name}.mask.out"), cm, k, 3, 1)?,
            weight: init.fan_in(&format!("{name}.deform.weight"), vec![cm, cm, 3, 3], cm * k)?,
            bias: init.zeros(&format!("{name}.deform.bias"), vec![cm])?,
        })
    }

    /// Returns `(D̄, offsets, mask)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, d: Var) -> Result<(Var, Var, Var)> {
        let o = run_stack(&self.offset_blocks, g, d)?;
        let offsets = self.offset_conv.forward(g, o)?;
        let m = run_stack(&self.mask_blocks, g, d)?;
        let m = self.mask_conv.forward(g, m)?;
        let mask = g.sigmoid(m)?;
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        let out = deform_conv(g, d, offsets, Some(mask), w, b)?;
        Ok((out, offsets, mask))
    }
}

#[derive(Clone, Debug)]
enum Fuser {
    Progressive(Vec<Conv2d>),
    Concat(Conv2d),
}

#[derive(Clone, Debug)]
pub struct Tde {
    pub cfg: TdeConfig,
    intra: Vec<IntraStage>,
    modulation: Vec<Option<SpatialModulation>>,
    fuser: Fuser,
}

/// Output of the encoder.
#[derive(Clone, Debug)]
pub struct TdeOutput {
    /// Motion feature `[N, C_m, H_1, W_1]`.
    pub motion: Var,
    pub stages: Vec<StageMotion>,
}

impl Tde {
    pub fn new<T: Scalar>(init: &mut Init<T>, cfg: &TdeConfig, stage_channels: [usize; STAGES]) -> Result<Self> {
        cfg.validate()?;
        let cm = cfg.motion_channels;
        let pairs = 2 * cfg.delta;
        let mut intra = Vec::new();
        let mut modulation = Vec::new();
        for &s in &cfg.stages {
            let name = format!("tde.intra.{s}");
            intra.push(IntraStage {
                stage: s,
                proj: Conv2d::new(init, &format!("{name}.proj"), pairs * stage_channels[s - 1], cm, 1, 1)?,
                blocks: residual_stack(init, &name, cm, cfg.intra_blocks[s - 1])?,
            });
            modulation.push(if cfg.modulation {
                Some(SpatialModulation::new(init, &format!("tde.modulate.{s}"), cm, cfg.branch_blocks)?)
            } else {
                None
            });
        }
        let fuser = match cfg.fusion {
            Fusion::Progressive => Fuser::Progressive(
                cfg.stages
                    .iter()
                    .map(|s| Conv2d::new(init, &format!("tde.fuse.{s}"), cm, cm, 3, 1))
                    .collect::<Result<_>>()?,
            ),
            Fusion::Concat => Fuser::Concat(Conv2d::new(init, "tde.simple", cfg.stages.len() * cm, cm, 3, 1)?),
        };
        Ok(Tde {
            cfg: cfg.clone(),
            intra,
            modulation,
            fuser,
        })
    }

    /// Channel concat of the stage's differences, 1x1 projection to `C_m`,
    /// then the stage's residual blocks.
    fn intra_fuse<T: Scalar>(&self, g: &mut Graph<T>, s: &IntraStage, diffs: &[Var]) -> Result<Var> {
        let cat = g.concat(diffs, 1)?;
        let p = s.proj.forward(g, cat)?;
        run_stack(&s.blocks, g, p)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, frames: &[StageFeatures]) -> Result<TdeOutput> {
        if frames.len() != 2 * self.cfg.delta + 1 {
            return Err(Error::dim(format!(
                "tde expects {} frames, got {}",
                2 * self.cfg.delta + 1,
                frames.len()
            )));
        }
        let diffs = compute_differences(g, frames)?;
        let s1 = g.shape(frames[0].stages[0]).to_vec();
        let (h1, w1) = (s1[2], s1[3]);
        let mut stages = Vec::with_capacity(self.intra.len());
        let mut aligned = Vec::with_capacity(self.intra.len());
        for (is, modu) in self.intra.iter().zip(&self.modulation) {
            let fused = self.intra_fuse(g, is, &diffs[is.stage - 1])?;
            let (calibrated, offsets, mask) = match modu {
                Some(m) => {
                    let (c, o, w) = m.forward(g, fused)?;
                    (c, Some(o), Some(w))
                }
                None => (fused, None, None),
            };
            aligned.push(g.resize_bilinear(calibrated, h1, w1)?);
            stages.push(StageMotion {
                stage: is.stage,
                fused,
                calibrated,
                offsets,
                mask,
            });
        }
        let motion = match &self.fuser {
            Fuser::Progressive(convs) => progressive(g, convs, &aligned)?,
            Fuser::Concat(conv) => {
                let cat = g.concat(&aligned, 1)?;
                conv.forward(g, cat)?
            }
        };
        Ok(TdeOutput { motion, stages })
    }
}

fn progressive<T: Scalar>(g: &mut Graph<T>, convs: &[Conv2d], aligned: &[Var]) -> Result<Var> {
    let mut acc = convs[0].forward(g, aligned[0])?;
    for (conv, &d) in convs[1..].iter().zip(&aligned[1..]) {
        let a = lrelu(g, acc)?;
        let s = g.add(a, d)?;
        acc = conv.forward(g, s)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_deformable_is_regular_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::uniform(vec![2, 3, 5, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::uniform(vec![4, 3, 3, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(vec![4], 1.0, &mut rng);
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape).frozen(&store);
        let (x, w, b) = (g.constant(x).unwrap(), g.constant(w).unwrap(), g.constant(b).unwrap());
        let off = g.constant(Tensor::zeros(vec![2, 18, 5, 6])).unwrap();
        let mask = g.constant(Tensor::full(vec![2, 9, 5, 6], 1.0)).unwrap();
        let d = deform_conv(&mut g, x, off, Some(mask), w, b).unwrap();
        let r = g.conv2d(x, w, Some(b), 1, 1).unwrap();
        assert!(g.value(d).max_abs_diff(g.value(r)) < 1e-12);
    }

    #[test]
    fn config_rejects_bad_stage_lists() {
        let mut c = TdeConfig::default();
        c.stages = vec![2, 1];
        assert!(c.validate().is_err());
        c.stages = vec![5];
        assert!(c.validate().is_err());
        c.stages = vec![];
        assert!(c.validate().is_err());
    }
}
