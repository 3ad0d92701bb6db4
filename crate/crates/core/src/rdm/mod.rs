//! Motion disentanglement: factorizing the motion feature into useful and
//! noisy parts, fusing the useful part with the visual feature, and the
//! heatmap head.

pub mod mi;

use serde::{Deserialize, Serialize};

use crate::backbone::{StageFeatures, STAGES};
use crate::error::{Error, Result};
use crate::nn::{lrelu, residual_stack, run_stack, Conv2d, Graph, Init, Mlp, ResidualBlock};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factorization {
    /// Channel attention from pooled statistics, one MLP per part.
    Attention,
    /// First half of the channels useful, second half noisy.
    ChannelSplit,
}

/// Which key-frame features form the visual feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualSource {
    /// Stage 4 only, projected and upsampled to stage-1 resolution.
    FinalStage,
    /// Sum of every stage's projection at stage-1 resolution.
    Pyramid,
}

#[derive(Clone, Debug)]
pub struct FactorizedMotion {
    pub useful: Var,
    pub noisy: Var,
    pub mask_u: Option<Var>,
    pub mask_n: Option<Var>,
}

#[derive(Clone, Debug)]
pub enum Factorizer {
    Attention { mlp_u: Mlp, mlp_n: Mlp },
    ChannelSplit { channels: usize },
}

impl Factorizer {
    pub fn new<T: Scalar>(init: &mut Init<T>, kind: Factorization, channels: usize) -> Result<Self> {
        match kind {
            Factorization::Attention => {
                let hidden = (channels / 2).max(1);
                Ok(Factorizer::Attention {
                    mlp_u: Mlp::new(init, "rdm.mlp_u", &[channels, hidden, channels])?,
                    mlp_n: Mlp::new(init, "rdm.mlp_n", &[channels, hidden, channels])?,
                })
            }
            Factorization::ChannelSplit => {
                if channels < 2 {
                    return Err(Error::Config("channel split needs at least 2 motion channels".into()));
                }
                Ok(Factorizer::ChannelSplit { channels })
            }
        }
    }

    /// Channel count of the useful part.
    pub fn useful_channels(&self, channels: usize) -> usize {
        match self {
            Factorizer::Attention { .. } => channels,
            Factorizer::ChannelSplit { channels } => channels / 2,
        }
    }

    pub fn noisy_channels(&self, channels: usize) -> usize {
        match self {
            Factorizer::Attention { .. } => channels,
            Factorizer::ChannelSplit { channels } => channels - channels / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, m: Var) -> Result<FactorizedMotion> {
        match self {
            Factorizer::Attention { mlp_u, mlp_n } => {
                let pooled = g.global_avg_pool(m)?;
                let au = mlp_u.forward(g, pooled)?;
                let an = mlp_n.forward(g, pooled)?;
                let mask_u = g.sigmoid(au)?;
                let mask_n = g.sigmoid(an)?;
                Ok(FactorizedMotion {
                    useful: g.channel_scale(m, mask_u)?,
                    noisy: g.channel_scale(m, mask_n)?,
                    mask_u: Some(mask_u),
                    mask_n: Some(mask_n),
                })
            }
            Factorizer::ChannelSplit { channels } => {
                let half = channels / 2;
                Ok(FactorizedMotion {
                    useful: g.slice(m, 1, 0, half)?,
                    noisy: g.slice(m, 1, half, channels - half)?,
                    mask_u: None,
                    mask_n: None,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// Parameter name prefix.
    pub prefix: String,
    pub channels: usize,
    /// Channels of the motion input; 0 when the head sees only visual input.
    pub motion_channels: usize,
    pub joints: usize,
    pub enhance_blocks: usize,
    pub visual: VisualSource,
    /// Use all frames' features instead of the key frame's.
    pub spatiotemporal: bool,
    pub frames: usize,
}

/// Visual projection, feature enhancement and the 3x3 heatmap head.
#[derive(Clone, Debug)]
pub struct Head {
    pub cfg: HeadConfig,
    visual: Vec<(usize, Conv2d)>,
    enhance_proj: Conv2d,
    enhance: Vec<ResidualBlock>,
    head: Conv2d,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// Visual feature `[N, C, H_1, W_1]`.
    pub visual: Var,
    /// Enhanced representation `F̃`.
    pub enhanced: Var,
    /// Heatmaps `[N, J, H_1, W_1]`.
    pub heatmaps: Var,
}

impl Head {
    pub fn new<T: Scalar>(init: &mut Init<T>, cfg: &HeadConfig, stage_channels: [usize; STAGES]) -> Result<Self> {
        if cfg.joints == 0 || cfg.channels == 0 {
            return Err(Error::Config("joints and head channels must be positive".into()));
        }
        let stages: Vec<usize> = match cfg.visual {
            VisualSource::FinalStage => vec![STAGES],
            VisualSource::Pyramid => (1..=STAGES).collect(),
        };
        let kind = if cfg.spatiotemporal { "visual_st" } else { "visual" };
        let mult = if cfg.spatiotemporal { cfg.frames } else { 1 };
        let p = &cfg.prefix;
        let visual = stages
            .into_iter()
            .map(|s| {
                let conv = Conv2d::new(init, &format!("{p}.{kind}.{s}"), mult * stage_channels[s - 1], cfg.channels, 1, 1)?;
                Ok((s, conv))
            })
            .collect::<Result<_>>()?;
        Ok(Head {
            cfg: cfg.clone(),
            visual,
            enhance_proj: Conv2d::new(init, &format!("{p}.enhance.proj"), cfg.motion_channels + cfg.channels, cfg.channels, 1, 1)?,
            enhance: residual_stack(init, &format!("{p}.enhance"), cfg.channels, cfg.enhance_blocks)?,
            head: Conv2d::new(init, &format!("{p}.head"), cfg.channels, cfg.joints, 3, 1)?,
        })
    }

    pub fn visual_feature<T: Scalar>(&self, g: &mut Graph<T>, frames: &[StageFeatures], key: usize) -> Result<Var> {
        let s1 = g.shape(frames[key].stages[0]).to_vec();
        let mut acc: Option<Var> = None;
        for (s, conv) in &self.visual {
            let input = if self.cfg.spatiotemporal {
                let parts: Vec<Var> = frames.iter().map(|f| f.stages[s - 1]).collect();
                g.concat(&parts, 1)?
            } else {
                frames[key].stages[s - 1]
            };
            let p = conv.forward(g, input)?;
            let r = g.resize_bilinear(p, s1[2], s1[3])?;
            acc = Some(match acc {
                Some(a) => g.add(a, r)?,
                None => r,
            });
        }
        acc.ok_or_else(|| Error::Config("no visual stages".into()))
    }

    /// Enhances `motion` (if any) with the visual feature and predicts
    /// heatmaps.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, motion: Option<Var>, visual: Var) -> Result<HeadOutput> {
        let input = match motion {
            Some(m) => {
                if g.shape(m)[1] != self.cfg.motion_channels {
                    return Err(Error::dim(format!(
                        "head expects {} motion channels, got {:?}",
                        self.cfg.motion_channels,
                        g.shape(m)
                    )));
                }
                g.concat(&[m, visual], 1)?
            }
            None => visual,
        };
        let e = self.enhance_proj.forward(g, input)?;
        let e = lrelu(g, e)?;
        let enhanced = run_stack(&self.enhance, g, e)?;
        let heatmaps = self.head.forward(g, enhanced)?;
        Ok(HeadOutput {
            visual,
            enhanced,
            heatmaps,
        })
    }
}
