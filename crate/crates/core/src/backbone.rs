//! Four-stage convolutional pyramid producing per-frame stage features.
//!
//! A stride-2 stem halves the input, then every stage halves again with a
//! stride-2 convolution followed by one residual block, so stage `j` sits at
//! `H / 2^(j+1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{lrelu, Conv2d, Graph, Init, ResidualBlock};
use crate::tensor::{Scalar, Var};

pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub channels: [usize; STAGES],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            channels: [16, 32, 64, 128],
        }
    }
}

/// `(channels, height, width)` of every stage for an `h`x`w` input.
pub fn stage_shapes(cfg: &BackboneConfig, h: usize, w: usize) -> Result<[(usize, usize, usize); STAGES]> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::dim(format!("input {h}x{w} must be a positive multiple of 32")));
    }
    Ok(std::array::from_fn(|j| {
        let f = 1 << (j + 2);
        (cfg.channels[j], h / f, w / f)
    }))
}

/// Stage outputs of one frame for a whole batch, each `[N, C_j, H_j, W_j]`.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures {
    pub stages: [Var; STAGES],
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stem: Conv2d,
    stages: Vec<(Conv2d, ResidualBlock)>,
}

impl Backbone {
    pub fn new<T: Scalar>(init: &mut Init<T>, cfg: &BackboneConfig) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.channels.contains(&0) {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        let stem = Conv2d::new(init, "backbone.stem", cfg.in_channels, cfg.channels[0], 3, 2)?;
        let mut stages = Vec::with_capacity(STAGES);
        let mut cin = cfg.channels[0];
        for (j, &c) in cfg.channels.iter().enumerate() {
            let name = format!("backbone.stage{}", j + 1);
            let down = Conv2d::new(init, &format!("{name}.0"), cin, c, 3, 2)?;
            let block = ResidualBlock::new(init, &format!("{name}.1"), c)?;
            stages.push((down, block));
            cin = c;
        }
        Ok(Backbone {
            cfg: cfg.clone(),
            stem,
            stages,
        })
    }

    /// Runs the pyramid on `x [B, C_in, H, W]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<[Var; STAGES]> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.in_channels {
            return Err(Error::dim(format!(
                "backbone expects [B,{},H,W], got {s:?}",
                self.cfg.in_channels
            )));
        }
        stage_shapes(&self.cfg, s[2], s[3])?;
        let h = self.stem.forward(g, x)?;
        let mut h = lrelu(g, h)?;
        let mut out = Vec::with_capacity(STAGES);
        for (down, block) in &self.stages {
            let d = down.forward(g, h)?;
            let d = lrelu(g, d)?;
            h = block.forward(g, d)?;
            out.push(h);
        }
        Ok([out[0], out[1], out[2], out[3]])
    }

    /// Extracts features of `frames` clips stacked frame-major in
    /// `x [frames*N, C_in, H, W]`. All frames share the same weights and run
    /// as one batch.
    pub fn extract<T: Scalar>(&self, g: &mut Graph<T>, x: Var, frames: usize) -> Result<Vec<StageFeatures>> {
        let total = g.shape(x)[0];
        if frames == 0 || total % frames != 0 {
            return Err(Error::dim(format!("{total} images do not split into {frames} frames")));
        }
        let n = total / frames;
        let all = self.forward(g, x)?;
        (0..frames)
            .map(|t| {
                let mut stages = all;
                for (dst, &src) in stages.iter_mut().zip(&all) {
                    *dst = g.slice(src, 0, t * n, n)?;
                }
                Ok(StageFeatures { stages })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn declared_schedule_for_64() {
        let shapes = stage_shapes(&BackboneConfig::default(), 64, 64).unwrap();
        assert_eq!(shapes, [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]);
        assert!(stage_shapes(&BackboneConfig::default(), 40, 64).is_err());
    }

    #[test]
    fn forward_matches_declared_shapes() {
        let cfg = BackboneConfig {
            in_channels: 1,
            channels: [2, 3, 4, 5],
        };
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut Init::new(&mut store, 1), &cfg).unwrap();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape).frozen(&store);
        let x = g.constant(Tensor::full(vec![3, 1, 32, 64], 0.5)).unwrap();
        let out = bb.forward(&mut g, x).unwrap();
        let expect = stage_shapes(&cfg, 32, 64).unwrap();
        for (v, (c, h, w)) in out.iter().zip(expect) {
            assert_eq!(g.shape(*v), [3, c, h, w]);
        }
    }
}
