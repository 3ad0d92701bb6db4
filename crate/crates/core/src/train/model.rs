use crate::backbone::{Backbone, StageFeatures};
use crate::error::{Error, Result};
use crate::nn::{Graph, Init, ParamStore};
use crate::rdm::mi::{self, MiCritics, MiDims, MiInputs, MiTerms};
use crate::rdm::{FactorizedMotion, Factorizer, Head, HeadConfig, HeadOutput};
use crate::synth::SyntheticClip;
use crate::tde::{Tde, TdeOutput};
use crate::tensor::{Scalar, Tensor, Var};

use super::config::TrainConfig;

/// Network input for `N` clips.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    /// `[frames*N, 1, H, W]`, frame-major.
    pub frames: Tensor<T>,
    /// Key-frame targets `[N, J, H/4, W/4]`.
    pub heatmaps: Tensor<T>,
    /// Visibility `[N, J, 1, 1]` as 0/1.
    pub visible: Tensor<T>,

    pub clips: usize,
    pub frame_count: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn from_clips(clips: &[&SyntheticClip], sigma: f64) -> Result<Self> {
        let first = clips.first().ok_or_else(|| Error::dim("empty batch"))?;
        let (t, j) = (first.frames.len(), first.visible.len());
        let (h, w) = (first.frames[0].h, first.frames[0].w);
        let n = clips.len();
        let mut frames = Vec::with_capacity(t * n * h * w);
        for f in 0..t {
            for c in clips {
                if c.frames.len() != t || c.visible.len() != j || c.frames[f].h != h || c.frames[f].w != w {
                    return Err(Error::dim("clips in a batch must share frame count, size and joints"));
                }
                frames.extend(c.frames[f].data.iter().map(|&v| T::lit(v as f64)));
            }
        }
        let mut maps = Vec::new();
        let mut vis = Vec::with_capacity(n * j);
        for c in clips {
            maps.extend(c.heatmaps(sigma)?.into_iter().map(|v| T::lit(v as f64)));
            vis.extend(c.visible.iter().map(|&v| if v { T::one() } else { T::zero() }));
        }
        Ok(Batch {
            frames: Tensor::new(vec![t * n, 1, h, w], frames)?,
            heatmaps: Tensor::new(vec![n, j, h / 4, w / 4], maps)?,
            visible: Tensor::new(vec![n, j, 1, 1], vis)?,
            clips: n,
            frame_count: t,
        })
    }
}

/// Backbone, optional encoder and factorization, and the heatmap head of
/// one variant.
#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: Backbone,
    pub tde: Option<Tde>,
    pub factorizer: Option<Factorizer>,
    pub head: Head,
    pub frames: usize,
}

pub struct ModelOutput {
    pub features: Vec<StageFeatures>,
    pub tde: Option<TdeOutput>,
    pub factorized: Option<FactorizedMotion>,
    pub head: HeadOutput,
}

impl ModelOutput {
    pub fn heatmaps(&self) -> Var {
        self.head.heatmaps
    }
}

impl Model {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(store, cfg.seed);
        let bcfg = cfg.backbone();
        let backbone = Backbone::new(&mut init, &bcfg)?;
        let v = cfg.variant;
        let cm = cfg.model.motion_channels;
        let tde = if v.has_tde() {
            Some(Tde::new(&mut init, &cfg.tde(), bcfg.channels)?)
        } else {
            None
        };
        let factorizer = match v.factorization() {
            Some(kind) => Some(Factorizer::new(&mut init, kind, cm)?),
            None => None,
        };
        let motion_channels = match (&tde, &factorizer) {
            (None, _) => 0,
            (Some(_), Some(f)) => f.useful_channels(cm),
            (Some(_), None) => cm,
        };
        let hcfg = HeadConfig {
            prefix: if factorizer.is_some() { "rdm" } else { "baseline" }.into(),
            channels: cm,
            motion_channels,
            joints: cfg.data.joints,
            enhance_blocks: cfg.model.enhance_blocks,
            visual: cfg.model.visual,
            spatiotemporal: v == super::Variant::TdmiSt,
            frames: cfg.data.frames(),
        };
        let head = Head::new(&mut init, &hcfg, bcfg.channels)?;
        Ok(Model {
            backbone,
            tde,
            factorizer,
            head,
            frames: cfg.data.frames(),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, frames: Var) -> Result<ModelOutput> {
        let features = self.backbone.extract(g, frames, self.frames)?;
        let key = self.frames / 2;
        let visual = self.head.visual_feature(g, &features, key)?;
        let (tde, factorized, motion) = match &self.tde {
            None => (None, None, None),
            Some(tde) => {
                let out = tde.forward(g, &features)?;
                match &self.factorizer {
                    Some(f) => {
                        let fm = f.forward(g, out.motion)?;
                        let useful = fm.useful;
                        (Some(out), Some(fm), Some(useful))
                    }
                    None => {
                        let m = out.motion;
                        (Some(out), None, Some(m))
                    }
                }
            }
        };
        let head = self.head.forward(g, motion, visual)?;
        if g.shape(head.heatmaps)[1] != self.head.cfg.joints {
            return Err(Error::Config("head joint count does not match data".into()));
        }
        Ok(ModelOutput {
            features,
            tde,
            factorized,
            head,
        })
    }

    /// Critic inputs: pooled features and flattened label heatmaps, each
    /// standardized over the batch.
    pub fn mi_inputs<T: Scalar>(&self, g: &mut Graph<T>, out: &ModelOutput, labels: Var) -> Result<Option<MiInputs>> {
        let (Some(tde), Some(f)) = (&out.tde, &out.factorized) else {
            return Ok(None);
        };
        let n = g.shape(labels)[0];
        let flat: usize = g.shape(labels)[1..].iter().product();
        let labels = g.reshape(labels, vec![n, flat])?;
        let pooled = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            let p = g.global_avg_pool(v)?;
            mi::standardize(g, p)
        };
        let motion = pooled(g, tde.motion)?;
        let useful = pooled(g, f.useful)?;
        let noisy = pooled(g, f.noisy)?;
        let enhanced = pooled(g, out.head.enhanced)?;
        let visual = pooled(g, out.head.visual)?;
        Ok(Some(MiInputs {
            motion,
            useful,
            noisy,
            enhanced,
            visual,
            labels: mi::standardize(g, labels)?,
        }))
    }

    pub fn mi_dims(&self, cfg: &TrainConfig) -> Option<MiDims> {
        let f = self.factorizer.as_ref()?;
        let cm = cfg.model.motion_channels;
        let hm = cfg.data.heatmap_size();
        let u = f.useful_channels(cm);
        Some(MiDims {
            motion: cm,
            useful: u,
            noisy: f.noisy_channels(cm),
            enhanced: cm,
            visual: cm,
            label: cfg.data.joints * hm * hm,
        })
    }

    pub fn critics<T: Scalar>(&self, store: &mut ParamStore<T>, cfg: &TrainConfig) -> Result<Option<MiCritics>> {
        match self.mi_dims(cfg) {
            Some(d) if cfg.variant.has_mi_objective() => {
                let mut init = Init::new(store, cfg.seed);
                Ok(Some(MiCritics::new(&mut init, d, cfg.model.critic_hidden, cfg.model.critic_embed)?))
            }
            _ => Ok(None),
        }
    }
}

/// Sum over visible joints of the squared heatmap error, divided by the
/// number of visible joints.
pub fn heatmap_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, visible: Var) -> Result<Var> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::dim(format!(
            "heatmaps {:?} vs targets {:?}",
            g.shape(pred),
            g.shape(target)
        )));
    }
    let count = g.data(visible).iter().filter(|&&v| v > T::zero()).count().max(1);
    let d = g.sub(pred, target)?;
    let d = g.mul(d, visible)?;
    let sq = g.square(d)?;
    let s = g.sum(sq)?;
    g.scale(s, T::one() / T::count(count))
}

/// `L_H + α L_MI`; the MI term is left out entirely when `α == 0`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, lh: Var, mi: Option<Var>, alpha: f64) -> Result<Var> {
    match mi {
        Some(m) if alpha != 0.0 => {
            let w = g.scale(m, T::lit(alpha))?;
            g.add(lh, w)
        }
        _ => Ok(lh),
    }
}

/// Values of one training forward pass.
pub struct LossParts {
    pub total: Var,
    pub heatmap: Var,
    pub mi: Option<MiTerms<Var>>,
    pub mi_inputs: Option<MiInputs>,
    pub output: ModelOutput,
}

/// Full forward pass to the training objective with MI weight `alpha`.
pub fn training_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model,
    critics: Option<&MiCritics>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    alpha: f64,
) -> Result<LossParts> {
    let frames = g.constant(batch.frames.clone())?;
    let target = g.constant(batch.heatmaps.clone())?;
    let visible = g.constant(batch.visible.clone())?;
    let output = model.forward(g, frames)?;
    let heatmap = heatmap_loss(g, output.heatmaps(), target, visible)?;
    let (mi_terms, mi_inputs) = match critics {
        Some(c) if cfg.uses_mi() => {
            let x = model
                .mi_inputs(g, &output, target)?
                .ok_or_else(|| Error::Config("MI objective needs a factorized model".into()))?;
            (Some(mi::mi_loss(g, c, &x, cfg.stop_grad_noisy)?), Some(x))
        }
        _ => (None, None),
    };
    let total = total_loss(g, heatmap, mi_terms.map(|t| t.total), alpha)?;
    Ok(LossParts {
        total,
        heatmap,
        mi: mi_terms,
        mi_inputs,
        output,
    })
}
