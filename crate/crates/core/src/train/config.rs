use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, STAGES};
use crate::error::{Error, Result};
use crate::rdm::{Factorization, VisualSource};
use crate::synth::SynthConfig;
use crate::tde::{Fusion, TdeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Tdmi,
    /// Visual feature fused from every frame instead of the key frame.
    TdmiSt,
    BackboneOnly,
    TdeOnly,
    NoMiObjective,
    SimpleFusion,
    NoSpatialModulation,
    SingleStage,
    ChannelSplit,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Tdmi,
        Variant::TdmiSt,
        Variant::BackboneOnly,
        Variant::TdeOnly,
        Variant::NoMiObjective,
        Variant::SimpleFusion,
        Variant::NoSpatialModulation,
        Variant::SingleStage,
        Variant::ChannelSplit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tdmi => "tdmi",
            Variant::TdmiSt => "tdmi_st",
            Variant::BackboneOnly => "backbone_only",
            Variant::TdeOnly => "tde_only",
            Variant::NoMiObjective => "no_mi_objective",
            Variant::SimpleFusion => "simple_fusion",
            Variant::NoSpatialModulation => "no_spatial_modulation",
            Variant::SingleStage => "single_stage",
            Variant::ChannelSplit => "channel_split",
        }
    }

    pub fn has_tde(self) -> bool {
        self != Variant::BackboneOnly
    }

    pub fn factorization(self) -> Option<Factorization> {
        match self {
            Variant::BackboneOnly | Variant::TdeOnly => None,
            Variant::ChannelSplit => Some(Factorization::ChannelSplit),
            _ => Some(Factorization::Attention),
        }
    }

    pub fn has_mi_objective(self) -> bool {
        self.factorization().is_some() && self != Variant::NoMiObjective
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown variant {s:?}; valid variants: {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: [usize; STAGES],
    pub motion_channels: usize,
    pub intra_blocks: [usize; STAGES],
    pub branch_blocks: usize,
    pub enhance_blocks: usize,
    pub visual: VisualSource,
    pub critic_hidden: usize,
    pub critic_embed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [16, 32, 64, 128],
            motion_channels: 32,
            intra_blocks: [3, 3, 2, 2],
            branch_blocks: 2,
            enhance_blocks: 2,
            visual: VisualSource::Pyramid,
            critic_hidden: 32,
            critic_embed: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub critic_lr: f64,
    /// Weight of the mutual-information objective.
    pub alpha: f64,
    /// Fraction of the iterations trained on the heatmap loss alone before
    /// the MI objective enters with weight `alpha`. Critics train throughout.
    pub mi_warmup: f64,
    pub train_clips: usize,
    pub eval_clips: usize,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub log_every: usize,
    /// Treat the noisy motion part as a constant in the first MI term.
    pub stop_grad_noisy: bool,
    /// Reject NaN/Inf in every forward and backward value.
    pub checked: bool,
    pub data: SynthConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Tdmi,
            seed: 0,
            iterations: 2000,
            batch_size: 16,
            lr: 1e-3,
            critic_lr: 1e-3,
            alpha: 1.0,
            mi_warmup: 0.0,
            train_clips: 200,
            eval_clips: 50,
            eval_every: 0,
            log_every: 50,
            stop_grad_noisy: false,
            checked: false,
            data: SynthConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and non-negative, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.mi_warmup) {
            return bad(format!("mi_warmup must lie in [0, 1], got {}", self.mi_warmup));
        }
        if !(self.lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size == 0 || self.train_clips == 0 {
            return bad("batch_size and train_clips must be positive".into());
        }
        if self.batch_size > self.train_clips {
            return bad(format!(
                "batch_size {} exceeds train_clips {}",
                self.batch_size, self.train_clips
            ));
        }
        if self.variant.has_mi_objective() && self.alpha > 0.0 && self.batch_size < crate::rdm::mi::MIN_SAMPLES {
            return bad(format!(
                "the MI objective needs batch_size >= {}, got {}",
                crate::rdm::mi::MIN_SAMPLES,
                self.batch_size
            ));
        }
        if self.model.motion_channels < 2 || self.model.channels.contains(&0) {
            return bad("model channel counts must be positive (motion_channels >= 2)".into());
        }
        if self.model.critic_hidden == 0 || self.model.critic_embed == 0 {
            return bad("critic widths must be positive".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(&Sha256::digest(self.to_toml().as_bytes())[..8])
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: 1,
            channels: self.model.channels,
        }
    }

    pub fn tde(&self) -> TdeConfig {
        let v = self.variant;
        TdeConfig {
            delta: self.data.delta,
            motion_channels: self.model.motion_channels,
            stages: if v == Variant::SingleStage { vec![STAGES] } else { (1..=STAGES).collect() },
            intra_blocks: self.model.intra_blocks,
            branch_blocks: self.model.branch_blocks,
            modulation: v != Variant::NoSpatialModulation,
            fusion: if v == Variant::SimpleFusion { Fusion::Concat } else { Fusion::Progressive },
        }
    }

    /// MI weight at iteration `it`.
    pub fn alpha_at(&self, it: usize) -> f64 {
        if (it as f64) < self.mi_warmup * self.iterations as f64 {
            0.0
        } else {
            self.alpha
        }
    }

    /// Whether MI terms enter the loss (and critics train).
    pub fn uses_mi(&self) -> bool {
        self.variant.has_mi_objective() && self.alpha > 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("[data]\nbogus = 1").is_err());
        let c = TrainConfig::from_toml("variant = \"tde_only\"\n[data]\njoints = 3").unwrap();
        assert_eq!((c.variant, c.data.joints), (Variant::TdeOnly, 3));
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        let e = "tdmi2".parse::<Variant>().unwrap_err().to_string();
        assert!(e.contains("backbone_only"));
    }
}
