//! Trainer state as a tensor archive plus manifest.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::archive::Archive;

use super::{TrainConfig, Trainer};

fn meta_u64(a: &Archive, key: &str) -> Result<u64> {
    a.meta(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Config(format!("checkpoint manifest lacks {key}")))
}

pub fn to_archive(t: &Trainer) -> Result<Archive> {
    let mut a = Archive::default();
    a.meta.push(("config_hash".into(), t.cfg.hash()));
    a.meta.push(("variant".into(), t.cfg.variant.name().into()));
    a.meta.push(("iteration".into(), t.iteration.to_string()));
    a.meta.push(("adam_step".into(), t.opt.step.to_string()));
    a.meta.push(("critic_adam_step".into(), t.critic_opt.step.to_string()));
    t.params.write_to(&mut a);
    t.critic_params.write_to(&mut a);
    t.opt.write_to(&t.params, "adam", &mut a)?;
    t.critic_opt.write_to(&t.critic_params, "critic_adam", &mut a)?;
    Ok(a)
}

pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    to_archive(t)?.save(path)
}

/// Rebuilds a trainer for `cfg` and restores its state. The checkpoint must
/// have been written under a config with the same hash.
pub fn from_archive(a: &Archive, cfg: &TrainConfig) -> Result<Trainer> {
    let hash = a
        .meta("config_hash")
        .ok_or_else(|| Error::Config("checkpoint manifest lacks config_hash".into()))?;
    if hash != cfg.hash() {
        return Err(Error::Config(format!(
            "checkpoint was written for config {hash}, current config is {}",
            cfg.hash()
        )));
    }
    let mut t = Trainer::new(cfg)?;
    t.params.read_from(a)?;
    t.critic_params.read_from(a)?;
    t.opt.read_from(&t.params, "adam", a, meta_u64(a, "adam_step")?)?;
    t.critic_opt
        .read_from(&t.critic_params, "critic_adam", a, meta_u64(a, "critic_adam_step")?)?;
    t.iteration = meta_u64(a, "iteration")? as usize;
    Ok(t)
}

pub fn load(path: &Path, cfg: &TrainConfig) -> Result<Trainer> {
    from_archive(&Archive::load(path)?, cfg)
}
