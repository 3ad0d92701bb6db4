//! Training loop, evaluation, checkpoints and the ablation harness.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod model;
pub mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, TrainConfig, Variant};
pub use metrics::{LossPoint, MetricsReport, PckStats, Record};
pub use model::{Batch, Model};

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore};
use crate::rdm::mi::{critic_loss, MiCritics, MiInputs, MiTerms};
use crate::synth::{generate_set, heatmap, SyntheticClip, HEATMAP_STRIDE};
use crate::tensor::{Tape, Tensor};

/// Evaluation clips use seeds this far above the run seed.
pub const EVAL_SEED_OFFSET: u64 = 1 << 32;

const EVAL_BATCH: usize = 25;

/// `TDMI_DETERMINISTIC=1` serializes all work and drops wall-clock fields.
pub fn deterministic_mode() -> bool {
    std::env::var("TDMI_DETERMINISTIC").is_ok_and(|v| v == "1")
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<SyntheticClip>,
    pub eval: Vec<SyntheticClip>,
}

impl Dataset {
    /// Train and eval clips derived from the run seed alone, so every
    /// variant of one seed sees the same data.
    pub fn generate(cfg: &TrainConfig) -> Result<Self> {
        Ok(Dataset {
            train: generate_set(cfg.seed, cfg.train_clips, &cfg.data)?,
            eval: generate_set(cfg.seed.wrapping_add(EVAL_SEED_OFFSET), cfg.eval_clips, &cfg.data)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub iteration: usize,
    pub lr: f64,
    pub heatmap: f64,
    pub mi: Option<MiTerms<f64>>,
    pub total: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
    pub opt: optim::Adam<f32>,
    pub critics: Option<MiCritics>,
    pub critic_params: ParamStore<f32>,
    pub critic_opt: optim::Adam<f32>,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let model = Model::new(&mut params, cfg)?;
        let mut critic_params = ParamStore::new();
        let critics = model.critics(&mut critic_params, cfg)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            opt: optim::Adam::new(&params),
            critic_opt: optim::Adam::new(&critic_params),
            model,
            params,
            critics,
            critic_params,
            iteration: 0,
        })
    }

    /// Clip indices of the batch used at iteration `it`: a fresh shuffle
    /// every epoch, remainder dropped.
    pub fn batch_indices(&self, it: usize, clips: usize) -> Vec<usize> {
        let b = self.cfg.batch_size;
        let per_epoch = (clips / b).max(1);
        let epoch = (it / per_epoch) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x9e37_79b9_7f4a_7c15 ^ epoch.wrapping_mul(0x2545_f491));
        let mut perm: Vec<usize> = (0..clips).collect();
        perm.shuffle(&mut rng);
        let k = it % per_epoch;
        perm[k * b..(k + 1) * b].to_vec()
    }

    fn tape(&self) -> Tape<f32> {
        if self.cfg.checked {
            Tape::checked()
        } else {
            Tape::new()
        }
    }

    /// One optimizer step of the model, then one of the critics.
    pub fn step(&mut self, train: &[SyntheticClip]) -> Result<StepStats> {
        let it = self.iteration;
        let lr = optim::learning_rate(self.cfg.lr, it, self.cfg.iterations);
        let picked: Vec<&SyntheticClip> = self.batch_indices(it, train.len()).into_iter().map(|i| &train[i]).collect();
        let batch = Batch::<f32>::from_clips(&picked, self.cfg.data.sigma)?;

        let mut tape = self.tape();
        let mut g = Graph::new(&mut tape).trainable(&self.params).frozen(&self.critic_params);
        let parts = model::training_loss(&mut g, &self.model, self.critics.as_ref(), &batch, &self.cfg, self.cfg.alpha_at(it))?;
        let total = g.value(parts.total).item() as f64;
        let heat = g.value(parts.heatmap).item() as f64;
        if !total.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let mi = parts.mi.map(|t| t.values(&g));
        let critic_inputs = parts.mi_inputs.map(|x| snapshot(&g, &x));
        g.backward(parts.total)?;
        let grads = g.grads(&self.params);
        drop(g);
        drop(tape);
        self.opt.update(&mut self.params, &grads, lr)?;

        if let (Some(critics), Some(values)) = (&self.critics, critic_inputs) {
            let mut tape = self.tape();
            let mut g = Graph::new(&mut tape).trainable(&self.critic_params);
            let [motion, useful, noisy, enhanced, visual, labels] = values.map(|t| g.constant(t));
            let x = MiInputs {
                motion: motion?,
                useful: useful?,
                noisy: noisy?,
                enhanced: enhanced?,
                visual: visual?,
                labels: labels?,
            };
            let loss = critic_loss(&mut g, critics, &x)?;
            g.backward(loss)?;
            let cgrads = g.grads(&self.critic_params);
            drop(g);
            self.critic_opt.update(&mut self.critic_params, &cgrads, self.cfg.critic_lr)?;
        }
        self.iteration += 1;
        Ok(StepStats {
            iteration: it,
            lr,
            heatmap: heat,
            mi,
            total,
        })
    }

    pub fn evaluate(&self, clips: &[SyntheticClip]) -> Result<Vec<PckStats>> {
        evaluate(&self.model, &self.params, clips, &self.cfg)
    }

    /// Raw predicted heatmaps `[N, J, H/4, W/4]` for `clips`, one forward pass.
    pub fn heatmaps(&self, clips: &[SyntheticClip]) -> Result<Tensor<f32>> {
        let refs: Vec<&SyntheticClip> = clips.iter().collect();
        let batch = Batch::<f32>::from_clips(&refs, self.cfg.data.sigma)?;
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape).frozen(&self.params);
        let x = g.constant(batch.frames)?;
        let o = self.model.forward(&mut g, x)?;
        Ok(g.value(o.heatmaps()).clone())
    }

    pub fn report_name(&self) -> String {
        self.cfg.variant.name().to_string()
    }
}

fn snapshot(g: &Graph<f32>, x: &MiInputs) -> [Tensor<f32>; 6] {
    [x.motion, x.useful, x.noisy, x.enhanced, x.visual, x.labels].map(|v| g.value(v).clone().with_requires_grad(false))
}

/// Decoded key-frame joints in image pixel coordinates, one entry per clip.
pub fn predict(model: &Model, params: &ParamStore<f32>, clips: &[SyntheticClip], cfg: &TrainConfig) -> Result<Vec<Vec<[f64; 2]>>> {
    let mut out = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(EVAL_BATCH) {
        let refs: Vec<&SyntheticClip> = chunk.iter().collect();
        let batch = Batch::<f32>::from_clips(&refs, cfg.data.sigma)?;
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape).frozen(params);
        let x = g.constant(batch.frames)?;
        let o = model.forward(&mut g, x)?;
        let hm = g.value(o.heatmaps());
        let s = hm.shape().to_vec();
        let (j, h, w) = (s[1], s[2], s[3]);
        let stride = HEATMAP_STRIDE as f64;
        for n in 0..s[0] {
            let maps = &hm.data()[n * j * h * w..(n + 1) * j * h * w];
            out.push(
                heatmap::decode(maps, j, h, w)
                    .into_iter()
                    .map(|p| [heatmap::from_heatmap(p.x, stride), heatmap::from_heatmap(p.y, stride)])
                    .collect(),
            );
        }
    }
    Ok(out)
}

pub fn evaluate(model: &Model, params: &ParamStore<f32>, clips: &[SyntheticClip], cfg: &TrainConfig) -> Result<Vec<PckStats>> {
    if clips.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let pred = predict(model, params, clips, cfg)?;
    let truth: Vec<Vec<[f64; 2]>> = clips.iter().map(|c| c.key_joints().to_vec()).collect();
    let vis: Vec<Vec<bool>> = clips.iter().map(|c| c.visible.clone()).collect();
    let size = cfg.data.image_size;
    Ok(metrics::PCK_RADII
        .iter()
        .map(|&r| metrics::pck(&pred, &truth, &vis, r, size, size))
        .collect())
}

/// Trains from scratch on the run's generated data, streaming records to
/// `sink`.
pub fn train(cfg: &TrainConfig, sink: &mut dyn FnMut(&Record)) -> Result<(Trainer, MetricsReport)> {
    let data = Dataset::generate(cfg)?;
    train_on(cfg, &data, sink)
}

pub fn train_on(cfg: &TrainConfig, data: &Dataset, sink: &mut dyn FnMut(&Record)) -> Result<(Trainer, MetricsReport)> {
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg)?;
    let variant = cfg.variant.name().to_string();
    let mut curve = Vec::new();
    let mut last_pck = Vec::new();
    for it in 0..cfg.iterations {
        let s = trainer.step(&data.train)?;
        let last = it + 1 == cfg.iterations;
        if (cfg.log_every > 0 && it % cfg.log_every == 0) || last {
            let mi = s.mi.map(|t| t.total);
            curve.push(LossPoint {
                iteration: it,
                heatmap: s.heatmap,
                mi,
                total: s.total,
            });
            sink(&Record::Train {
                variant: variant.clone(),
                seed: cfg.seed,
                iteration: it,
                lr: s.lr,
                heatmap_loss: s.heatmap,
                mi_loss: mi,
                total_loss: s.total,
            });
        }
        let eval_now = (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) || last;
        if eval_now && !data.eval.is_empty() {
            last_pck = trainer.evaluate(&data.eval)?;
            sink(&Record::Eval {
                variant: variant.clone(),
                seed: cfg.seed,
                iteration: it + 1,
                pck: last_pck.clone(),
                note: metrics::METRIC_NOTE.into(),
            });
        }
    }
    let report = MetricsReport {
        variant,
        seed: cfg.seed,
        iteration: trainer.iteration,
        pck: last_pck,
        loss_curve: curve,
        wall_clock_s: (!deterministic_mode()).then(|| start.elapsed().as_secs_f64()),
        note: metrics::METRIC_NOTE.into(),
    };
    Ok((trainer, report))
}
