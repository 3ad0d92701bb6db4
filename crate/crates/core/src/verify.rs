//! Built-in verification battery: gradient checks, deformable-convolution
//! degeneracy, Gaussian MI oracles, temporal-difference exactness and
//! crop/heatmap geometry.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::backbone::{Backbone, STAGES};
use crate::error::{Error, Result};
use crate::nn::{Graph, Init, ParamStore};
use crate::rdm::mi::{standardize, Club, InfoNce};
use crate::synth::crop::{BoxCrop, ENLARGEMENT};
use crate::synth::{generate_clip, heatmap, SyntheticClip};
use crate::tde::{compute_differences, deform_conv};
use crate::tensor::gradcheck::{grad_check_many, grad_check_noise_aware, Components, GradCheckReport};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::train::model::{training_loss, Batch, Model};
use crate::train::optim::Adam;
use crate::train::{TrainConfig, Variant};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-6;
/// Width of the uniform jitter added to model parameters before the
/// full-model check.
pub const PARAM_JITTER: f64 = 0.5;
pub const DEFORM_TOL_F64: f64 = 1e-10;
pub const DEFORM_TOL_F32: f64 = 1e-6;
pub const DEFORM_TRIALS: usize = 20;
pub const HEATMAP_ROUND_TRIP_PX: f64 = 0.5;
pub const GROUPS: [&str; 5] = ["grad", "deform", "mi", "tde", "geometry"];

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub group: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Group name or name substring; `None` runs everything.
    pub filter: Option<String>,
    pub mi: MiOracleConfig,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            filter: None,
            mi: MiOracleConfig::default(),
        }
    }
}

type CheckFn = Box<dyn Fn(&VerifyOptions) -> Result<(bool, String)>>;

fn catalogue() -> Vec<(&'static str, String, CheckFn)> {
    let mut out: Vec<(&'static str, String, CheckFn)> = Vec::new();
    for (name, f) in primitive_checks() {
        out.push((
            "grad",
            format!("grad/{name}"),
            Box::new(move |_| {
                let r = f()?;
                Ok((r.passes(GRAD_TOL), grad_detail(&r)))
            }),
        ));
    }
    out.push((
        "grad",
        "grad/full_model".into(),
        Box::new(|_| {
            let r = full_model_grad_check()?;
            Ok((r.passes(GRAD_TOL), grad_detail(&r)))
        }),
    ));
    for stage in 1..=STAGES {
        out.push((
            "deform",
            format!("deform/stage{stage}_f64"),
            Box::new(move |_| deform_check::<f64>(stage, DEFORM_TOL_F64)),
        ));
        out.push((
            "deform",
            format!("deform/stage{stage}_f32"),
            Box::new(move |_| deform_check::<f32>(stage, DEFORM_TOL_F32)),
        ));
    }
    out.push(("mi", "mi/infonce_gaussian_oracle".into(), Box::new(|o| mi_oracle_check(&o.mi))));
    out.push(("mi", "mi/club_upper_bound".into(), Box::new(|o| club_check(&o.mi))));
    out.push(("tde", "tde/static_clip_zero".into(), Box::new(|_| static_clip_check())));
    out.push(("tde", "tde/reversal_negates".into(), Box::new(|_| reversal_check())));
    out.push(("geometry", "geometry/crop_enlargement".into(), Box::new(|_| crop_check())));
    out.push(("geometry", "geometry/heatmap_round_trip".into(), Box::new(|_| heatmap_check())));
    out
}

fn selected(filter: &Option<String>, group: &str, name: &str) -> bool {
    match filter {
        None => true,
        Some(f) => group == f || name.contains(f.as_str()),
    }
}

/// Names of the checks `filter` selects.
pub fn list(filter: &Option<String>) -> Vec<String> {
    catalogue()
        .into_iter()
        .filter(|(g, n, _)| selected(filter, g, n))
        .map(|(_, n, _)| n)
        .collect()
}

/// Runs every selected check, reporting each through `progress` as it
/// finishes. An erroring check counts as a failure.
pub fn run(opts: &VerifyOptions, progress: &mut dyn FnMut(&Check)) -> Vec<Check> {
    let mut out = Vec::new();
    for (group, name, f) in catalogue() {
        if !selected(&opts.filter, group, &name) {
            continue;
        }
        let start = Instant::now();
        let (passed, detail) = match f(opts) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let c = Check {
            group,
            name,
            passed,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&c);
        out.push(c);
    }
    out
}

fn grad_detail(r: &GradCheckReport) -> String {
    let mut d = format!(
        "max rel err {:.2e} over {} components (analytic {:.6e}, numeric {:.6e})",
        r.max_rel_error, r.checked, r.analytic, r.numeric
    );
    if r.noise > 0.0 {
        d += &format!(
            "; value noise {:.1e}, {} of {} components above the {:.1e} floor",
            r.noise, r.resolved, r.checked, r.floor
        );
    }
    d
}

// ---- gradient battery -----------------------------------------------------

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Values bounded away from zero, for kinks at the origin.
fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_t(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Fractional coordinates bounded away from integers.
fn rand_fractional(rng: &mut ChaCha8Rng, shape: &[usize], lo: i32, hi: i32) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.random_range(lo..hi) as f64 + rng.random_range(0.1..0.9))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

type PrimitiveCheck = Box<dyn Fn() -> Result<GradCheckReport>>;

fn check_with<F>(inputs: Vec<Tensor<f64>>, f: F) -> PrimitiveCheck
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
{
    Box::new(move || grad_check_many(&f, &inputs, GRAD_EPS, Components::All))
}

fn primitive_checks() -> Vec<(&'static str, PrimitiveCheck)> {
    let mut r = ChaCha8Rng::seed_from_u64(0xc0ffee);
    let r = &mut r;
    vec![
        ("add", check_with(vec![rand_t(r, &[2, 3, 4], -1.0, 1.0), rand_t(r, &[2, 3, 4], -1.0, 1.0)], |t, v| t.add(v[0], v[1]))),
        ("add_broadcast", check_with(vec![rand_t(r, &[2, 3, 4], -1.0, 1.0), rand_t(r, &[1, 3, 1], -1.0, 1.0)], |t, v| t.add(v[0], v[1]))),
        ("sub", check_with(vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| t.sub(v[0], v[1]))),
        ("sub_broadcast", check_with(vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[1, 4], -1.0, 1.0)], |t, v| t.sub(v[0], v[1]))),
        ("mul", check_with(vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| t.mul(v[0], v[1]))),
        ("mul_broadcast", check_with(vec![rand_t(r, &[2, 3, 2, 2], -1.0, 1.0), rand_t(r, &[2, 3, 1, 1], -1.0, 1.0)], |t, v| t.mul(v[0], v[1]))),
        ("scale", check_with(vec![rand_t(r, &[5], -1.0, 1.0)], |t, v| t.scale(v[0], -1.7))),
        ("add_scalar", check_with(vec![rand_t(r, &[5], -1.0, 1.0)], |t, v| t.add_scalar(v[0], 0.3))),
        ("neg", check_with(vec![rand_t(r, &[5], -1.0, 1.0)], |t, v| t.neg(v[0]))),
        ("square", check_with(vec![rand_t(r, &[6], -2.0, 2.0)], |t, v| t.square(v[0]))),
        ("sigmoid", check_with(vec![rand_t(r, &[6], -3.0, 3.0)], |t, v| t.sigmoid(v[0]))),
        ("tanh", check_with(vec![rand_t(r, &[6], -2.0, 2.0)], |t, v| t.tanh(v[0]))),
        ("leaky_relu", check_with(vec![rand_off_zero(r, &[8])], |t, v| t.leaky_relu(v[0], 0.1))),
        ("exp", check_with(vec![rand_t(r, &[6], -2.0, 2.0)], |t, v| t.exp(v[0]))),
        ("log", check_with(vec![rand_t(r, &[6], 0.2, 3.0)], |t, v| t.log(v[0]))),
        ("sum", check_with(vec![rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| t.sum(v[0]))),
        ("mean", check_with(vec![rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| t.mean(v[0]))),
        ("sum_axis", check_with(vec![rand_t(r, &[2, 3, 4], -1.0, 1.0)], |t, v| t.sum_axis(v[0], 1))),
        ("mean_axis", check_with(vec![rand_t(r, &[4, 3], -1.0, 1.0)], |t, v| t.mean_axis(v[0], 0))),
        ("reshape", check_with(vec![rand_t(r, &[2, 6], -1.0, 1.0)], |t, v| t.reshape(v[0], vec![3, 4]))),
        ("matmul", check_with(vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[4, 5], -1.0, 1.0)], |t, v| t.matmul(v[0], v[1]))),
        ("transpose", check_with(vec![rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| t.transpose(v[0]))),
        ("bmm_shared", check_with(vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[2, 4, 5], -1.0, 1.0)], |t, v| t.bmm_shared(v[0], v[1]))),
        (
            "conv2d",
            check_with(
                vec![rand_t(r, &[2, 3, 5, 5], -1.0, 1.0), rand_t(r, &[4, 3, 3, 3], -1.0, 1.0), rand_t(r, &[4], -1.0, 1.0)],
                |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
            ),
        ),
        (
            "conv2d_stride2",
            check_with(vec![rand_t(r, &[2, 2, 6, 6], -1.0, 1.0), rand_t(r, &[3, 2, 3, 3], -1.0, 1.0)], |t, v| {
                t.conv2d(v[0], v[1], None, 2, 1)
            }),
        ),
        (
            "conv2d_1x1",
            check_with(vec![rand_t(r, &[2, 3, 4, 4], -1.0, 1.0), rand_t(r, &[2, 3, 1, 1], -1.0, 1.0)], |t, v| {
                t.conv2d(v[0], v[1], None, 1, 0)
            }),
        ),
        (
            "bilinear_sample",
            check_with(
                vec![rand_t(r, &[2, 2, 4, 5], -1.0, 1.0), rand_fractional(r, &[2, 3, 4], -1, 4), rand_fractional(r, &[2, 3, 4], -1, 5)],
                |t, v| t.bilinear_sample(v[0], v[1], v[2]),
            ),
        ),
        ("global_avg_pool", check_with(vec![rand_t(r, &[2, 3, 3, 4], -1.0, 1.0)], |t, v| t.global_avg_pool(v[0]))),
        ("resize_up", check_with(vec![rand_t(r, &[1, 2, 3, 4], -1.0, 1.0)], |t, v| t.resize_bilinear(v[0], 6, 8))),
        ("resize_down", check_with(vec![rand_t(r, &[1, 2, 8, 8], -1.0, 1.0)], |t, v| t.resize_bilinear(v[0], 3, 5))),
        (
            "concat",
            check_with(vec![rand_t(r, &[2, 3, 2], -1.0, 1.0), rand_t(r, &[2, 1, 2], -1.0, 1.0)], |t, v| t.concat(&[v[0], v[1]], 1)),
        ),
        ("slice", check_with(vec![rand_t(r, &[2, 5, 3], -1.0, 1.0)], |t, v| t.slice(v[0], 1, 1, 3))),
        ("logsumexp_rows", check_with(vec![rand_t(r, &[4, 5], -3.0, 3.0)], |t, v| t.logsumexp_rows(v[0]))),
        ("diag", check_with(vec![rand_t(r, &[4, 4], -1.0, 1.0)], |t, v| t.diag(v[0]))),
        ("mse", check_with(vec![rand_t(r, &[3, 4], -1.0, 1.0), rand_t(r, &[3, 4], -1.0, 1.0)], |t, v| t.mse(v[0], v[1]))),
        (
            "channel_scale",
            check_with(vec![rand_t(r, &[2, 3, 2, 2], -1.0, 1.0), rand_t(r, &[2, 3], -1.0, 1.0)], |t, v| t.channel_scale(v[0], v[1])),
        ),
        (
            "deform_conv",
            check_with(
                vec![
                    rand_t(r, &[1, 2, 4, 4], -1.0, 1.0),
                    rand_fractional(r, &[1, 18, 4, 4], -1, 1),
                    rand_t(r, &[1, 9, 4, 4], 0.1, 0.9),
                    rand_t(r, &[3, 2, 3, 3], -1.0, 1.0),
                    rand_t(r, &[3], -1.0, 1.0),
                ],
                |t, v| {
                    let mut g = Graph::new(t);
                    deform_conv(&mut g, v[0], v[1], Some(v[2]), v[3], v[4])
                },
            ),
        ),
        (
            "standardize",
            check_with(vec![rand_t(r, &[16, 3], -1.0, 1.0)], |t, v| standardize(&mut Graph::new(t), v[0])),
        ),
        (
            "infonce",
            check_with(vec![rand_t(r, &[16, 3], -1.0, 1.0), rand_t(r, &[16, 2], -1.0, 1.0)], |t, v| {
                let mut store = ParamStore::new();
                let c = InfoNce::new(&mut Init::new(&mut store, 5), "c", 3, 2, 4, 3)?;
                c.estimate(&mut Graph::new(t).frozen(&store), v[0], v[1])
            }),
        ),
        (
            "club",
            check_with(vec![rand_t(r, &[16, 3], -1.0, 1.0), rand_t(r, &[16, 2], -1.0, 1.0)], |t, v| {
                let mut store = ParamStore::new();
                let c = Club::new(&mut Init::new(&mut store, 6), "c", 3, 2, 4)?;
                c.estimate(&mut Graph::new(t).frozen(&store), v[0], v[1])
            }),
        ),
    ]
}

/// Small double-precision model with every component of the full variant.
pub fn tiny_config(variant: Variant) -> TrainConfig {
    let mut c = TrainConfig {
        variant,
        seed: 3,
        batch_size: 16,
        train_clips: 16,
        ..TrainConfig::default()
    };
    c.data.image_size = 32;
    c.data.joints = 2;
    c.data.distractors = 1;
    c.data.noise = 0.3;
    c.data.v_max = 6.0;
    c.model.channels = [2, 3, 4, 4];
    c.model.motion_channels = 4;
    c.model.intra_blocks = [1, 1, 1, 1];
    c.model.branch_blocks = 1;
    c.model.enhance_blocks = 1;
    c.model.critic_hidden = 4;
    c.model.critic_embed = 3;
    c
}

/// Gradient of the full training loss (backbone, encoder, factorization,
/// head, heatmap loss and MI objective) with respect to sampled entries of
/// every model parameter.
pub fn full_model_grad_check() -> Result<GradCheckReport> {
    model_grad_check(&tiny_config(Variant::Tdmi))
}

/// [`full_model_grad_check`] for any configuration.
pub fn model_grad_check(cfg: &TrainConfig) -> Result<GradCheckReport> {
    let cfg = cfg.clone();
    let mut params = ParamStore::<f64>::new();
    let model = Model::new(&mut params, &cfg)?;
    // Zero biases on a zero background put many activations exactly on a
    // leaky-ReLU kink; a jittered point is differentiable almost surely.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a17);
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += PARAM_JITTER * (rng.random::<f64>() - 0.5);
        }
    }
    let mut critic_params = ParamStore::<f64>::new();
    let critics = model.critics(&mut critic_params, &cfg)?;
    let clips: Vec<SyntheticClip> = (0..cfg.batch_size as u64)
        .map(|s| generate_clip(s, &cfg.data))
        .collect::<Result<_>>()?;
    let refs: Vec<&SyntheticClip> = clips.iter().collect();
    let batch = Batch::<f64>::from_clips(&refs, cfg.data.sigma)?;
    let ids: Vec<_> = params.ids().collect();
    let inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let mut g = Graph::new(tape).frozen(&params).frozen(&critic_params);
        for (&id, &v) in ids.iter().zip(vars) {
            g.bind(id, v);
        }
        Ok(training_loss(&mut g, &model, critics.as_ref(), &batch, &cfg, cfg.alpha)?.total)
    };
    grad_check_noise_aware(
        f,
        &inputs,
        GRAD_EPS,
        Components::Sample {
            per_tensor: 2,
            seed: 11,
        },
        GRAD_TOL,
    )
}

// ---- deformable degeneracy --------------------------------------------------

/// Zero offsets with unit modulation against a plain 3x3 convolution, at the
/// stage resolutions of a 64x64 input with 32 motion channels.
fn deform_check<T: Scalar>(stage: usize, tol: f64) -> Result<(bool, String)> {
    let side = 64 >> (stage + 1);
    let c = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(100 + stage as u64);
    let mut worst = 0.0f64;
    for _ in 0..DEFORM_TRIALS {
        let x = rand_t(&mut rng, &[2, c, side, side], -1.0, 1.0).cast::<T>();
        let w = rand_t(&mut rng, &[c, c, 3, 3], -0.2, 0.2).cast::<T>();
        let b = rand_t(&mut rng, &[c], -0.5, 0.5).cast::<T>();
        let mut tape = Tape::<T>::new();
        let mut g = Graph::new(&mut tape);
        let xv = g.constant(x)?;
        let wv = g.constant(w)?;
        let bv = g.constant(b)?;
        let off = g.constant(Tensor::zeros(vec![2, 18, side, side]))?;
        let mask = g.constant(Tensor::full(vec![2, 9, side, side], T::one()))?;
        let d = deform_conv(&mut g, xv, off, Some(mask), wv, bv)?;
        let r = g.conv2d(xv, wv, Some(bv), 1, 1)?;
        worst = worst.max(g.value(d).max_abs_diff(g.value(r)));
    }
    Ok((worst <= tol, format!("max abs diff {worst:.2e} over {DEFORM_TRIALS} inputs of {side}x{side} (tol {tol:.0e})")))
}

// ---- MI oracles ---------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MiOracleConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub hidden: usize,
    pub embed: usize,
    /// Fresh batches averaged for the final estimate.
    pub eval_batches: usize,
    pub seeds: Vec<u64>,
}

impl Default for MiOracleConfig {
    fn default() -> Self {
        MiOracleConfig {
            batch: 1024,
            steps: 2000,
            lr: 3e-3,
            hidden: 32,
            embed: 8,
            eval_batches: 8,
            seeds: vec![0, 1, 2],
        }
    }
}

/// `(rho, tolerance)` pairs of the lower-bound oracle.
pub const MI_ORACLE_CASES: [(f64, f64); 3] = [(0.0, 0.05), (0.5, 0.05), (0.9, 0.1)];

/// Mutual information of a bivariate standard normal with correlation `rho`.
pub fn gaussian_mi(rho: f64) -> f64 {
    -0.5 * (1.0 - rho * rho).ln()
}

/// `B` paired draws `[B,1]` from a standard bivariate normal.
pub fn correlated_gaussians<T: Scalar>(rng: &mut ChaCha8Rng, rho: f64, b: usize) -> (Tensor<T>, Tensor<T>) {
    let s = (1.0 - rho * rho).sqrt();
    let mut xs = Vec::with_capacity(b);
    let mut ys = Vec::with_capacity(b);
    for _ in 0..b {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        xs.push(T::lit(z1));
        ys.push(T::lit(rho * z1 + s * z2));
    }
    (
        Tensor::new(vec![b, 1], xs).expect("shape"),
        Tensor::new(vec![b, 1], ys).expect("shape"),
    )
}

/// Trains a contrastive critic on fresh correlated-Gaussian batches and
/// returns its averaged estimate on held-out batches.
pub fn infonce_gaussian_estimate(rho: f64, seed: u64, cfg: &MiOracleConfig) -> Result<f64> {
    let mut store = ParamStore::<f32>::new();
    let critic = InfoNce::new(&mut Init::new(&mut store, seed), "oracle", 1, 1, cfg.hidden, cfg.embed)?;
    let mut opt = Adam::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d69);
    for _ in 0..cfg.steps {
        let (x, y) = correlated_gaussians::<f32>(&mut rng, rho, cfg.batch);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape).trainable(&store);
        let (xv, yv) = (g.constant(x)?, g.constant(y)?);
        let obj = critic.objective(&mut g, xv, yv)?;
        let loss = g.neg(obj)?;
        g.backward(loss)?;
        let grads = g.grads(&store);
        drop(g);
        opt.update(&mut store, &grads, cfg.lr)?;
    }
    let mut total = 0.0;
    for _ in 0..cfg.eval_batches {
        let (x, y) = correlated_gaussians::<f32>(&mut rng, rho, cfg.batch);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape).frozen(&store);
        let (xv, yv) = (g.constant(x)?, g.constant(y)?);
        let e = critic.estimate(&mut g, xv, yv)?;
        total += g.value(e).item().as_f64();
    }
    Ok(total / cfg.eval_batches as f64)
}

/// Per-seed estimates for each oracle case, in `MI_ORACLE_CASES` order.
pub fn infonce_oracle_table(cfg: &MiOracleConfig) -> Result<Vec<Vec<f64>>> {
    let jobs: Vec<(f64, u64)> = MI_ORACLE_CASES
        .iter()
        .flat_map(|&(rho, _)| cfg.seeds.iter().map(move |&s| (rho, s)))
        .collect();
    let flat: Vec<f64> = jobs
        .par_iter()
        .map(|&(rho, s)| infonce_gaussian_estimate(rho, s, cfg))
        .collect::<Result<_>>()?;
    Ok(flat.chunks(cfg.seeds.len().max(1)).map(<[f64]>::to_vec).collect())
}

/// Tolerance and monotonicity verdict on an oracle table.
pub fn judge_oracle_table(table: &[Vec<f64>]) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for (&(rho, tol), row) in MI_ORACLE_CASES.iter().zip(table) {
        let truth = gaussian_mi(rho);
        let worst = row.iter().map(|e| (e - truth).abs()).fold(0.0, f64::max);
        ok &= worst <= tol;
        let shown: Vec<String> = row.iter().map(|e| format!("{e:.3}")).collect();
        parts.push(format!("rho {rho}: true {truth:.3}, est [{}], err {worst:.3} (tol {tol})", shown.join(", ")));
    }
    let seeds = table.first().map_or(0, Vec::len);
    let monotone = (0..seeds).all(|s| table.windows(2).all(|w| w[1][s] >= w[0][s]));
    ok &= monotone;
    parts.push(format!("monotone in rho for every seed: {monotone}"));
    (ok, parts.join("; "))
}

fn mi_oracle_check(cfg: &MiOracleConfig) -> Result<(bool, String)> {
    Ok(judge_oracle_table(&infonce_oracle_table(cfg)?))
}

/// A trained conditional-Gaussian critic must not estimate below the true
/// information, since it bounds it from above.
fn club_check(cfg: &MiOracleConfig) -> Result<(bool, String)> {
    let rho = 0.5;
    let mut store = ParamStore::<f32>::new();
    let critic = Club::new(&mut Init::new(&mut store, 5), "oracle", 1, 1, cfg.hidden)?;
    let mut opt = Adam::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..cfg.steps / 4 {
        let (x, y) = correlated_gaussians::<f32>(&mut rng, rho, 256);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape).trainable(&store);
        let (xv, yv) = (g.constant(x)?, g.constant(y)?);
        let obj = critic.objective(&mut g, xv, yv)?;
        let loss = g.neg(obj)?;
        g.backward(loss)?;
        let grads = g.grads(&store);
        drop(g);
        opt.update(&mut store, &grads, cfg.lr)?;
    }
    let (x, y) = correlated_gaussians::<f32>(&mut rng, rho, cfg.batch);
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape).frozen(&store);
    let (xv, yv) = (g.constant(x)?, g.constant(y)?);
    let e = critic.estimate(&mut g, xv, yv)?;
    let est = g.value(e).item().as_f64();
    let truth = gaussian_mi(rho);
    Ok((est >= truth, format!("rho {rho}: upper estimate {est:.3} vs true {truth:.3}")))
}

// ---- temporal differences -------------------------------------------------------

fn difference_values(clips: &[SyntheticClip]) -> Result<Vec<Vec<Tensor<f64>>>> {
    let cfg = tiny_config(Variant::TdeOnly);
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut Init::new(&mut store, 9), &cfg.backbone())?;
    let refs: Vec<&SyntheticClip> = clips.iter().collect();
    let batch = Batch::<f64>::from_clips(&refs, cfg.data.sigma)?;
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape).frozen(&store);
    let x = g.constant(batch.frames)?;
    let feats = bb.extract(&mut g, x, batch.frame_count)?;
    let diffs = compute_differences(&mut g, &feats)?;
    Ok(diffs
        .iter()
        .map(|stage| stage.iter().map(|&v| g.value(v).clone()).collect())
        .collect())
}

fn static_clip_check() -> Result<(bool, String)> {
    let mut data = tiny_config(Variant::TdeOnly).data;
    data.v_max = 0.0;
    data.blur_prob = 0.0;
    let clips: Vec<SyntheticClip> = (0..4).map(|s| generate_clip(s, &data)).collect::<Result<_>>()?;
    let diffs = difference_values(&clips)?;
    let nonzero: usize = diffs
        .iter()
        .flatten()
        .map(|t| t.data().iter().filter(|&&v| v != 0.0).count())
        .sum();
    Ok((nonzero == 0, format!("{nonzero} nonzero difference entries on static clips")))
}

fn reversal_check() -> Result<(bool, String)> {
    let data = tiny_config(Variant::TdeOnly).data;
    let clips: Vec<SyntheticClip> = (0..4).map(|s| generate_clip(s, &data)).collect::<Result<_>>()?;
    let reversed: Vec<SyntheticClip> = clips
        .iter()
        .map(|c| {
            let mut r = c.clone();
            r.frames.reverse();
            r
        })
        .collect();
    let fwd = difference_values(&clips)?;
    let bwd = difference_values(&reversed)?;
    let mut mismatched = 0;
    for (fs, bs) in fwd.iter().zip(&bwd) {
        let p = fs.len();
        for (i, b) in bs.iter().enumerate() {
            let f = &fs[p - 1 - i];
            mismatched += f.data().iter().zip(b.data()).filter(|(x, y)| **y != -**x).count();
        }
    }
    Ok((mismatched == 0, format!("{mismatched} entries differ from the exact negation")))
}

// ---- geometry ---------------------------------------------------------------------

/// Enlargement on a dyadic grid, where every operation is exact.
fn crop_check() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut bad = 0;
    for _ in 0..1000 {
        let q = |rng: &mut ChaCha8Rng, lo: i32, hi: i32| rng.random_range(lo * 64..hi * 64) as f64 / 64.0;
        let b = BoxCrop::new(q(&mut rng, -20, 60), q(&mut rng, -20, 60), q(&mut rng, 1, 80), q(&mut rng, 1, 80));
        let e = b.enlarged(ENLARGEMENT);
        let exact = e.w == b.w * 1.25
            && e.h == b.h * 1.25
            && e.x == b.x - b.w * 0.125
            && e.y == b.y - b.h * 0.125
            && e.x + e.w / 2.0 == b.x + b.w / 2.0
            && e.y + e.h / 2.0 == b.y + b.h / 2.0;
        if !exact {
            bad += 1;
        }
    }
    Ok((bad == 0, format!("{bad} of 1000 boxes deviate from exact 25% enlargement")))
}

fn heatmap_check() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (h, w) = (16, 16);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = [rng.random_range(0.0..(w - 1) as f64), rng.random_range(0.0..(h - 1) as f64)];
        let m = heatmap::encode(&[p], &[true], h, w, 2.0)?;
        let d = heatmap::decode_map(&m, h, w);
        worst = worst.max(((d.x - p[0]).powi(2) + (d.y - p[1]).powi(2)).sqrt());
    }
    Ok((
        worst <= HEATMAP_ROUND_TRIP_PX,
        format!("max round-trip error {worst:.3} heatmap px over 1000 joints"),
    ))
}

/// Fails with the first failing check's name.
pub fn require_all(checks: &[Check]) -> Result<()> {
    match checks.iter().find(|c| !c.passed) {
        Some(c) => Err(Error::Contract(format!("check {} failed: {}", c.name, c.detail))),
        None => Ok(()),
    }
}
