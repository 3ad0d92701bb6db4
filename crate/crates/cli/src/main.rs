//! `tdmi` command-line entry point.
//!
//! Exit codes: 0 success, 1 user or config error, 2 failed check or
//! internal fault.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};
use tdmi_core::synth::io::{read_dataset, write_dataset};
use tdmi_core::tensor::{inject_fault, Fault};
use tdmi_core::train::ablation::{run_ablation_suite, DEFAULT_VARIANTS};
use tdmi_core::train::{checkpoint, metrics, train, Dataset, Record};
use tdmi_core::verify::{self, VerifyOptions};
use tdmi_core::{Error, TrainConfig, Variant};

const CONFIG_FILE: &str = "config.toml";
const METRICS_FILE: &str = "metrics.jsonl";
const CHECKPOINT_FILE: &str = "checkpoint.tdmi";
const REPORT_FILE: &str = "report.json";

#[derive(Parser)]
#[command(name = "tdmi", version, about = "Desk-scale temporal-difference pose estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic clips and a manifest.
    Generate(GenerateArgs),
    /// Train one variant and write a run directory.
    Train(TrainArgs),
    /// Evaluate a run directory's checkpoint.
    Eval(EvalArgs),
    /// Train several variants over several seeds and compare them.
    Ablate(AblateArgs),
    /// Run the built-in verification battery.
    Verify(VerifyArgs),
}

/// Config file plus overrides. Later sources win: file, then `--set`,
/// then the dedicated flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML config file; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set data.v_max=4.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    joints: Option<usize>,
    #[arg(long)]
    distractors: Option<usize>,
    #[arg(long)]
    occlusion_prob: Option<f64>,
    #[arg(long)]
    blur_prob: Option<f64>,
    #[arg(long)]
    v_max: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory written by `generate`; defaults to the run's own
    /// evaluation clips.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    /// Comma-separated variants; defaults to every ablation axis.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    ConvInputGradSign,
    SigmoidGradSign,
}

#[derive(Args)]
struct VerifyArgs {
    /// Group name (grad, deform, mi, tde, geometry) or check-name substring.
    #[arg(long)]
    filter: Option<String>,
    /// List selected checks without running them.
    #[arg(long)]
    list: bool,
    /// Corrupt a backward kernel to prove the checks can fail.
    #[arg(long, value_enum)]
    inject_fault: Option<FaultArg>,
    #[arg(long)]
    json: bool,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    User(anyhow::Error),
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let internal = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<Error>(),
                Some(Error::NonFinite { .. } | Error::Contract(_) | Error::Determinism { .. })
            )
        });
        if internal {
            Failure::Check(format!("{e:#}"))
        } else {
            Failure::User(e)
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Verify(a) => cmd_verify(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(2)
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).context("empty config key")?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("config key {p:?} is not a section"))?;
    }
    cur.insert(last.into(), value);
    Ok(())
}

impl ConfigArgs {
    fn table(&self) -> anyhow::Result<toml::Table> {
        let mut t = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for s in &self.sets {
            let (k, v) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
            set_key(&mut t, k.trim(), parse_value(v.trim()))?;
        }
        let flags = [
            ("iterations", self.iterations.map(|v| toml::Value::Integer(v as i64))),
            ("alpha", self.alpha.map(toml::Value::Float)),
            ("batch_size", self.batch_size.map(|v| toml::Value::Integer(v as i64))),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                set_key(&mut t, k, v)?;
            }
        }
        Ok(t)
    }

    fn resolve(&self, extra: &[(&str, Option<toml::Value>)]) -> anyhow::Result<TrainConfig> {
        let mut t = self.table()?;
        for (k, v) in extra {
            if let Some(v) = v {
                set_key(&mut t, k, v.clone())?;
            }
        }
        let cfg = TrainConfig::from_toml(&toml::to_string(&t)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn variant_value(name: &Option<String>) -> anyhow::Result<Option<toml::Value>> {
    match name {
        Some(n) => Ok(Some(toml::Value::String(n.parse::<Variant>()?.name().into()))),
        None => Ok(None),
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<(), Failure> {
    let int = |v: Option<usize>| v.map(|x| toml::Value::Integer(x as i64));
    let cfg = a.cfg.resolve(&[
        ("data.image_size", int(a.image_size)),
        ("data.joints", int(a.joints)),
        ("data.distractors", int(a.distractors)),
        ("data.occlusion_prob", a.occlusion_prob.map(toml::Value::Float)),
        ("data.blur_prob", a.blur_prob.map(toml::Value::Float)),
        ("data.v_max", a.v_max.map(toml::Value::Float)),
    ])?;
    let manifest = write_dataset(&a.out, a.seed, a.count, &cfg.data)?;
    let hash = hex::encode(Sha256::digest(manifest.as_bytes()));
    println!("wrote {} clips to {} (manifest {hash})", a.count, a.out.display());
    Ok(())
}

struct JsonLines(Mutex<fs::File>);

impl JsonLines {
    fn create(path: &Path) -> anyhow::Result<Self> {
        let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(JsonLines(Mutex::new(f)))
    }

    fn write(&self, r: &Record) {
        let line = serde_json::to_string(r).expect("records serialize");
        let mut f = self.0.lock().unwrap_or_else(|p| p.into_inner());
        let _ = writeln!(f, "{line}");
    }
}

fn prepare_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = a.cfg.resolve(&[
        ("variant", variant_value(&a.variant)?),
        ("seed", a.seed.map(|s| toml::Value::Integer(s as i64))),
    ])?;
    prepare_dir(&a.out)?;
    let cp = a.out.join(CONFIG_FILE);
    fs::write(&cp, cfg.to_toml()).with_context(|| format!("writing {}", cp.display()))?;
    let sink = JsonLines::create(&a.out.join(METRICS_FILE))?;
    eprintln!("training {} seed {} for {} iterations", cfg.variant, cfg.seed, cfg.iterations);
    let (trainer, report) = train(&cfg, &mut |r| sink.write(r))?;
    checkpoint::save(&trainer, &a.out.join(CHECKPOINT_FILE))?;
    write_json(&a.out.join(REPORT_FILE), &report)?;
    print_pck(&report.variant, &report.pck);
    println!("{}", metrics::METRIC_NOTE);
    Ok(())
}

fn write_json<S: serde::Serialize>(path: &Path, v: &S) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_pck(name: &str, pck: &[metrics::PckStats]) {
    let cols: Vec<String> = pck.iter().map(|p| format!("PCK@{} {:.3}", p.radius, p.mean)).collect();
    println!("{name}: {}", cols.join("  "));
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let cfg = TrainConfig::load(&a.run.join(CONFIG_FILE))?;
    let trainer = checkpoint::load(&a.run.join(CHECKPOINT_FILE), &cfg)?;
    let clips = match &a.data {
        Some(dir) => {
            let (data_cfg, clips) = read_dataset(dir)?;
            if data_cfg.image_size != cfg.data.image_size
                || data_cfg.joints != cfg.data.joints
                || data_cfg.delta != cfg.data.delta
            {
                return Err(anyhow::anyhow!(
                    "dataset geometry (size {}, joints {}, delta {}) does not match the run",
                    data_cfg.image_size,
                    data_cfg.joints,
                    data_cfg.delta
                )
                .into());
            }
            clips
        }
        None => Dataset::generate(&cfg)?.eval,
    };
    if clips.is_empty() {
        return Err(anyhow::anyhow!("no clips to evaluate").into());
    }
    let pck = trainer.evaluate(&clips)?;
    let rec = Record::Eval {
        variant: cfg.variant.name().into(),
        seed: cfg.seed,
        iteration: trainer.iteration,
        pck: pck.clone(),
        note: metrics::METRIC_NOTE.into(),
    };
    println!("{}", serde_json::to_string(&rec).map_err(anyhow::Error::from)?);
    print_pck(cfg.variant.name(), &pck);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<(), Failure> {
    let base = a.cfg.resolve(&[])?;
    let variants: Vec<Variant> = if a.variants.is_empty() {
        DEFAULT_VARIANTS.to_vec()
    } else {
        a.variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?
    };
    let sink = match &a.out {
        Some(dir) => {
            prepare_dir(dir)?;
            let cp = dir.join(CONFIG_FILE);
            fs::write(&cp, base.to_toml()).with_context(|| format!("writing {}", cp.display()))?;
            Some(JsonLines::create(&dir.join(METRICS_FILE))?)
        }
        None => None,
    };
    let report = run_ablation_suite(&base, &variants, &a.seeds, &|r| {
        if let Some(s) = &sink {
            s.write(r);
        }
    })?;
    if let Some(dir) = &a.out {
        write_json(&dir.join(REPORT_FILE), &report)?;
    }
    print!("{}", report.render());
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<(), Failure> {
    if a.list {
        for name in verify::list(&a.filter) {
            println!("{name}");
        }
        return Ok(());
    }
    if verify::list(&a.filter).is_empty() {
        bail_user(format!("filter {:?} selects no checks", a.filter.clone().unwrap_or_default()))?;
    }
    if let Some(f) = a.inject_fault {
        inject_fault(match f {
            FaultArg::ConvInputGradSign => Fault::ConvInputGradSign,
            FaultArg::SigmoidGradSign => Fault::SigmoidGradSign,
        });
    }
    let opts = VerifyOptions {
        filter: a.filter,
        ..VerifyOptions::default()
    };
    let json = a.json;
    let checks = verify::run(&opts, &mut |c| {
        if json {
            println!("{}", serde_json::to_string(c).expect("checks serialize"));
        } else {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            println!("{tag} {:<36} {:>7.2}s  {}", c.name, c.seconds, c.detail);
        }
    });
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    println!("{} of {} checks passed", checks.len() - failed.len(), checks.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("failing checks: {}", failed.join(", "))))
    }
}

fn bail_user(msg: String) -> Result<(), Failure> {
    let r: anyhow::Result<()> = (|| bail!(msg))();
    r.map_err(Failure::User)
}
