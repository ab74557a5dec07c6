use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{Map, Value};

use catn::checkpoint::{load_checkpoint, save_checkpoint};
use catn::data::{gen_gaussian_shift_pair, gen_two_moons_pair, load_csv, load_pair_csv, save_pair_csv, ShiftKind, ShiftSpec};
use catn::gradcheck::{run_suite, CheckSettings, COMPONENTS};
use catn::tensor::Tensor;
use catn::trainer::{ablation_run, evaluate, train, write_metrics_csv, AblationMode, TrainConfig};

const EXIT_CHECK: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_ABORT: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "catn", version, about = "Conditional adversarial transfer with cycle-consistent feature translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic source/target pair as two CSV files.
    Gen(GenArgs),
    /// Train one model and write metrics, a checkpoint and a run manifest.
    Train(TrainArgs),
    /// Report the accuracy of a checkpoint on a labeled CSV file.
    Eval(EvalArgs),
    /// Train every ablation mode over several seeds and tabulate target accuracy.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    TwoMoons,
    Gaussian,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "two-moons")]
    kind: Kind,
    /// Samples per domain.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Target rotation in degrees (2-D inputs only).
    #[arg(long, default_value_t = 45.0)]
    rotation: f64,
    /// Per-coordinate scale of the target affine shift.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Offset added to every target coordinate.
    #[arg(long, default_value_t = 0.0)]
    translate: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Number of classes for the gaussian kind.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Input dimension for the gaussian kind.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives source.csv and target.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Overrides shared by `train` and `ablate`. Precedence, lowest first:
/// built-in defaults, then the `--config` JSON file, then these flags.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// Flat JSON object keyed by training-config field names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Total optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    eta1: Option<f64>,
    #[arg(long)]
    eta2: Option<f64>,
    /// Print the fully resolved config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
struct DataFlags {
    /// Labeled source CSV.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Target CSV; labels are used only for evaluation.
    #[arg(long)]
    target: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    cfg: ConfigFlags,
    /// One of S0..S4.
    #[arg(long)]
    ablation: Option<AblationMode>,
    /// Seed for initialization, batching and random maps.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for metrics.csv, model.ckpt and manifest.json.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled CSV to evaluate on.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    cfg: ConfigFlags,
    /// First seed; runs use seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of seeds per mode (at least 2).
    #[arg(long, default_value_t = 5)]
    runs: usize,
    /// Output directory for ablation.csv.
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
    /// Exit with status 1 when mean(S3) < mean(S0).
    #[arg(long)]
    assert_trend: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Restrict the check to these components (repeatable).
    #[arg(long = "component")]
    components: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Marks errors that should exit with a specific status.
#[derive(Debug)]
struct Exit {
    code: u8,
    msg: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Exit {}

fn fail(code: u8, msg: impl Into<String>) -> anyhow::Error {
    Exit { code, msg: msg.into() }.into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Exit>() {
        return e.code;
    }
    match err.downcast_ref::<catn::Error>() {
        Some(catn::Error::Aborted { .. } | catn::Error::NonFinite { .. } | catn::Error::Checkpoint(_)) => EXIT_ABORT,
        _ => EXIT_USAGE,
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    version: String,
    status: &'a str,
    seed: u64,
    config: &'a TrainConfig,
    started_unix_ms: u128,
    finished_unix_ms: Option<u128>,
    outputs: Vec<PathBuf>,
    error: Option<String>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn version_string() -> String {
    match option_env!("CATN_GIT_DESCRIBE") {
        Some(d) => d.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(m)?)
}

/// Merges defaults, the optional JSON file and explicit flags, in that order.
fn resolve_config(flags: &ConfigFlags, extra: &[(&str, Value)]) -> Result<TrainConfig> {
    let Value::Object(mut map) = serde_json::to_value(TrainConfig::default())? else {
        unreachable!("a struct serializes to an object")
    };
    let known: Vec<String> = map.keys().cloned().collect();
    if let Some(path) = &flags.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let file: Map<String, Value> =
            serde_json::from_str(&text).with_context(|| format!("{} is not a flat JSON object", path.display()))?;
        for (k, v) in file {
            if !known.contains(&k) {
                return Err(fail(EXIT_USAGE, format!("{}: unknown config key {k:?}", path.display())));
            }
            map.insert(k, v);
        }
    }
    let num = |x: f64| serde_json::json!(x);
    let overrides = [
        ("lr", flags.lr.map(num)),
        ("momentum", flags.momentum.map(num)),
        ("weight_decay", flags.weight_decay.map(num)),
        ("batch_size", flags.batch_size.map(Value::from)),
        ("total_steps", flags.steps.map(Value::from)),
        ("eval_every", flags.eval_every.map(Value::from)),
        ("lambda", flags.lambda.map(num)),
        ("beta", flags.beta.map(num)),
        ("eta1", flags.eta1.map(num)),
        ("eta2", flags.eta2.map(num)),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            map.insert(k.to_string(), v);
        }
    }
    for (k, v) in extra {
        map.insert(k.to_string(), v.clone());
    }
    let cfg: TrainConfig = serde_json::from_value(Value::Object(map)).context("config does not match the schema")?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(flags: &DataFlags) -> Result<catn::data::DomainPair> {
    let (Some(s), Some(t)) = (&flags.source, &flags.target) else {
        return Err(fail(EXIT_USAGE, "both --source and --target are required"));
    };
    for p in [s, t] {
        if !p.exists() {
            return Err(fail(EXIT_USAGE, format!("dataset {} does not exist", p.display())));
        }
    }
    Ok(load_pair_csv(s, t)?)
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let kind = match (a.rotation != 0.0, a.scale != 1.0 || a.translate != 0.0) {
        (_, false) => ShiftKind::Rotation,
        (false, true) => ShiftKind::Affine,
        (true, true) => ShiftKind::Both,
    };
    let dim = if a.kind == Kind::TwoMoons { 2 } else { a.dim };
    let shift = ShiftSpec {
        kind,
        rotation_deg: a.rotation,
        scale: vec![a.scale; dim],
        translate: vec![a.translate; dim],
        noise_std: a.noise,
    };
    let pair = match a.kind {
        Kind::TwoMoons => gen_two_moons_pair(a.n, &shift, a.seed)?,
        Kind::Gaussian => {
            // Class means on the coordinate axes, spaced 3 apart, unit covariance.
            let means: Vec<Vec<f64>> = (0..a.classes)
                .map(|c| (0..a.dim).map(|j| if j == c % a.dim { 3.0 * (1 + c / a.dim) as f64 } else { 0.0 }).collect())
                .collect();
            let eye = Tensor::identity(a.dim);
            let covs = vec![eye; a.classes];
            gen_gaussian_shift_pair(a.n, a.classes, &means, &covs, &shift, a.seed)?
        }
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (s, t) = (a.out.join("source.csv"), a.out.join("target.csv"));
    save_pair_csv(&pair, &s, &t)?;
    println!(
        "wrote {} and {}: n={} per domain, C={}, shift={:?} rotation={} scale={} translate={} noise={}",
        s.display(),
        t.display(),
        a.n,
        pair.num_classes(),
        shift.kind,
        shift.rotation_deg,
        a.scale,
        a.translate,
        shift.noise_std
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(m) = a.ablation {
        extra.push(("ablation_mode", serde_json::to_value(m)?));
    }
    if let Some(s) = a.seed {
        extra.push(("seed", Value::from(s)));
    }
    let mut cfg = resolve_config(&a.cfg, &extra)?;
    if a.cfg.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let data = load_data(&a.data)?;
    // Input width and class count always follow the data.
    cfg.arch.input_dim = data.input_dim();
    cfg.arch.num_classes = data.num_classes();

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let metrics = a.out.join("metrics.csv");
    let ckpt = a.out.join("model.ckpt");
    let manifest_path = a.out.join("manifest.json");
    let mut manifest = RunManifest {
        version: version_string(),
        status: "running",
        seed: cfg.seed(),
        config: &cfg,
        started_unix_ms: now_ms(),
        finished_unix_ms: None,
        outputs: vec![metrics.clone(), ckpt.clone()],
        error: None,
    };
    write_manifest(&manifest_path, &manifest)?;

    let outcome = match train(&cfg, &data) {
        Ok(o) => o,
        Err(e) => {
            if let catn::Error::Aborted { diagnostic, .. } = &e {
                let diag = a.out.join("abort_diagnostic.json");
                write_atomic(&diag, diagnostic.as_bytes())?;
                eprintln!("diagnostic written to {}", diag.display());
            }
            manifest.status = "aborted";
            manifest.finished_unix_ms = Some(now_ms());
            manifest.error = Some(e.to_string());
            write_manifest(&manifest_path, &manifest)?;
            return Err(e.into());
        }
    };
    write_metrics_csv(&metrics, &outcome.history)?;
    save_checkpoint(&outcome.suite, &cfg, outcome.steps, &ckpt)?;
    manifest.status = "completed";
    manifest.finished_unix_ms = Some(now_ms());
    write_manifest(&manifest_path, &manifest)?;

    let last = outcome.last().ok_or_else(|| anyhow!("training produced no metrics"))?;
    let target = last.target_acc.map_or("n/a".to_string(), |t| format!("{t:.4}"));
    println!("source_acc {:.4} target_acc {target}", last.source_acc);
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if !a.data.exists() {
        return Err(fail(EXIT_USAGE, format!("dataset {} does not exist", a.data.display())));
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    let (x, y) = load_csv(&a.data)?;
    let Some(y) = y else {
        return Err(fail(EXIT_USAGE, format!("{} has no label column; accuracy needs labels", a.data.display())));
    };
    let acc = evaluate(&ck.suite, &x, Some(&y))?;
    println!("accuracy {acc:.4}");
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = resolve_config(&a.cfg, &[])?;
    if a.cfg.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    if a.runs < 2 {
        return Err(fail(EXIT_USAGE, "--runs must be at least 2"));
    }
    let data = load_data(&a.data)?;
    let mut cfg = cfg;
    cfg.arch.input_dim = data.input_dim();
    cfg.arch.num_classes = data.num_classes();
    let seeds: Vec<u64> = (a.seed..a.seed + a.runs as u64).collect();
    let table = ablation_run(&cfg, &data, &seeds, &AblationMode::ALL)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    table.write_csv(&a.out.join("ablation.csv"))?;
    println!("mode  mean    std");
    for r in &table.rows {
        println!("{}    {:.4}  {:.4}", r.mode.name(), r.mean, r.std);
    }
    if a.assert_trend {
        let (s0, s3) = (table.mean(AblationMode::S0), table.mean(AblationMode::S3));
        if let (Some(s0), Some(s3)) = (s0, s3) {
            if s3 < s0 {
                return Err(fail(EXIT_CHECK, format!("trend check failed: mean S3 {s3:.4} < mean S0 {s0:.4}")));
            }
        }
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    if let Some(bad) = a.components.iter().find(|c| !COMPONENTS.contains(&c.as_str())) {
        return Err(fail(EXIT_USAGE, format!("unknown component {bad:?}; known: {}", COMPONENTS.join(", "))));
    }
    let settings = CheckSettings { eps: a.eps, tol: a.tol };
    let reports = run_suite(&a.components, settings, a.seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.report.passed { "ok  " } else { "FAIL" };
        println!("{verdict} {:<24} max_rel_error {:.3e}  worst {}", r.name, r.report.max_rel_error, r.worst_location);
        if !r.report.passed {
            failed.push(format!("{} at {}", r.name, r.worst_location));
        }
    }
    if !failed.is_empty() {
        return Err(fail(EXIT_CHECK, format!("gradient check failed (tol {}): {}", a.tol, failed.join("; "))));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
