//! `can`: generate toy domain-shift datasets, train and evaluate CAN models,
//! run ablation sweeps and the finite-difference gradient suite.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use can_core::data::{gen_blobs, gen_moons, BlobParams, MoonParams, Shift};
use can_core::gradcheck::{run_gradcheck, GradcheckOptions};
use can_core::run::{self, DatasetManifest, RunManifest, DATASET_MANIFEST_FILE};
use can_core::trainer::evaluate;
use can_core::{Dataset, GeneratedPair, Method, Mlp, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{Map, Value};

type CliResult<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "can", version, about = "Contrastive adaptation network training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded source/target dataset pair.
    Gen(GenArgs),
    /// Train one method and write a run directory.
    Train(TrainArgs),
    /// Accuracy of a checkpoint on a labeled CSV.
    Eval(EvalArgs),
    /// Train every method over a range of seeds and tabulate target accuracy.
    Ablate(AblateArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Moons,
    Blobs,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    kind: Kind,
    /// Output directory for source.csv, target.csv and dataset.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    /// Target rotation in degrees.
    #[arg(long, default_value_t = 0.0)]
    rotation: f64,
    /// Sample noise (standard deviation).
    #[arg(long)]
    noise: Option<f64>,
    /// Blobs only.
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Blobs only.
    #[arg(long, default_value_t = 2)]
    dims: usize,
    /// Blobs only: distance of the class means from the origin.
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
    /// Blobs only: target offset along the diagonal.
    #[arg(long, default_value_t = 0.0)]
    translation: f64,
    /// Blobs only: target scale of the class means.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

/// Flags that override fields of the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d0: Option<f64>,
    #[arg(long)]
    n0: Option<usize>,
    /// Updates per outer loop.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    loops: Option<usize>,
    #[arg(long)]
    pretrain_steps: Option<usize>,
    #[arg(long)]
    eta0: Option<f64>,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding source.csv and target.csv (as written by `gen`).
    #[arg(long, conflicts_with_all = ["source", "target"])]
    data: Option<PathBuf>,
    #[arg(long, requires = "target")]
    source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
}

impl DataArgs {
    fn paths(&self) -> Option<(PathBuf, PathBuf)> {
        match (&self.data, &self.source, &self.target) {
            (Some(d), _, _) => Some((d.join("source.csv"), d.join("target.csv"))),
            (None, Some(s), Some(t)) => Some((s.clone(), t.clone())),
            _ => None,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Reproduce a previous run from its manifest.json.
    #[arg(long, conflicts_with_all = ["config", "data", "source", "target", "method", "beta", "seed", "d0", "n0", "k", "loops", "pretrain_steps", "eta0"])]
    manifest: Option<PathBuf>,
    /// JSON file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled dataset CSV.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Directory receiving one run directory per method and seed, plus ablation.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of seeds, starting at --first-seed.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Comma-separated subset of methods (default: all seven).
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    rtol: f64,
    /// Instances per component.
    #[arg(long, default_value_t = 10)]
    instances: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}\n\nFor more information, try '--help'.");
    ExitCode::from(2)
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> CliResult<ExitCode> {
    let pair: GeneratedPair = match a.kind {
        Kind::Moons => gen_moons(
            a.seed,
            &MoonParams {
                per_class: a.per_class,
                rotation: a.rotation.to_radians(),
                noise: a.noise.unwrap_or(0.05),
            },
        )?,
        Kind::Blobs => gen_blobs(
            a.seed,
            &BlobParams {
                classes: a.classes,
                per_class: a.per_class,
                dims: a.dims,
                radius: a.radius,
                shift: Shift {
                    rotation: a.rotation.to_radians(),
                    translation: a.translation,
                    scale: a.scale,
                    noise: a.noise.unwrap_or(Shift::default().noise),
                },
            },
        )?,
    };
    std::fs::create_dir_all(&a.out)?;
    pair.source.save_csv(&a.out.join("source.csv"))?;
    pair.target.save_csv(&a.out.join("target.csv"))?;
    let manifest = DatasetManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        generator: pair.meta,
        source: "source.csv".into(),
        target: "target.csv".into(),
    };
    run::write_json(&a.out.join(DATASET_MANIFEST_FILE), &manifest)?;
    Ok(ExitCode::SUCCESS)
}

/// Config file (if any) with flag overrides applied on top.
fn resolve_config(file: Option<&Path>, o: &Overrides) -> CliResult<TrainConfig> {
    let mut tree = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str::<Value>(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => Value::Object(Map::new()),
    };
    let obj = tree.as_object_mut().ok_or("config file must hold a JSON object")?;
    let mut set = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            obj.insert(key.to_string(), v);
        }
    };
    set("method", o.method.map(|m| Value::from(m.as_str())));
    set("beta", o.beta.map(Value::from));
    set("seed", o.seed.map(Value::from));
    set("d0", o.d0.map(Value::from));
    set("n0", o.n0.map(Value::from));
    set("k", o.k.map(Value::from));
    set("loops", o.loops.map(Value::from));
    set("pretrain_steps", o.pretrain_steps.map(Value::from));
    set("eta0", o.eta0.map(Value::from));
    let config: TrainConfig = serde_json::from_value(tree).map_err(|e| format!("invalid config: {e}"))?;
    config.validate()?;
    Ok(config)
}

fn cmd_train(a: &TrainArgs) -> CliResult<ExitCode> {
    let manifest = match &a.manifest {
        Some(p) => RunManifest::load(p)?,
        None => {
            let Some((source, target)) = a.data.paths() else {
                return Ok(usage_error("train needs --data, --source/--target or --manifest"));
            };
            let config = resolve_config(a.config.as_deref(), &a.overrides)?;
            RunManifest::new(config, &source, &target)
        }
    };
    let outcome = run::execute(&manifest, &a.out)?;
    print_json(&outcome.summary)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    accuracy: f64,
    per_class_accuracy: Vec<Option<f64>>,
    mean_class_accuracy: f64,
}

fn cmd_eval(a: &EvalArgs) -> CliResult<ExitCode> {
    let params = Mlp::load(&a.checkpoint)?;
    let data = Dataset::load_csv(&a.data)?;
    let e = evaluate(&params, &data)?;
    print_json(&EvalReport {
        samples: data.len(),
        accuracy: e.accuracy,
        per_class_accuracy: e.per_class,
        mean_class_accuracy: e.mean_class_accuracy,
    })?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct MethodRow {
    method: Method,
    mean_target_accuracy: f64,
    target_accuracy: Vec<f64>,
    final_cdd_g: Vec<Option<f64>>,
}

fn cmd_ablate(a: &AblateArgs) -> CliResult<ExitCode> {
    let Some((source, target)) = a.data.paths() else {
        return Ok(usage_error("ablate needs --data or --source/--target"));
    };
    if a.seeds == 0 {
        return Ok(usage_error("--seeds must be at least 1"));
    }
    let methods = if a.methods.is_empty() { Method::ALL.to_vec() } else { a.methods.clone() };
    let mut rows = Vec::new();
    for method in methods {
        let mut row = MethodRow {
            method,
            mean_target_accuracy: 0.0,
            target_accuracy: Vec::new(),
            final_cdd_g: Vec::new(),
        };
        for seed in a.first_seed..a.first_seed + a.seeds {
            let overrides = Overrides {
                method: Some(method),
                seed: Some(seed),
                ..Default::default()
            };
            let config = resolve_config(a.config.as_deref(), &overrides)?;
            let manifest = RunManifest::new(config, &source, &target);
            let dir = a.out.join(format!("{}-seed{seed}", method.as_str()));
            let s = run::execute(&manifest, &dir)?.summary;
            let acc = s.final_target_accuracy.ok_or("ablation needs a labeled target set")?;
            row.target_accuracy.push(acc);
            row.final_cdd_g.push(s.final_cdd_g);
        }
        row.mean_target_accuracy = row.target_accuracy.iter().sum::<f64>() / row.target_accuracy.len() as f64;
        eprintln!("{:<12} mean target accuracy {:.4}", method.as_str(), row.mean_target_accuracy);
        rows.push(row);
    }
    run::write_json(&a.out.join("ablation.json"), &rows)?;
    print_json(&rows)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult<ExitCode> {
    if a.instances == 0 || !(a.rtol > 0.0) {
        return Ok(usage_error("--instances must be >= 1 and --rtol > 0"));
    }
    let report = run_gradcheck(&GradcheckOptions {
        seed: a.seed,
        instances: a.instances,
        rtol: a.rtol,
        ..Default::default()
    })?;
    for c in &report.components {
        eprintln!(
            "{:<14} {} ({} instances, {} entries) max relative error {:.3e}",
            c.component,
            if c.passed { "PASS" } else { "FAIL" },
            c.instances,
            c.entries,
            c.max_rel_error
        );
    }
    print_json(&report)?;
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
