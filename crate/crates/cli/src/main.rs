//! `difflab`: train, sample and inspect small 2D diffusion models, or serve
//! them to the browser client.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use difflab_core::datasets::{strokes_to_dataset, Dataset};
use difflab_core::quality::quality_gate;
use difflab_core::store::{load_model_file, load_pretrained, pretrained_recipes, save_model, train_recipe};
use difflab_core::trainer::train_with_provenance;
use difflab_core::{DatasetKind, Model, Objective, SamplerKind, StoreError, StrokeSet, TrainConfig, TrainError};
use difflab_service::wire::{density_payload, model_space_trajectories, trajectory_payload, SamplerChoice};
use difflab_service::{ServiceConfig, DEFAULT_PORT};

const EXIT_USAGE: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "difflab", version, about = "Small 2D diffusion and flow-matching models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ObjectiveArg {
    #[value(alias = "noise")]
    NoisePrediction,
    #[value(alias = "flow")]
    FlowMatching,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::NoisePrediction => Objective::NoisePrediction,
            ObjectiveArg::FlowMatching => Objective::FlowMatching,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum SamplerArg {
    Ancestral,
    #[value(alias = "ddim")]
    Deterministic,
    #[value(alias = "euler")]
    EulerOde,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Ancestral => SamplerKind::Ancestral,
            SamplerArg::Deterministic => SamplerKind::Deterministic,
            SamplerArg::EulerOde => SamplerKind::EulerOde,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write it as a model file.
    Train {
        /// `three_dots`, `smiley`, or a JSON stroke file
        /// (`{"strokes": [[[x, y], ...]], "canvas": {"width": w, "height": h}}`).
        #[arg(long)]
        dataset: String,
        #[arg(long, value_enum)]
        objective: ObjectiveArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Dataset size.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Seed of the dataset draw.
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
        /// Jitter σ for stroke datasets, in normalized units.
        #[arg(long, default_value_t = 0.02)]
        jitter: f64,
        #[arg(long)]
        steps_per_epoch: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Sample trajectories from a model.
    Sample {
        /// Model file, or `pretrained:<name>`.
        #[arg(long)]
        model: String,
        #[arg(long, value_enum)]
        sampler: Option<SamplerArg>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the density grid and contours at one UI time.
    Density {
        /// Model file, or `pretrained:<name>`.
        #[arg(long)]
        model: String,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum)]
        sampler: Option<SamplerArg>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain the bundled pretrained models from their recipes.
    RegenPretrained {
        #[arg(long)]
        outdir: PathBuf,
        /// Only these models (repeatable).
        #[arg(long)]
        only: Vec<String>,
    },
    /// Run the session service.
    Serve {
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory with the browser client, served at `/`.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }
}

impl From<difflab_core::Error> for Failure {
    fn from(e: difflab_core::Error) -> Self {
        match e {
            difflab_core::Error::Contract(_) => Failure::runtime(e.to_string()),
            _ => Failure::usage(e.to_string()),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } | StoreError::Unsavable(_) => Failure::runtime(e.to_string()),
            _ => Failure::usage(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Invalid(inner) => inner.into(),
            diverged => Failure::runtime(diverged.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            dataset,
            objective,
            epochs,
            seed,
            out,
            n,
            data_seed,
            jitter,
            steps_per_epoch,
            batch_size,
            lr,
        } => {
            let d = TrainConfig::default();
            let config = TrainConfig {
                epochs: epochs.unwrap_or(d.epochs),
                steps_per_epoch: steps_per_epoch.unwrap_or(d.steps_per_epoch),
                batch_size: batch_size.unwrap_or(d.batch_size),
                lr: lr.unwrap_or(d.lr),
                seed,
                ..d
            };
            cmd_train(&dataset, n, data_seed, jitter, objective.into(), &config, &out)
        }
        Command::Sample {
            model,
            sampler,
            n,
            steps,
            seed,
            out,
        } => cmd_sample(&model, sampler.map(Into::into), n, steps, seed, out.as_deref()),
        Command::Density {
            model,
            t,
            n,
            seed,
            sampler,
            steps,
            out,
        } => cmd_density(&model, t, n, seed, sampler.map(Into::into), steps, out.as_deref()),
        Command::RegenPretrained { outdir, only } => cmd_regen(&outdir, &only),
        Command::Serve { port, host, static_dir } => cmd_serve(&host, port, static_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_dataset(spec: &str, n: usize, seed: u64, jitter: f64) -> Result<Dataset<f64>, Failure> {
    match spec {
        "three_dots" => Ok(Dataset::builtin(DatasetKind::ThreeDots, n, seed)?),
        "smiley" => Ok(Dataset::builtin(DatasetKind::Smiley, n, seed)?),
        path if Path::new(path).is_file() => {
            let text = std::fs::read(path).map_err(|e| Failure::runtime(format!("{path}: {e}")))?;
            let strokes: StrokeSet =
                serde_json::from_slice(&text).map_err(|e| Failure::usage(format!("{path}: not a stroke file: {e}")))?;
            Ok(strokes_to_dataset(&strokes, n, jitter, seed)?)
        }
        other => Err(Failure::usage(format!(
            "unknown dataset `{other}` (expected three_dots, smiley or a stroke file)"
        ))),
    }
}

fn load_model_arg(spec: &str) -> Result<Model, Failure> {
    match spec.strip_prefix("pretrained:") {
        Some(name) => Ok(load_pretrained(name)?),
        None => {
            if !Path::new(spec).is_file() {
                return Err(Failure::usage(format!("model file `{spec}` does not exist")));
            }
            Ok(load_model_file(spec)?)
        }
    }
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> CmdResult {
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|e| Failure::runtime(format!("{}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(bytes)
                .and_then(|_| stdout.write_all(b"\n"))
                .map_err(|e| Failure::runtime(format!("stdout: {e}")))
        }
    }
}

fn cmd_train(
    dataset: &str,
    n: usize,
    data_seed: u64,
    jitter: f64,
    objective: Objective,
    config: &TrainConfig,
    out: &Path,
) -> CmdResult {
    let data = load_dataset(dataset, n, data_seed, jitter)?;
    let epochs = config.epochs;
    let result = train_with_provenance(
        &data,
        n,
        data_seed,
        objective,
        config,
        |s| println!("epoch {}/{} loss {:.6}", s.epoch, epochs, s.mean_loss),
        None,
    )?;
    save_model(&result.model, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sample(
    model: &str,
    kind: Option<SamplerKind>,
    n: usize,
    steps: Option<usize>,
    seed: u64,
    out: Option<&Path>,
) -> CmdResult {
    let model = load_model_arg(model)?;
    let choice = SamplerChoice::resolve(&model, kind, steps)?;
    let payload = trajectory_payload(&model, choice, n, seed)?;
    write_output(out, &serde_json::to_vec(&payload).expect("payload serializes"))
}

fn cmd_density(
    model: &str,
    t: f64,
    n: usize,
    seed: u64,
    kind: Option<SamplerKind>,
    steps: Option<usize>,
    out: Option<&Path>,
) -> CmdResult {
    if !(0.0..=1.0).contains(&t) {
        return Err(Failure::usage(format!("--t must lie in [0, 1], got {t}")));
    }
    let model = load_model_arg(model)?;
    let choice = SamplerChoice::resolve(&model, kind, steps)?;
    let trajectories = Arc::new(model_space_trajectories(&model, choice, n, seed)?);
    let payload = density_payload(&model, choice, &trajectories, t, seed)?;
    write_output(out, &serde_json::to_vec(&payload).expect("payload serializes"))
}

fn cmd_regen(outdir: &Path, only: &[String]) -> CmdResult {
    let recipes = pretrained_recipes();
    if let Some(unknown) = only
        .iter()
        .find(|name| !recipes.iter().any(|r| r.name == name.as_str()))
    {
        return Err(Failure::usage(format!("unknown pretrained model `{unknown}`")));
    }
    std::fs::create_dir_all(outdir).map_err(|e| Failure::runtime(format!("{}: {e}", outdir.display())))?;
    let mut failed = Vec::new();
    for recipe in recipes
        .iter()
        .filter(|r| only.is_empty() || only.iter().any(|n| n == r.name))
    {
        let started = std::time::Instant::now();
        let model = train_recipe(recipe, |s| {
            if s.epoch % 10 == 0 {
                eprintln!(
                    "{}: epoch {}/{} loss {:.6}",
                    recipe.name, s.epoch, recipe.train.epochs, s.mean_loss
                );
            }
        })?;
        let path = outdir.join(format!("{}.json", recipe.name));
        save_model(&model, &path)?;
        let report = quality_gate(&model, recipe.dataset, 0)?;
        let near = report
            .near_centers
            .map(|f| format!(" near_centers {f:.4}"))
            .unwrap_or_default();
        println!(
            "{} {:.1}s energy_distance {:.5}{near} {}",
            recipe.name,
            started.elapsed().as_secs_f64(),
            report.energy_distance,
            if report.passed { "pass" } else { "FAIL" }
        );
        if !report.passed {
            failed.push(recipe.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "quality gate failed for {}",
            failed.join(", ")
        )))
    }
}

fn cmd_serve(host: &str, port: u16, static_dir: Option<PathBuf>) -> CmdResult {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    if let Some(dir) = &static_dir {
        if !dir.is_dir() {
            return Err(Failure::usage(format!(
                "static directory `{}` does not exist",
                dir.display()
            )));
        }
    }
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::runtime(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| Failure::runtime(format!("cannot bind {host}:{port}: {e}")))?;
        let config = ServiceConfig {
            static_dir,
            ..ServiceConfig::default()
        };
        difflab_service::serve(listener, config)
            .await
            .map_err(|e| Failure::runtime(format!("server error: {e}")))
    })
}
