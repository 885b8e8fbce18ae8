use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use repspace::harness::{
    emit_report, export_stepwise_trace, run_experiment, run_stepwise_experiment, AnalyzeTraceSpec,
    EstimateSpec, ExperimentSpec, InterveneSpec, PromptSource, Report, ReportFormat, StepwiseSpec,
};
use repspace::pruning::PruneSpec;
use repspace::toylm::{Decode, ToyConfig, ToyModel};
use repspace::{Error, Result};

#[derive(Parser)]
#[command(
    name = "repspace",
    version,
    about = "Measure how compression perturbs embedding, logit and probability spaces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convergence probe of the second-order estimators.
    Estimate(EstimateArgs),
    /// Single-layer intervention sweep on a toy model.
    Intervene(InterveneArgs),
    /// Step-wise divergence between a toy model and its compressed copy.
    Stepwise(StepwiseArgs),
    /// Analyze an external baseline/pruned trace.
    AnalyzeTrace(AnalyzeArgs),
    /// Run an experiment described by a JSON spec (e.g. a report's `metadata.spec`).
    Run(RunArgs),
    /// Save or inspect a toy model binary.
    Model {
        #[command(subcommand)]
        action: ModelAction,
    },
}

#[derive(Args)]
struct Output {
    /// Destination file; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format; inferred from the `--out` extension when omitted.
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct ModelSource {
    /// Toy model configuration (JSON).
    #[arg(long, conflicts_with = "seed")]
    config: Option<PathBuf>,
    /// Seed for the default configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.05,0.025")]
    epsilons: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    temperature: Vec<f64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct InterveneArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Prune spec: a JSON file, or inline JSON starting with `{`.
    #[arg(long)]
    prune: String,
    /// Prompt file: one comma-separated token list per line.
    #[arg(long, conflicts_with = "prompt_seed")]
    prompts: Option<PathBuf>,
    /// Seed for 4 random prompts of 16 tokens.
    #[arg(long)]
    prompt_seed: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[command(flatten)]
    output: Output,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecodeKind {
    Greedy,
    Sample,
}

#[derive(Args)]
struct StepwiseArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long)]
    prune: String,
    #[arg(long, value_delimiter = ',', required = true)]
    prompt: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, value_enum, default_value = "greedy")]
    decode: DecodeKind,
    #[arg(long, default_value_t = 0)]
    decode_seed: u64,
    /// Sampling temperature; defaults to `--temperature`.
    #[arg(long)]
    decode_temperature: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Also export both runs' final outputs as a trace manifest at this path.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Temperatures; the manifest default when omitted.
    #[arg(long, value_delimiter = ',')]
    temperature: Vec<f64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    spec: PathBuf,
    #[command(flatten)]
    output: Output,
}

#[derive(Subcommand)]
enum ModelAction {
    /// Initialize a model and write it in the TOYLM1 format.
    Save {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        path: PathBuf,
    },
    /// Read a TOYLM1 file and print its configuration; optionally compare to a freshly initialized model.
    Load {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        path: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: format!("invalid {what}: {e}"),
    })
}

impl ModelSource {
    fn given(&self) -> bool {
        self.config.is_some() || self.seed.is_some()
    }

    fn resolve(&self) -> Result<ToyConfig> {
        let config = match &self.config {
            Some(p) => read_json(p, "model config")?,
            None => ToyConfig::with_seed(self.seed.unwrap_or(0)),
        };
        config.validate()?;
        Ok(config)
    }
}

fn load_prune(arg: &str) -> Result<PruneSpec> {
    if arg.trim_start().starts_with('{') {
        PruneSpec::from_json(arg)
    } else {
        PruneSpec::load(Path::new(arg))
    }
}

fn read_prompts(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut prompts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let prompt = line
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("bad token: {e}"),
            })?;
        prompts.push(prompt);
    }
    if prompts.is_empty() {
        return Err(Error::Validation(format!("{}: no prompts", path.display())));
    }
    Ok(prompts)
}

fn write_output(report: &Report, output: &Output) -> Result<()> {
    let format = match (output.format, &output.out) {
        (Some(Format::Csv), _) => ReportFormat::Csv,
        (Some(Format::Json), _) => ReportFormat::Json,
        (None, Some(p)) if p.extension().is_some_and(|e| e == "json") => ReportFormat::Json,
        _ => ReportFormat::Csv,
    };
    for w in &report.metadata.warnings {
        eprintln!("warning: {w}");
    }
    match &output.out {
        None => {
            print!("{}", report.render(format)?);
            Ok(())
        }
        Some(path) => {
            emit_report(report, format, path)?;
            if format == ReportFormat::Csv {
                // CSV carries rows only; metadata goes alongside
                let mut meta = path.clone().into_os_string();
                meta.push(".meta.json");
                let meta = PathBuf::from(meta);
                let text = serde_json::to_string_pretty(&report.metadata).expect("plain data");
                std::fs::write(&meta, text + "\n").map_err(|e| Error::io(&meta, e))?;
            }
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Estimate(a) => {
            let spec = ExperimentSpec::Estimate(EstimateSpec {
                seed: a.seed,
                vocab: a.vocab,
                trials: a.trials,
                epsilons: a.epsilons,
                temperatures: a.temperature,
                direction: Default::default(),
                pairs: Vec::new(),
            });
            write_output(&run_experiment(&spec)?, &a.output)
        }
        Command::Intervene(a) => {
            let model = a.model.resolve()?;
            let prompts = match (&a.prompts, a.prompt_seed) {
                (Some(p), _) => PromptSource::Explicit {
                    prompts: read_prompts(p)?,
                },
                (None, seed) => PromptSource::seeded(seed.unwrap_or(0)),
            };
            let spec = ExperimentSpec::Intervene(InterveneSpec {
                model,
                prune: load_prune(&a.prune)?,
                prompts,
                temperature: a.temperature,
            });
            write_output(&run_experiment(&spec)?, &a.output)
        }
        Command::Stepwise(a) => {
            let decode = match a.decode {
                DecodeKind::Greedy => Decode::Greedy,
                DecodeKind::Sample => Decode::Sample {
                    temperature: a.decode_temperature.unwrap_or(a.temperature),
                    seed: a.decode_seed,
                },
            };
            let spec = StepwiseSpec {
                model: a.model.resolve()?,
                prune: load_prune(&a.prune)?,
                prompt: a.prompt,
                steps: a.steps,
                decode,
                temperature: a.temperature,
            };
            let (report, run) = run_stepwise_experiment(&spec)?;
            if let Some(manifest) = &a.trace_out {
                let stem = manifest
                    .file_stem()
                    .map_or("trace".into(), |s| s.to_string_lossy().into_owned());
                export_stepwise_trace(&run, spec.temperature, manifest, &format!("{stem}.jsonl"))?;
            }
            write_output(&report, &a.output)
        }
        Command::AnalyzeTrace(a) => {
            let spec = ExperimentSpec::AnalyzeTrace(AnalyzeTraceSpec {
                manifest: a.manifest,
                temperatures: a.temperature,
            });
            write_output(&run_experiment(&spec)?, &a.output)
        }
        Command::Run(a) => {
            let spec: ExperimentSpec = read_json(&a.spec, "experiment spec")?;
            write_output(&run_experiment(&spec)?, &a.output)
        }
        Command::Model { action } => match action {
            ModelAction::Save { model, path } => {
                let config = model.resolve()?;
                ToyModel::init(config)?.save(&path)
            }
            ModelAction::Load { model, path } => {
                let loaded = ToyModel::load(&path)?;
                let summary = serde_json::json!({
                    "path": path,
                    "config": loaded.config(),
                });
                println!(
                    "{}",
                    serde_json::to_string_pretty(&summary).expect("plain data")
                );
                if model.given() {
                    let fresh = ToyModel::init(model.resolve()?)?;
                    if fresh != loaded {
                        return Err(Error::Validation(format!(
                            "{} differs from the model initialized from the given configuration",
                            path.display()
                        )));
                    }
                }
                Ok(())
            }
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
