use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use thiserror::Error;

use deliberant::agents::{AgentError, TaskInput};
use deliberant::backends::{SyntheticBackendConfig, SyntheticEmbedder};
use deliberant::benchmark::{generate_benchmark, BenchmarkError, HopRange};
use deliberant::config::{BackendKind, Config, ConfigError, Runtime};
use deliberant::dataset::{read_jsonl, DatasetError, TaskRecord};
use deliberant::math::{GaussianPolicy, MathError};
use deliberant::orchestrator::{evaluate, DeliberationEnvironment, EvalConfig, OrchestratorError, TraceWriter};
use deliberant::retrieval::{KnowledgeBase, RawKnowledgeItem, RetrievalError};
use deliberant::training::{train, write_curve_csv, Checkpoint, TrainError, TrainOptions};

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Benchmark(#[from] BenchmarkError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Parser)]
#[command(name = "deliberant", version, about = "Multi-agent deliberation with retrieval verification and PPO training")]
struct Cli {
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for concurrent deliberations.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Knowledge-base utilities.
    Kb {
        #[command(subcommand)]
        action: KbAction,
    },
    /// Deliberate once on a single question.
    Run(RunArgs),
    /// Train the viewpoint policy with PPO.
    Train(TrainArgs),
    /// Evaluate accuracy, consistency and time on a labelled dataset.
    Eval(EvalArgs),
    /// Generate a synthetic multi-hop benchmark.
    Bench(BenchArgs),
}

#[derive(Debug, Subcommand)]
enum KbAction {
    /// Embed a JSONL corpus of `{id, text}` rows.
    Build {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Take the embedder from this config instead of the default synthetic one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    question: String,
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Append the deliberation trace to this JSONL file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    curve: PathBuf,
    /// Training tasks; overrides `train_dataset` in the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Save the trained policy here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Deliberations per task; overrides the config.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    chains: usize,
    /// Hop count `H` or range `MIN-MAX`.
    #[arg(long)]
    hops: HopRange,
    #[arg(long)]
    distractors: usize,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(path: &Path, seed: Option<u64>, parallel: Option<usize>) -> Result<Config, CliError> {
    let mut config = Config::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if parallel.is_some() {
        config.parallel = parallel;
    }
    config.validate()?;
    if let Some(n) = config.parallel {
        // a no-op when --parallel already sized the pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(config)
}

fn reference_policy(rt: &Runtime) -> Result<GaussianPolicy, CliError> {
    let p = &rt.config.policy;
    Ok(GaussianPolicy::isotropic(rt.base.dim(), p.mean, p.variance)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(DatasetError::from)?;
    std::fs::write(path, text + "\n").map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn kb_build(input: &Path, output: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let raw: Vec<RawKnowledgeItem> = read_jsonl(input)?;
    let config = match config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let (alpha, m) = (config.retrieval.alpha, config.retrieval.m);
    let base = match config.backend.kind {
        BackendKind::Synthetic => {
            let SyntheticBackendConfig {
                dim,
                embed_seed,
                anisotropy,
                ..
            } = config.backend.synthetic;
            KnowledgeBase::build(raw, &SyntheticEmbedder::new(dim, embed_seed, anisotropy), alpha, m)?
        }
        BackendKind::Http => {
            let backend = deliberant::backends::HttpBackend::new(config.backend.endpoint.clone(), Vec::new())
                .map_err(ConfigError::from)?;
            KnowledgeBase::build(raw, &backend, alpha, m)?
        }
    };
    base.save(output)?;
    eprintln!("embedded {} items (dim {}) into {}", base.len(), base.dim(), output.display());
    Ok(())
}

fn run(args: RunArgs, seed: Option<u64>, parallel: Option<usize>) -> Result<(), CliError> {
    let config = load_config(&args.config, seed, parallel)?;
    let rt = Runtime::build(config, args.kb.as_deref())?;
    let task = TaskInput::new("cli", args.question.as_str(), None, None, rt.backend.as_ref())?;
    let policy = rt.initial_policy()?;
    let reference = reference_policy(&rt)?;
    let d = rt.pipeline().deliberate(&task, &policy, &reference, rt.config.seed)?;
    if let Some(path) = &args.trace {
        TraceWriter::new(path).write(&d.trace)?;
    }
    let out = serde_json::json!({
        "answer": d.conclusion.answer,
        "text": d.conclusion.text,
        "coherence": d.conclusion.coherence,
        "degraded": d.conclusion.degraded,
        "reward": d.reward,
    });
    println!("{}", serde_json::to_string_pretty(&out).map_err(DatasetError::from)?);
    Ok(())
}

fn train_cmd(args: TrainArgs, seed: Option<u64>, parallel: Option<usize>) -> Result<(), CliError> {
    let config = load_config(&args.config, seed, parallel)?;
    let dataset = args
        .dataset
        .clone()
        .or_else(|| config.train_dataset.clone())
        .ok_or_else(|| CliError::Usage("train needs --dataset or `train_dataset` in the config".into()))?;
    let rt = Runtime::build(config, args.kb.as_deref())?;
    let records: Vec<TaskRecord> = read_jsonl(&dataset)?;
    let tasks = rt.tasks(&records)?;
    let initial = rt.initial_policy()?;
    let env = DeliberationEnvironment {
        pipeline: rt.pipeline(),
        tasks: &tasks,
    };
    let options = TrainOptions {
        constant_reward: rt.config.ablation.constant_reward,
    };
    let out = train(&env, &rt.config.training, &initial, args.steps, rt.config.seed, options)?;
    write_curve_csv(&args.curve, &out.curve)?;
    if let Some(path) = &args.checkpoint {
        Checkpoint::from_policy(&out.policy).save(path)?;
    }
    if let Some(last) = out.curve.last() {
        eprintln!(
            "trained {} steps: mean reward {:.4}, entropy {:.4}",
            args.steps, last.mean_reward, last.entropy
        );
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs, seed: Option<u64>, parallel: Option<usize>) -> Result<(), CliError> {
    let config = load_config(&args.config, seed, parallel)?;
    let rt = Runtime::build(config, args.kb.as_deref())?;
    let records: Vec<TaskRecord> = read_jsonl(&args.dataset)?;
    if let Some(r) = records.iter().find(|r| r.answer.is_none()) {
        return Err(OrchestratorError::MissingGoldAnswers(r.id.clone()).into());
    }
    let tasks = rt.tasks(&records)?;
    let policy = rt.initial_policy()?;
    let reference = reference_policy(&rt)?;
    let eval = EvalConfig {
        runs_per_task: args.runs.unwrap_or(rt.config.eval.runs_per_task),
        ..rt.config.eval
    };
    let traces = args.trace.as_ref().map(TraceWriter::new);
    let report = evaluate(&rt.pipeline(), &tasks, &policy, &reference, &eval, rt.config.seed, traces.as_ref())?;
    write_json(&args.report, &report)?;
    eprintln!(
        "accuracy {:.4}, consistency {}, mean time {:.4}s",
        report.accuracy,
        report.consistency.map_or("n/a".into(), |c| format!("{c:.4}")),
        report.mean_time
    );
    Ok(())
}

fn bench(args: BenchArgs, seed: Option<u64>) -> Result<(), CliError> {
    let b = generate_benchmark(args.chains, args.hops, args.distractors, seed.unwrap_or(0));
    b.write_to(&args.out)?;
    eprintln!(
        "wrote {} tasks and {} knowledge items to {}",
        b.tasks.len(),
        b.kb.len(),
        args.out.display()
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.parallel {
        if n == 0 {
            return Err(CliError::Usage("--parallel must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))?;
    }
    match cli.command {
        Command::Kb {
            action: KbAction::Build { input, output, config },
        } => kb_build(&input, &output, config.as_deref()),
        Command::Run(a) => run(a, cli.seed, cli.parallel),
        Command::Train(a) => train_cmd(a, cli.seed, cli.parallel),
        Command::Eval(a) => eval_cmd(a, cli.seed, cli.parallel),
        Command::Bench(a) => bench(a, cli.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() && !text.contains("Usage:") {
                eprint!("{text}\n{}\n", Cli::command().render_usage());
            } else {
                let _ = e.print();
            }
            return ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2));
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
