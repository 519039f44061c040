use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use dualstate::campaign::{run_campaign, CampaignConfig, CampaignError, GeneratorSource};
use dualstate::executor::{replay, trace_from_jsonl, trace_to_jsonl, Executor, Mode, RunConfig};
use dualstate::generator::{Generator, GeneratorConfig, LiveGenerator, MockGenerator, MockGeneratorSpec, MockOracleGuard};
use dualstate::guards::{GuardRegistry, GuardSettings, ShimClient};
use dualstate::repository::{Repository, RepositoryError};
use dualstate::workflow::{WorkflowDocument, WorkflowSpec};
use tracing_subscriber::EnvFilter;

const EXIT_OK: u8 = 0;
const EXIT_FAILURE: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_INFRA: u8 = 3;

#[derive(Parser)]
#[command(name = "dualstate", version, about = "Guarded, retrying code-generation workflows")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and validate a workflow document.
    Validate {
        spec: PathBuf,
    },
    /// Execute one workflow and print its summary.
    Run(RunArgs),
    /// Run baseline and guarded trials and report the comparison.
    Benchmark(BenchmarkArgs),
    /// Check a repository log's content addresses and edges.
    Verify {
        log: PathBuf,
    },
    /// Re-evaluate the guards of a recorded run.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct GeneratorArgs {
    /// Completion endpoint of the local model server.
    #[arg(long, env = "DUALSTATE_ENDPOINT", default_value = GeneratorConfig::DEFAULT_ENDPOINT)]
    endpoint: String,
    /// Model name passed to the endpoint.
    #[arg(long, env = "DUALSTATE_MODEL")]
    model: Option<String>,
    #[arg(long, default_value_t = 0.7)]
    temperature: f64,
    /// HTTP timeout for one completion, in seconds.
    #[arg(long, default_value_t = 300.0)]
    request_timeout: f64,
    /// Use a seeded mock generator instead of a model server: a path to a
    /// JSON spec or the JSON itself.
    #[arg(long, value_name = "FILE|JSON")]
    mock: Option<String>,
}

#[derive(Args)]
struct EngineArgs {
    /// Retries per node after the first attempt.
    #[arg(long, default_value_t = 3)]
    r_max: u32,
    /// Guard wall-clock timeout in seconds.
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
    /// Global constraint placed at the top of every prompt (repeatable).
    #[arg(long = "constraint", value_name = "TEXT")]
    constraints: Vec<String>,
    /// Byte budget for the rendered feedback history.
    #[arg(long, default_value_t = dualstate::workflow::DEFAULT_FEEDBACK_BUDGET)]
    feedback_budget: usize,
    /// Sandbox shim command line.
    #[arg(long, env = "DUALSTATE_SHIM")]
    shim: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Guarded,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Guarded => Mode::Guarded,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModesArg {
    Baseline,
    Guarded,
    Both,
}

#[derive(Args)]
struct RunArgs {
    spec: PathBuf,
    /// Workflow id, when the document holds several.
    #[arg(long)]
    workflow: Option<String>,
    #[arg(long, value_enum, default_value = "guarded")]
    mode: ModeArg,
    /// Seed for the mock generator.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for repository.jsonl and trace.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    generator: GeneratorArgs,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct BenchmarkArgs {
    spec: PathBuf,
    /// Workflow ids to include (repeatable); all by default.
    #[arg(long = "workflow")]
    workflows: Vec<String>,
    #[arg(long, default_value_t = dualstate::campaign::DEFAULT_TRIALS)]
    trials: u32,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModesArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "benchmark")]
    out: PathBuf,
    /// Trials run concurrently (forced to 1 with interactive guards).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    generator: GeneratorArgs,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Args)]
struct ReplayArgs {
    spec: PathBuf,
    #[arg(long)]
    workflow: Option<String>,
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    repository: PathBuf,
    /// Mock spec, when the run used one with a custom passing artifact.
    #[arg(long, value_name = "FILE|JSON")]
    mock: Option<String>,
    #[command(flatten)]
    engine: EngineArgs,
}

/// An error that carries the process exit code.
#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn invalid(message: impl fmt::Display) -> anyhow::Error {
    Exit {
        code: EXIT_INVALID,
        message: message.to_string(),
    }
    .into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(std::io::stderr)
        .init();

    let result = match cli.command {
        Command::Validate { spec } => cmd_validate(&spec),
        Command::Run(args) => cmd_run(args),
        Command::Benchmark(args) => cmd_benchmark(args),
        Command::Verify { log } => cmd_verify(&log),
        Command::Replay(args) => cmd_replay(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.downcast_ref::<Exit>().map_or(EXIT_INFRA, |x| x.code))
        }
    }
}

fn settings(engine: &EngineArgs) -> anyhow::Result<GuardSettings> {
    if !(engine.timeout > 0.0 && engine.timeout.is_finite()) {
        return Err(invalid("--timeout must be positive"));
    }
    let shim = match &engine.shim {
        Some(cmd) => ShimClient::new(cmd.split_whitespace().map(str::to_string).collect()),
        None => ShimClient::from_env(),
    };
    Ok(GuardSettings {
        shim,
        timeout: Duration::from_secs_f64(engine.timeout),
    })
}

fn run_config(engine: &EngineArgs, mode: Mode) -> RunConfig {
    RunConfig {
        r_max: engine.r_max,
        guard_timeout: Duration::from_secs_f64(engine.timeout),
        mode,
        feedback_byte_budget: engine.feedback_budget,
        global_constraints: engine.constraints.clone(),
        ..RunConfig::default()
    }
}

fn load_mock(arg: &str) -> anyhow::Result<MockGeneratorSpec> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        fs::read_to_string(arg).map_err(|e| invalid(format!("reading mock spec {arg}: {e}")))?
    };
    let spec: MockGeneratorSpec = serde_json::from_str(&text).map_err(|e| invalid(format!("mock spec: {e}")))?;
    spec.validate().map_err(invalid)?;
    Ok(spec)
}

fn registry_for(settings: GuardSettings, mock: Option<&MockGeneratorSpec>) -> GuardRegistry {
    let mut registry = GuardRegistry::with_defaults(settings);
    if let Some(spec) = mock {
        registry.register_guard("mock", Arc::new(MockOracleGuard::new(spec.pass_artifact.clone())));
    }
    registry
}

fn load_document(path: &Path, registry: &GuardRegistry) -> anyhow::Result<WorkflowDocument> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("reading {}: {e}", path.display())))?;
    WorkflowDocument::parse(&text, registry).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn select<'a>(doc: &'a WorkflowDocument, id: Option<&str>) -> anyhow::Result<&'a WorkflowSpec> {
    match id {
        Some(id) => doc.workflow(id),
        None => doc.single(),
    }
    .map_err(invalid)
}

fn live_config(args: &GeneratorArgs) -> anyhow::Result<GeneratorConfig> {
    let model = args
        .model
        .clone()
        .ok_or_else(|| invalid("no generator: pass --model (or DUALSTATE_MODEL) or --mock"))?;
    let config = GeneratorConfig {
        temperature: args.temperature,
        request_timeout_seconds: args.request_timeout,
        ..GeneratorConfig::new(args.endpoint.clone(), model)
    };
    config.validate().map_err(invalid)?;
    Ok(config)
}

fn cmd_validate(path: &Path) -> anyhow::Result<u8> {
    let registry = GuardRegistry::with_defaults(GuardSettings::default());
    let doc = load_document(path, &registry)?;
    for wf in doc.workflows.values() {
        println!("ok: {wf}");
    }
    Ok(EXIT_OK)
}

fn cmd_run(args: RunArgs) -> anyhow::Result<u8> {
    let mock = args.generator.mock.as_deref().map(load_mock).transpose()?;
    let registry = registry_for(settings(&args.engine)?, mock.as_ref());
    let doc = load_document(&args.spec, &registry)?;
    let spec = select(&doc, args.workflow.as_deref())?;
    let guards = spec.build_guards(&registry).map_err(invalid)?;
    let generator: Box<dyn Generator> = match mock {
        Some(m) => {
            let m = match args.seed {
                Some(seed) => m.with_seed(seed),
                None => m,
            };
            Box::new(MockGenerator::new(m).map_err(invalid)?)
        }
        None => Box::new(LiveGenerator::new(live_config(&args.generator)?).map_err(invalid)?),
    };

    let out = args
        .out
        .unwrap_or_else(|| PathBuf::from("runs").join(&spec.workflow_id));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let repo_path = out.join("repository.jsonl");
    let repository = Repository::open(&repo_path).with_context(|| format!("opening {}", repo_path.display()))?;
    let config = run_config(&args.engine, args.mode.into());

    let outcome = Executor::new(generator.as_ref(), &guards, &repository, &config).execute_workflow(spec);

    let trace_path = out.join("trace.jsonl");
    fs::write(&trace_path, trace_to_jsonl(&outcome.trace))
        .with_context(|| format!("writing {}", trace_path.display()))?;
    print!("{}", outcome.summary_table());
    println!("Final state: {}", serde_json::to_string(&outcome.final_state)?);
    println!("Repository: {}", repo_path.display());
    println!("Trace: {}", trace_path.display());
    if let Some(err) = &outcome.error {
        eprintln!("error: {err}");
    }
    Ok(outcome.exit_code() as u8)
}

fn cmd_benchmark(args: BenchmarkArgs) -> anyhow::Result<u8> {
    let mock = args.generator.mock.as_deref().map(load_mock).transpose()?;
    let registry = registry_for(settings(&args.engine)?, mock.as_ref());
    let doc = load_document(&args.spec, &registry)?;
    let workflows: Vec<WorkflowSpec> = if args.workflows.is_empty() {
        doc.workflows.values().cloned().collect()
    } else {
        args.workflows
            .iter()
            .map(|id| doc.workflow(id).cloned().map_err(invalid))
            .collect::<anyhow::Result<_>>()?
    };
    let source = match mock {
        Some(m) => GeneratorSource::Mock(m),
        None => GeneratorSource::Live(live_config(&args.generator)?),
    };
    let mut config = CampaignConfig::new(workflows, source, &args.out);
    config.trials = args.trials;
    config.seed = args.seed;
    config.jobs = args.jobs;
    config.modes = match args.mode {
        ModesArg::Baseline => vec![Mode::Baseline],
        ModesArg::Guarded => vec![Mode::Guarded],
        ModesArg::Both => Mode::ALL.to_vec(),
    };
    config.run = run_config(&args.engine, Mode::Guarded);

    let report = run_campaign(&config, &registry).map_err(|e| match e {
        CampaignError::Workflow(_) | CampaignError::ConfigMismatch(_) | CampaignError::Invalid(_) => invalid(e),
        other => anyhow::Error::new(other),
    })?;
    print!("{}", report.to_table());
    println!("Report: {}", args.out.join("report.json").display());
    Ok(EXIT_OK)
}

fn cmd_verify(path: &Path) -> anyhow::Result<u8> {
    let repo = match Repository::load(path) {
        Ok(r) => r,
        Err(e @ RepositoryError::Malformed { .. }) => {
            println!("FAIL: {e}");
            return Ok(EXIT_FAILURE);
        }
        Err(e) => return Err(invalid(e)),
    };
    match repo.find_problem() {
        None => {
            println!("ok: {} records, every content address and edge checks out", repo.len());
            Ok(EXIT_OK)
        }
        Some(problem) => {
            println!("FAIL: {problem}");
            Ok(EXIT_FAILURE)
        }
    }
}

fn cmd_replay(args: ReplayArgs) -> anyhow::Result<u8> {
    let mock = args.mock.as_deref().map(load_mock).transpose()?;
    let registry = registry_for(settings(&args.engine)?, mock.as_ref());
    let doc = load_document(&args.spec, &registry)?;
    let spec = select(&doc, args.workflow.as_deref())?;
    let guards = spec.build_guards(&registry).map_err(invalid)?;
    let trace_text = fs::read_to_string(&args.trace).map_err(|e| invalid(format!("{}: {e}", args.trace.display())))?;
    let trace = trace_from_jsonl(&trace_text).map_err(invalid)?;
    let repository = Repository::load(&args.repository).map_err(invalid)?;
    let report = match replay(spec, &trace, &repository.view(), &guards) {
        Ok(r) => r,
        Err(dualstate::executor::ReplayError::Guard { node, source }) => {
            return Err(anyhow::anyhow!("replaying node `{node}`: {source}"))
        }
        Err(e) => {
            println!("FAIL: {e}");
            return Ok(EXIT_FAILURE);
        }
    };
    println!(
        "{} events: {} re-evaluated, {} taken from the record, {} with drifting feedback",
        report.events, report.reevaluated, report.taken_from_record, report.feedback_drift
    );
    for m in &report.mismatches {
        println!(
            "MISMATCH event {} ({} attempt {}): {}; recorded passed={}",
            m.index, m.node_id, m.attempt, m.reason, m.recorded.passed
        );
    }
    Ok(if report.is_faithful() { EXIT_OK } else { EXIT_FAILURE })
}
