//! Command-line harness: run batches of episodes, replay persisted
//! transcripts, and validate scenario files.
//!
//! Exit codes are stable: 1 for configuration errors, 2 for scenario or
//! transcript data errors, 3 for backend failures during a run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clinic_core::engine::{Engine, EpisodeResult, LoopConfig, Outcome};
use clinic_core::env::{EnvBackend, RemoteEnv};
use clinic_core::llm::ChatClient;
use clinic_core::policy::{demo_doctor_for, DoctorBackend, RemoteDoctor};
use clinic_core::report::{render_report, tabulate, ReportFormat};
use clinic_core::runner::run_batch;
use clinic_core::scenario::{load_scenarios, Scenario, ScenarioError};
use clinic_core::state::render_dialogue;
use clinic_core::transcript::{load_transcript, replay_episode, TranscriptWriter};

const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";
const API_KEY_VAR: &str = "CLINIC_API_KEY";
const API_BASE_VAR: &str = "CLINIC_API_BASE";

#[derive(Parser)]
#[command(
    name = "clinic",
    version,
    about = "Run, replay, and validate adaptive diagnostic episodes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every scenario in a file and write transcripts plus a report.
    Run(RunArgs),
    /// Print a persisted transcript as a readable dialogue with metrics.
    Replay(ReplayArgs),
    /// Check a scenario file and report per-scenario verdicts.
    Validate(ValidateArgs),
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum BackendChoice {
    Scripted,
    Remote,
}

impl fmt::Display for BackendChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendChoice::Scripted => f.write_str("scripted"),
            BackendChoice::Remote => f.write_str("remote"),
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ReportChoice {
    Table,
    Csv,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file to execute.
    #[arg(long)]
    scenarios: PathBuf,
    #[arg(long, value_enum, default_value_t = BackendChoice::Scripted)]
    doctor_backend: BackendChoice,
    #[arg(long, value_enum, default_value_t = BackendChoice::Scripted)]
    env_backend: BackendChoice,
    /// Per-trial action budget (hard ceiling 50).
    #[arg(long, default_value_t = 20)]
    max_steps: u32,
    #[arg(long, default_value_t = 3)]
    max_trials: u32,
    /// Maximum episodes running concurrently.
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    /// Directory for transcripts and the report.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportChoice::Table)]
    report: ReportChoice,
    /// Seed for scripted tie-breaking extensions; threaded, not global.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace wall-clock transcript timestamps with a counter.
    #[arg(long)]
    deterministic_ts: bool,
    /// Model id used by remote backends.
    #[arg(long, default_value = "gpt-4")]
    model: String,
}

#[derive(Args)]
struct ReplayArgs {
    /// Transcript file (JSON lines) to replay.
    transcript: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Scenario file to check.
    #[arg(long)]
    scenarios: PathBuf,
}

enum CliError {
    Config(String),
    Scenario(String),
    Backend(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Scenario(_) => 2,
            CliError::Backend(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(detail) => write!(f, "configuration error: {detail}"),
            CliError::Scenario(detail) => write!(f, "scenario error: {detail}"),
            CliError::Backend(detail) => write!(f, "backend error: {detail}"),
        }
    }
}

/// Restore the default SIGPIPE disposition so piping into tools like `head`
/// terminates the process quietly instead of panicking on a closed stdout.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() -> ExitCode {
    reset_sigpipe();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Replay(args) => cmd_replay(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code())
        }
    }
}

/// Resolve the remote client from the environment, failing fast when the
/// credential is absent. Called before any output file is created.
fn remote_client() -> Result<ChatClient, CliError> {
    let key = std::env::var(API_KEY_VAR).map_err(|_| {
        CliError::Config(format!(
            "remote backends require the {API_KEY_VAR} environment variable"
        ))
    })?;
    if key.trim().is_empty() {
        return Err(CliError::Config(format!("{API_KEY_VAR} is set but empty")));
    }
    let base = std::env::var(API_BASE_VAR).unwrap_or_else(|_| DEFAULT_API_BASE.to_string());
    Ok(ChatClient::new(base, key))
}

fn scenario_error(error: ScenarioError) -> CliError {
    CliError::Scenario(error.to_string())
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let config = LoopConfig::new(args.max_steps, args.max_trials)
        .map_err(|e| CliError::Config(e.to_string()))?;
    if args.parallelism == 0 {
        return Err(CliError::Config("parallelism must be at least 1".to_string()));
    }

    let needs_remote = args.doctor_backend == BackendChoice::Remote
        || args.env_backend == BackendChoice::Remote;
    let client = if needs_remote {
        Some(remote_client()?)
    } else {
        None
    };

    let scenarios = load_scenarios(&args.scenarios).map_err(scenario_error)?;

    let env = match args.env_backend {
        BackendChoice::Scripted => EnvBackend::Scripted,
        BackendChoice::Remote => EnvBackend::Remote(RemoteEnv {
            model_id: args.model.clone(),
            temperature: 0.0,
            max_reply_tokens: 256,
            client: client.clone().expect("checked above"),
        }),
    };
    let doctor_for = |scenario: &Scenario| -> DoctorBackend {
        match args.doctor_backend {
            BackendChoice::Scripted => DoctorBackend::Scripted(demo_doctor_for(scenario)),
            BackendChoice::Remote => DoctorBackend::Remote(RemoteDoctor {
                model_id: args.model.clone(),
                temperature: 0.0,
                max_reply_tokens: 256,
                prompt_char_budget: Some(24_000),
                client: client.clone().expect("checked above"),
            }),
        }
    };

    std::fs::create_dir_all(&args.out).map_err(|e| {
        CliError::Backend(format!("cannot create output directory {}: {e}", args.out.display()))
    })?;

    println!(
        "run: {} scenarios, doctor={}, env={}, max_steps={}, max_trials={}, seed={}",
        scenarios.len(),
        args.doctor_backend,
        args.env_backend,
        config.max_steps(),
        config.max_trials(),
        args.seed.map_or("none".to_string(), |s| s.to_string()),
    );

    let out_dir = args.out.clone();
    let deterministic_ts = args.deterministic_ts;
    let results: Vec<Result<EpisodeResult, CliError>> =
        run_batch(&scenarios, args.parallelism, |scenario| {
            run_one(scenario, config, &doctor_for, &env, &out_dir, deterministic_ts)
        });

    let mut episodes = Vec::with_capacity(results.len());
    let mut failure: Option<CliError> = None;
    for result in results {
        match result {
            Ok(episode) => episodes.push(episode),
            Err(error) => failure = failure.or(Some(error)),
        }
    }
    if let Some(error) = failure {
        return Err(error);
    }

    let label = match args.doctor_backend {
        BackendChoice::Scripted => "scripted".to_string(),
        BackendChoice::Remote => args.model.clone(),
    };
    let mut results_by_backend = indexmap::IndexMap::new();
    results_by_backend.insert(label, episodes);
    let truths: Vec<_> = scenarios.iter().map(|s| s.truth.clone()).collect();
    let report = tabulate(&results_by_backend, &truths)
        .map_err(|e| CliError::Backend(e.to_string()))?;

    let (format, file_name) = match args.report {
        ReportChoice::Table => (ReportFormat::Table, "report.txt"),
        ReportChoice::Csv => (ReportFormat::Csv, "report.csv"),
    };
    let rendered = render_report(&report, format);
    let report_path = args.out.join(file_name);
    std::fs::write(&report_path, &rendered).map_err(|e| {
        CliError::Backend(format!("cannot write report {}: {e}", report_path.display()))
    })?;
    print!("{rendered}");
    Ok(())
}

/// Run one scenario end to end: transcript on disk, one summary line on
/// stdout. The summary is printed as a single line so concurrent episodes
/// never interleave mid-line.
fn run_one(
    scenario: &Scenario,
    config: LoopConfig,
    doctor_for: &(impl Fn(&Scenario) -> DoctorBackend + Sync),
    env: &EnvBackend,
    out_dir: &Path,
    deterministic_ts: bool,
) -> Result<EpisodeResult, CliError> {
    let doctor = doctor_for(scenario);
    let engine = Engine::new(config, &doctor, env);
    let path = out_dir.join(format!("{}.jsonl", scenario.id));
    let mut writer = TranscriptWriter::to_path(scenario.id.clone(), &path, deterministic_ts)
        .map_err(|e| CliError::Backend(format!("cannot create {}: {e}", path.display())))?;

    let episode = engine
        .run_episode(scenario, &mut |event| writer.record(event))
        .map_err(|e| CliError::Backend(e.to_string()))?;
    writer
        .finish()
        .map_err(|e| CliError::Backend(format!("cannot write {}: {e}", path.display())))?;

    let outcome = match episode.outcome {
        Outcome::Solved => "Solved",
        Outcome::Unsolved => "Unsolved",
    };
    let last_verdict = episode
        .trials
        .last()
        .map(|t| t.return_value.message().to_string())
        .unwrap_or_default();
    println!(
        "{}: {} in {} trial(s), last verdict: {}",
        episode.scenario_id,
        outcome,
        episode.trials.len(),
        last_verdict
    );
    Ok(episode)
}

fn cmd_replay(args: ReplayArgs) -> Result<(), CliError> {
    let events = load_transcript(&args.transcript)
        .map_err(|e| CliError::Scenario(e.to_string()))?;
    let episode = replay_episode(&events).map_err(|e| CliError::Scenario(e.to_string()))?;

    println!(
        "episode {}: {} trial(s), {}",
        episode.scenario_id,
        episode.trials.len(),
        match episode.outcome {
            Outcome::Solved => "Solved",
            Outcome::Unsolved => "Unsolved",
        }
    );
    for trial in &episode.trials {
        println!("=== Trial {} ===", trial.trial_index);
        if let Some(adaptation) = &trial.adaptation_used {
            println!(
                "Guidance (from trial {}): {}",
                adaptation.trial_origin, adaptation.content
            );
        }
        print!("{}", render_dialogue(&trial.transcript));
        let costs = clinic_core::report::count_costs(trial);
        println!("questions: {}, tests: {}", costs.questions, costs.tests);
        println!("verdict: {}", trial.return_value.message());
    }
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<(), CliError> {
    let scenarios = load_scenarios(&args.scenarios).map_err(scenario_error)?;
    for scenario in &scenarios {
        println!("{} OK", scenario.id);
    }
    println!("{} scenarios OK", scenarios.len());
    Ok(())
}
