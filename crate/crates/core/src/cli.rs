//! `agentgov` command line.
//!
//! Exit codes: 0 clean, 2 when detections were raised, 1 on any error.
//! Configuration comes from flags only; the environment is not consulted.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::engine::{replay, EngineOptions, EnforcementMode, Report};
use crate::harness::{self, evaluate, generate, GroundTruth, MetricsReport, ScenarioSpec};
use crate::policy::{Policy, PolicyError};
use crate::telemetry::{read_trace, write_trace, ParseOptions, TraceError};

pub const VIOLATIONS_FILE: &str = "violations.jsonl";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const ESCALATIONS_FILE: &str = "escalations.jsonl";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{path}: {source}")]
    Trace { path: String, source: TraceError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error(transparent)]
    Generate(#[from] harness::GenerateError),
    #[error(transparent)]
    Metrics(#[from] harness::MetricsError),
    #[error("{0}")]
    Usage(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "agentgov", version, about = "Runtime governance for agent telemetry traces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replay traces through the engine and write logs and a report.
    Replay(ReplayArgs),
    /// Generate a labeled trace from a scenario spec.
    Generate(GenerateArgs),
    /// Compute governance metrics for a trace and its ground truth, or for the bundled suite.
    Evaluate(EvaluateArgs),
    /// Parse and compile a policy file.
    ValidatePolicy(ValidatePolicyArgs),
    /// Map an external JSONL agent log onto the trace format.
    ImportDataset(ImportArgs),
}

fn parse_mode(s: &str) -> Result<EnforcementMode, String> {
    EnforcementMode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (observe|enforce)"))
}

#[derive(Debug, Clone, Args)]
pub struct EngineArgs {
    /// Policy file (TOML). The bundled default policy when omitted.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Reorder window in ms; overrides the policy.
    #[arg(long)]
    pub window: Option<i64>,
    #[arg(long, default_value = "observe", value_parser = parse_mode)]
    pub mode: EnforcementMode,
    /// Reject verbs outside the known vocabulary.
    #[arg(long)]
    pub strict: bool,
}

impl EngineArgs {
    fn load(&self) -> Result<(Policy, EngineOptions, ParseOptions), CliError> {
        let policy = match &self.policy {
            Some(p) => Policy::load(p)?,
            None => Policy::default_policy(),
        };
        if let Some(w) = self.window {
            if w < 0 {
                return Err(CliError::Usage("--window must be nonnegative".into()));
            }
        }
        let strict = self.strict || policy.doc.engine.strict_verbs;
        let opts = EngineOptions {
            mode: self.mode,
            reorder_window_ms: self.window,
            strict_verbs: Some(strict),
        };
        Ok((policy, opts, ParseOptions { strict_verbs: strict }))
    }
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Trace file(s). With several, each gets its own subdirectory of --out.
    #[arg(long, required = true, num_args = 1..)]
    pub trace: Vec<PathBuf>,
    /// Ground truth per trace, in the same order; enables metrics.json.
    #[arg(long, num_args = 1..)]
    pub ground_truth: Vec<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Scenario spec (TOML or JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run the bundled 50-scenario suite instead of a single trace.
    #[arg(long, conflicts_with_all = ["trace", "ground_truth"])]
    pub suite: bool,
    #[arg(long, requires = "ground_truth")]
    pub trace: Option<PathBuf>,
    #[arg(long, requires = "trace")]
    pub ground_truth: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Directory for metrics.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidatePolicyArgs {
    #[arg(long)]
    pub policy: PathBuf,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    /// External JSONL log.
    #[arg(long)]
    pub input: PathBuf,
    /// Trace file to write.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs, prints errors to stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<i32, CliError> {
    match cli.command {
        Command::Replay(a) => run_replay(&a, out),
        Command::Generate(a) => run_generate(&a, out),
        Command::Evaluate(a) => run_evaluate(&a, out),
        Command::ValidatePolicy(a) => {
            let p = Policy::load(&a.policy)?;
            let _ = writeln!(out, "{}: ok ({} rules)", a.policy.display(), p.rules.len());
            Ok(0)
        }
        Command::ImportDataset(a) => run_import(&a, out),
    }
}

fn load_trace(path: &Path, opts: &ParseOptions) -> Result<Vec<crate::Event>, CliError> {
    let f = File::open(path).map_err(io_err(path))?;
    read_trace(BufReader::new(f), opts).map_err(|source| CliError::Trace {
        path: path.display().to_string(),
        source,
    })
}

fn load_ground_truth(path: &Path) -> Result<GroundTruth, CliError> {
    let f = File::open(path).map_err(io_err(path))?;
    GroundTruth::read_jsonl(BufReader::new(f)).map_err(|message| CliError::Input {
        path: path.display().to_string(),
        message,
    })
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), CliError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for l in lines {
        writeln!(w, "{l}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Writes the log files and report for one replay into `dir`.
pub fn write_outputs(dir: &Path, report: &Report, metrics: Option<&MetricsReport>) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_lines(&dir.join(VIOLATIONS_FILE), &report.log_lines("violation"))?;
    write_lines(&dir.join(DETECTIONS_FILE), &report.log_lines("detection"))?;
    write_lines(&dir.join(ESCALATIONS_FILE), &report.log_lines("escalation"))?;
    write_lines(&dir.join(DECISIONS_FILE), &report.log_lines("decision"))?;
    write_lines(&dir.join(AUDIT_FILE), &report.audit_lines())?;
    write_json(&dir.join(REPORT_FILE), report)?;
    if let Some(m) = metrics {
        write_json(&dir.join(METRICS_FILE), m)?;
    }
    Ok(())
}

fn run_replay(a: &ReplayArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    if !a.ground_truth.is_empty() && a.ground_truth.len() != a.trace.len() {
        return Err(CliError::Usage(format!(
            "{} traces but {} ground-truth files",
            a.trace.len(),
            a.ground_truth.len()
        )));
    }
    let (policy, opts, parse) = a.engine.load()?;
    let mut any = false;
    for (i, path) in a.trace.iter().enumerate() {
        let events = load_trace(path, &parse)?;
        let report = replay(policy.clone(), opts.clone(), events);
        let metrics = match a.ground_truth.get(i) {
            Some(g) => Some(evaluate(&load_ground_truth(g)?, &report)?),
            None => None,
        };
        let dir = if a.trace.len() == 1 {
            a.out.clone()
        } else {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            a.out.join(format!("{i:02}-{stem}"))
        };
        write_outputs(&dir, &report, metrics.as_ref())?;
        let _ = writeln!(
            out,
            "{}: {} events, {} violations, {} detections, {} escalations",
            path.display(),
            report.events_processed,
            report.violations.len(),
            report.detections.len(),
            report.escalations.len()
        );
        if let Some(m) = &metrics {
            let _ = write!(out, "{}", m.render_table());
        }
        any |= report.has_detections();
    }
    Ok(if any { 2 } else { 0 })
}

fn run_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let text = fs::read_to_string(&a.spec).map_err(io_err(&a.spec))?;
    let mut spec = ScenarioSpec::parse(&text).map_err(|e| CliError::Input {
        path: a.spec.display().to_string(),
        message: e.to_string(),
    })?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let (events, gt) = generate(&spec)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let tp = a.out.join(TRACE_FILE);
    let f = File::create(&tp).map_err(io_err(&tp))?;
    let mut w = BufWriter::new(f);
    write_trace(&mut w, &events).and_then(|_| w.flush()).map_err(io_err(&tp))?;
    let gp = a.out.join(GROUND_TRUTH_FILE);
    let f = File::create(&gp).map_err(io_err(&gp))?;
    let mut w = BufWriter::new(f);
    gt.write_jsonl(&mut w).and_then(|_| w.flush()).map_err(io_err(&gp))?;
    let _ = writeln!(out, "{}: {} events, {} ground-truth entries", tp.display(), events.len(), gt.entries.len());
    Ok(0)
}

fn run_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let (policy, opts, parse) = a.engine.load()?;
    let metrics = if a.suite {
        let r = harness::run_suite(&policy, &opts)?;
        for s in &r.scenarios {
            let _ = writeln!(
                out,
                "{:<32} {:>5} events {:>3} detections",
                s.scenario_id, s.events, s.detections
            );
        }
        r.overall
    } else {
        let (Some(t), Some(g)) = (&a.trace, &a.ground_truth) else {
            return Err(CliError::Usage("pass --suite, or --trace with --ground-truth".into()));
        };
        let report = replay(policy, opts, load_trace(t, &parse)?);
        evaluate(&load_ground_truth(g)?, &report)?
    };
    let _ = write!(out, "{}", metrics.render_table());
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_json(&dir.join(METRICS_FILE), &metrics)?;
    }
    Ok(0)
}

fn run_import(a: &ImportArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let f = File::open(&a.input).map_err(io_err(&a.input))?;
    let outcome = harness::import::import_jsonl(BufReader::new(f));
    for issue in &outcome.issues {
        eprintln!("{}:{}: skipped: {}", a.input.display(), issue.line, issue.message);
    }
    if outcome.events.is_empty() {
        return Err(CliError::Input {
            path: a.input.display().to_string(),
            message: "no records could be imported".into(),
        });
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let f = File::create(&a.out).map_err(io_err(&a.out))?;
    let mut w = BufWriter::new(f);
    write_trace(&mut w, &outcome.events).and_then(|_| w.flush()).map_err(io_err(&a.out))?;
    let _ = writeln!(
        out,
        "{}: {} events imported, {} lines skipped",
        a.out.display(),
        outcome.imported,
        outcome.issues.len()
    );
    Ok(0)
}
