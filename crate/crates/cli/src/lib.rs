//! The `bagel` command: bootstrap demonstrations, evaluate with them,
//! review them, and list the bundled environments.
//!
//! Exit codes: 0 on success, 1 for usage, configuration and input errors,
//! 2 when the language-model backend fails or a run ends incomplete.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use bagel_core::bootstrap::{self, BootstrapConfig, BootstrapError, BootstrapMode};
use bagel_core::components::Controller;
use bagel_core::envsim::{self, CommandKind};
use bagel_core::eval::{self, DemoMode, EvalConfig, EvalError, Mark, Marks};
use bagel_core::lm::{HttpBackend, HttpConfig, LanguageModel, PromptSet, ScriptedBackend};
use bagel_core::retrieval::{Embedder, HashEmbedder, HttpEmbedder, DEFAULT_DIMS, DEFAULT_K};
use bagel_core::{DemoBuffer, Limits};
use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use thiserror::Error;

use crate::config::Settings;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("unknown demonstration id {0:?}")]
    UnknownDemoId(String),
    #[error("{0}")]
    Input(String),
    #[error("language model backend failed: {0}")]
    Backend(String),
    #[error("run incomplete: {0}")]
    Incomplete(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Backend(_) | CliError::Incomplete(_) => 2,
            _ => 1,
        }
    }
}

const COMMON: &[&str] = &[
    "env",
    "rng-seed",
    "temperature",
    "max-steps",
    "max-resamples",
    "controller",
    "jobs",
    "lm-script",
    "lm-url",
    "lm-timeout-ms",
    "buffer",
    "report",
];

const BOOTSTRAP: &[&str] = &["mode", "seeds", "explore-temperature", "max-iterations", "rejected"];
const EVAL: &[&str] = &["demo-mode", "k", "tasks", "task-start", "marks", "dims", "embed-url"];
const INSPECT: &[&str] = &["env", "buffer", "marks", "max-steps", "max-resamples", "max-iterations"];

fn opt(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("VALUE").help(help)
}

fn common_args() -> Vec<Arg> {
    vec![
        opt("config", "key = value settings file"),
        opt("env", "environment id (see `bagel envs`)"),
        opt("rng-seed", "base seed for episodes and sampling [default: 0]"),
        opt("temperature", "sampling temperature [default: 1.0]"),
        opt("max-steps", "actions per episode, T [default: 15]"),
        opt("max-resamples", "re-samples per step, m [default: 5]"),
        opt("controller", "grammar or lm [default: grammar]"),
        opt("jobs", "parallel episodes [default: 1]"),
        opt("lm-script", "scripted LM rules (JSON)"),
        opt("lm-url", "completion endpoint; also BAGEL_LM_URL"),
        opt("lm-timeout-ms", "HTTP timeout in milliseconds [default: 30000]"),
        opt("buffer", "demonstration buffer [default: <env>.buffer.jsonl]"),
    ]
}

pub fn command() -> Command {
    Command::new("bagel")
        .about("Bootstrap, evaluate and review synthetic agent demonstrations")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("bootstrap")
                .about("Explore, label and filter demonstrations into a buffer")
                .args(common_args())
                .args([
                    opt(
                        "mode",
                        "trajectory-first, instruction-first, no-iters-trajectory-first or no-iters-instruction-first",
                    ),
                    opt("seeds", "number of environment seeds [default: 60]"),
                    opt("explore-temperature", "temperature for exploration [default: 1.0]"),
                    opt("max-iterations", "refinement round trips, T_iter [default: 5]"),
                    opt("report", "run report [default: <buffer stem>.report.json]"),
                    opt(
                        "rejected",
                        "rejected-pair sidecar [default: <buffer stem>.rejected.jsonl]",
                    ),
                ]),
        )
        .subcommand(
            Command::new("eval")
                .about("Run test episodes with in-context demonstrations")
                .args(common_args())
                .args([
                    opt(
                        "demo-mode",
                        "none, retrieved, random, shuffled or manual-filtered [default: retrieved]",
                    ),
                    opt("k", "demonstrations per prompt [default: 3]").short('k'),
                    opt("tasks", "number of task seeds [default: 50]"),
                    opt("task-start", "first task seed [default: 0]"),
                    opt("marks", "review sidecar [default: <buffer stem>.marks.jsonl]"),
                    opt("dims", "hash embedding size [default: 256]"),
                    opt("embed-url", "embedding endpoint instead of the hash embedder"),
                    opt("report", "metrics report [default: <env>.<demo-mode>.eval.json]"),
                ]),
        )
        .subcommand(
            Command::new("inspect")
                .about("Page through a buffer, print action statistics or mark demonstrations")
                .args([
                    opt("config", "key = value settings file"),
                    opt("buffer", "demonstration buffer"),
                    opt("env", "expected environment id"),
                    opt("marks", "review sidecar [default: <buffer stem>.marks.jsonl]"),
                    opt("max-steps", "step budget used to validate records [default: 15]"),
                    opt(
                        "max-resamples",
                        "re-sample budget used to validate records [default: 5]",
                    ),
                    opt(
                        "max-iterations",
                        "iteration budget used to validate records [default: 5]",
                    ),
                    Arg::new("stats")
                        .long("stats")
                        .action(ArgAction::SetTrue)
                        .help("print a histogram of action kinds"),
                    Arg::new("mark")
                        .long("mark")
                        .num_args(2)
                        .value_names(["VERDICT", "ID"])
                        .conflicts_with("stats")
                        .help("record accept or reject for a demonstration id"),
                ]),
        )
        .subcommand(Command::new("envs").about("List the registered environments"))
}

/// Values the user typed on the command line, keyed by long flag name.
fn explicit_flags(m: &ArgMatches) -> BTreeMap<String, String> {
    m.ids()
        .map(|id| id.as_str())
        .filter(|id| !matches!(*id, "stats" | "mark"))
        .filter(|id| m.value_source(id) == Some(ValueSource::CommandLine))
        .filter_map(|id| {
            let v = m.get_raw(id)?.next()?;
            Some((id.to_string(), v.to_string_lossy().into_owned()))
        })
        .collect()
}

/// Runs the command line `args` (including the program name) against an
/// explicit environment map; returns the process exit code.
pub fn run<I, T>(args: I, env: &BTreeMap<String, String>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let result = match matches.subcommand() {
        Some(("bootstrap", m)) => cmd_bootstrap(m, env, out, err),
        Some(("eval", m)) => cmd_eval(m, env, out, err),
        Some(("inspect", m)) => cmd_inspect(m, env, out),
        Some(("envs", _)) => cmd_envs(out),
        _ => unreachable!("a subcommand is required"),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if let CliError::Usage(_) = e {
                let _ = writeln!(err, "\nRun `bagel --help` for usage.");
            }
            e.exit_code()
        }
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Input(format!("cannot write output: {e}"))
}

fn settings(m: &ArgMatches, env: &BTreeMap<String, String>, extra: &[&str]) -> Result<Settings, CliError> {
    let keys: Vec<&str> = COMMON.iter().chain(extra).copied().collect();
    Settings::load(&keys, &explicit_flags(m), env)
}

fn limits(s: &Settings) -> Result<Limits, CliError> {
    let d = Limits::default();
    Ok(Limits {
        max_steps: s.get_or("max-steps", d.max_steps)?,
        max_resamples: s.get_or("max-resamples", d.max_resamples)?,
        max_iterations: s.get_or("max-iterations", d.max_iterations)?,
    })
}

fn controller(s: &Settings, limits: &Limits) -> Result<Controller, CliError> {
    match s.raw("controller").map(|c| c.trim().to_ascii_lowercase()).as_deref() {
        None | Some("grammar") => Ok(Controller::Grammar),
        Some("lm") => Ok(Controller::Lm {
            max_attempts: limits.max_resamples,
        }),
        Some(other) => Err(CliError::Config(format!(
            "controller must be grammar or lm, got {other:?}"
        ))),
    }
}

/// A scripted backend when `lm-script` is set, otherwise the HTTP backend at
/// `lm-url`.
fn backend(s: &Settings) -> Result<Box<dyn LanguageModel>, CliError> {
    if let Some(path) = s.raw("lm-script") {
        let lm = ScriptedBackend::load(Path::new(path)).map_err(|e| CliError::Config(e.to_string()))?;
        return Ok(Box::new(lm));
    }
    let Some(url) = s.raw("lm-url") else {
        return Err(CliError::Config(
            "no language model configured: pass --lm-script <file> or set BAGEL_LM_URL".into(),
        ));
    };
    let mut cfg = HttpConfig::new(url);
    if let Some(ms) = s.get::<u64>("lm-timeout-ms")? {
        cfg.timeout = Duration::from_millis(ms);
    }
    let lm = HttpBackend::new(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(Box::new(lm))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn buffer_path(s: &Settings, env_id: &str) -> PathBuf {
    s.raw("buffer")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(format!("{env_id}.buffer.jsonl")))
}

fn cmd_bootstrap(
    m: &ArgMatches,
    env: &BTreeMap<String, String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), CliError> {
    let s = settings(m, env, BOOTSTRAP)?;
    let env_id = s.require("env")?;
    let mode = s.get_or("mode", BootstrapMode::TrajectoryFirst)?;
    let mut c = BootstrapConfig::new(&env_id, mode);
    c.num_seeds = s.get_or("seeds", c.num_seeds)?;
    c.limits = limits(&s)?;
    c.rng_seed = s.get_or("rng-seed", c.rng_seed)?;
    c.temperature = s.get_or("temperature", c.temperature)?;
    c.explore_temperature = s.get_or("explore-temperature", c.temperature)?;
    c.controller = controller(&s, &c.limits)?;
    c.jobs = s.get_or("jobs", c.jobs)?;
    c.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let buffer = buffer_path(&s, &env_id);
    let report = s
        .raw("report")
        .map(PathBuf::from)
        .unwrap_or_else(|| sibling(&buffer, ".report.json"));
    let rejected = s
        .raw("rejected")
        .map(PathBuf::from)
        .unwrap_or_else(|| bootstrap::rejected_path(&buffer));

    let lm = backend(&s)?;
    let run = bootstrap::bootstrap_run(&c, &*lm, &PromptSet::default()).map_err(|e| match e {
        BootstrapError::Config(_) | BootstrapError::Env(_) => CliError::Config(e.to_string()),
        other => CliError::Input(other.to_string()),
    })?;
    // persisted even when the run stopped early
    run.write(&buffer, &report, &rejected)
        .map_err(|e| CliError::Input(e.to_string()))?;

    let r = &run.report;
    writeln!(
        out,
        "{} {}: {}/{} seeds accepted (rate {:.3}, mean iterations {:.2})",
        r.env_id, r.mode, r.accepted, r.completed_seeds, r.acceptance_rate, r.mean_iterations
    )
    .map_err(io_err)?;
    writeln!(out, "buffer   {}", buffer.display()).map_err(io_err)?;
    writeln!(out, "report   {}", report.display()).map_err(io_err)?;
    writeln!(out, "rejected {}", rejected.display()).map_err(io_err)?;
    for w in &r.warnings {
        writeln!(err, "warning: {w}").map_err(io_err)?;
    }
    match run.error {
        Some(e) => Err(CliError::Incomplete(format!(
            "{e} ({} of {} seeds finished; partial buffer written)",
            r.completed_seeds, r.num_seeds
        ))),
        None => Ok(()),
    }
}

fn cmd_eval(
    m: &ArgMatches,
    env: &BTreeMap<String, String>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<(), CliError> {
    let s = settings(m, env, EVAL)?;
    let env_id = s.require("env")?;
    let mode = s.get_or("demo-mode", DemoMode::Retrieved)?;
    let mut c = EvalConfig::new(&env_id, mode);
    c.k = s.get_or("k", DEFAULT_K)?;
    let tasks: u64 = s.get_or("tasks", 50)?;
    let start: u64 = s.get_or("task-start", 0)?;
    c.task_seeds = (start..start + tasks).collect();
    c.limits = limits(&s)?;
    c.temperature = s.get_or("temperature", c.temperature)?;
    c.controller = controller(&s, &c.limits)?;
    c.rng_seed = s.get_or("rng-seed", c.rng_seed)?;
    c.jobs = s.get_or("jobs", c.jobs)?;
    envsim::inventory(&env_id).map_err(|e| CliError::Config(e.to_string()))?;

    let buffer_file = buffer_path(&s, &env_id);
    let buffer = if mode.needs_demos() {
        if !buffer_file.exists() {
            return Err(CliError::Input(format!(
                "{}: no such buffer; demo mode {mode} needs demonstrations",
                buffer_file.display()
            )));
        }
        let b = DemoBuffer::load(&buffer_file, Some(&env_id), &c.limits).map_err(|e| CliError::Input(e.to_string()))?;
        if mode == DemoMode::ManualFiltered {
            let marks = s
                .raw("marks")
                .map(PathBuf::from)
                .unwrap_or_else(|| eval::marks_path(&buffer_file));
            c.marks = Marks::load(&marks).map_err(|e| CliError::Input(e.to_string()))?;
        }
        Some(b)
    } else {
        if s.raw("buffer").is_some() {
            writeln!(
                err,
                "warning: demo mode none runs zero-shot; ignoring the buffer setting"
            )
            .map_err(io_err)?;
        }
        None
    };

    let dims = s.get_or("dims", DEFAULT_DIMS)?;
    if dims == 0 {
        return Err(CliError::Config("dims must be at least 1".into()));
    }
    let embedder: Box<dyn Embedder> = match s.raw("embed-url") {
        Some(url) => {
            let timeout = Duration::from_millis(s.get_or("lm-timeout-ms", 30_000)?);
            Box::new(HttpEmbedder::new(url, dims, timeout).map_err(|e| CliError::Config(e.to_string()))?)
        }
        None => Box::new(HashEmbedder { dims }),
    };
    let report_path = s
        .raw("report")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(format!("{env_id}.{mode}.eval.json")));

    let lm = backend(&s)?;
    let source = buffer.as_ref().map(|b| b as &dyn eval::DemoSource);
    let report = eval::run_eval(&c, source, &*lm, &PromptSet::default(), &*embedder).map_err(|e| match e {
        EvalError::Component(ref c) if c.is_backend_failure() => CliError::Backend(e.to_string()),
        EvalError::Retrieval(bagel_core::retrieval::RetrievalError::BackendUnavailable(_)) => {
            CliError::Backend(e.to_string())
        }
        EvalError::EmptyBuffer(_) | EvalError::Config(_) | EvalError::Env(_) => CliError::Config(e.to_string()),
        other => CliError::Input(other.to_string()),
    })?;
    std::fs::write(&report_path, report.to_json())
        .map_err(|e| CliError::Input(format!("cannot write {}: {e}", report_path.display())))?;
    write!(out, "{}", report.to_table()).map_err(io_err)?;
    writeln!(out, "report {}", report_path.display()).map_err(io_err)?;
    Ok(())
}

/// Action counts per command kind, plus actions that do not parse.
pub fn action_histogram(buffer: &DemoBuffer) -> (BTreeMap<CommandKind, usize>, usize) {
    let mut counts: BTreeMap<CommandKind, usize> = CommandKind::ALL.into_iter().map(|k| (k, 0)).collect();
    let mut unparsed = 0;
    for demo in buffer.demos() {
        for a in demo.trajectory.actions() {
            match envsim::parse_grammar(a.as_str()) {
                Ok(cmd) => *counts.entry(cmd.kind()).or_default() += 1,
                Err(_) => unparsed += 1,
            }
        }
    }
    (counts, unparsed)
}

fn cmd_inspect(m: &ArgMatches, env: &BTreeMap<String, String>, out: &mut dyn Write) -> Result<(), CliError> {
    let s = Settings::load(INSPECT, &explicit_flags(m), env)?;
    let path = PathBuf::from(s.require("buffer")?);
    let lim = limits(&s)?;
    let buffer = DemoBuffer::load(&path, s.raw("env"), &lim).map_err(|e| CliError::Input(e.to_string()))?;
    let marks_file = s
        .raw("marks")
        .map(PathBuf::from)
        .unwrap_or_else(|| eval::marks_path(&path));

    if let Some(mut vals) = m.get_many::<String>("mark") {
        let (verdict, id) = (vals.next().expect("two values"), vals.next().expect("two values"));
        let verdict: Mark = verdict.parse().map_err(CliError::Usage)?;
        if buffer.get(id).is_none() {
            return Err(CliError::UnknownDemoId(id.clone()));
        }
        let mut marks = Marks::load(&marks_file).map_err(|e| CliError::Input(e.to_string()))?;
        marks.set(id.clone(), verdict);
        marks.save(&marks_file).map_err(|e| CliError::Input(e.to_string()))?;
        writeln!(out, "marked {id} {verdict} in {}", marks_file.display()).map_err(io_err)?;
        return Ok(());
    }

    if m.get_flag("stats") {
        let (counts, unparsed) = action_histogram(&buffer);
        let total: usize = counts.values().sum::<usize>() + unparsed;
        let widest = counts.values().copied().max().unwrap_or(0).max(1);
        writeln!(out, "{} demonstrations, {total} actions", buffer.len()).map_err(io_err)?;
        for (kind, n) in &counts {
            let bar = "#".repeat((n * 40).div_ceil(widest));
            let line = format!("{:<8}{n:>6}  {bar}", kind.keyword());
            writeln!(out, "{}", line.trim_end()).map_err(io_err)?;
        }
        if unparsed > 0 {
            writeln!(out, "{:<8}{unparsed:>6}", "other").map_err(io_err)?;
        }
        return Ok(());
    }

    let marks = Marks::load(&marks_file).map_err(|e| CliError::Input(e.to_string()))?;
    let n = buffer.len();
    for (i, demo) in buffer.demos().iter().enumerate() {
        if i > 0 {
            writeln!(out, "{}", "-".repeat(60)).map_err(io_err)?;
        }
        write!(out, "[{}/{n}] {}", i + 1, demo.id).map_err(io_err)?;
        if let Some(mark) = marks.get(&demo.id) {
            write!(out, "  ({mark})").map_err(io_err)?;
        }
        writeln!(out, "\nInstruction: {}", demo.instruction.as_str()).map_err(io_err)?;
        for (j, a) in demo.trajectory.actions().enumerate() {
            writeln!(out, "  {:>2}. {}", j + 1, a.as_str()).map_err(io_err)?;
        }
    }
    if n == 0 {
        writeln!(out, "{}: empty buffer", path.display()).map_err(io_err)?;
    }
    Ok(())
}

fn cmd_envs(out: &mut dyn Write) -> Result<(), CliError> {
    for id in envsim::ENV_IDS {
        let kind = if id == "toolbench" { "tool use" } else { "web" };
        writeln!(out, "{id:<18}{kind}").map_err(io_err)?;
    }
    Ok(())
}
