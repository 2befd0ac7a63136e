//! The bootstrapping loop: seed a trajectory or an instruction, then
//! alternate relabeling and re-execution until the filter accepts a pair.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::components::{Agent, ComponentError, Controller};
use crate::envsim::{self, EnvError};
use crate::lm::{LanguageModel, PromptSet};
use crate::par;
use crate::types::{BufferError, DemoBuffer, Demonstration, Instruction, Limits, Source, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    TrajectoryFirst,
    InstructionFirst,
    NoItersTrajectoryFirst,
    NoItersInstructionFirst,
}

impl BootstrapMode {
    pub const ALL: [BootstrapMode; 4] = [
        BootstrapMode::TrajectoryFirst,
        BootstrapMode::InstructionFirst,
        BootstrapMode::NoItersTrajectoryFirst,
        BootstrapMode::NoItersInstructionFirst,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BootstrapMode::TrajectoryFirst => "trajectory-first",
            BootstrapMode::InstructionFirst => "instruction-first",
            BootstrapMode::NoItersTrajectoryFirst => "no-iters-trajectory-first",
            BootstrapMode::NoItersInstructionFirst => "no-iters-instruction-first",
        }
    }

    pub fn iterative(self) -> bool {
        matches!(self, BootstrapMode::TrajectoryFirst | BootstrapMode::InstructionFirst)
    }

    pub fn source(self) -> Source {
        match self {
            BootstrapMode::TrajectoryFirst | BootstrapMode::NoItersTrajectoryFirst => Source::TrajectoryFirst,
            _ => Source::InstructionFirst,
        }
    }
}

impl fmt::Display for BootstrapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BootstrapMode {
    type Err = String;

    /// Accepts `trajectory-first` as well as `trajectory_first`.
    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL.into_iter().find(|m| m.as_str() == norm).ok_or_else(|| {
            format!(
                "unknown mode {s:?}; expected one of trajectory-first, instruction-first, \
                     no-iters-trajectory-first, no-iters-instruction-first"
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapConfig {
    pub env_id: String,
    pub num_seeds: u32,
    pub mode: BootstrapMode,
    /// T (max_steps), m (max_resamples) and T_iter (max_iterations).
    pub limits: Limits,
    pub rng_seed: u64,
    pub temperature: f64,
    pub explore_temperature: f64,
    pub controller: Controller,
    pub jobs: usize,
}

impl BootstrapConfig {
    pub fn new(env_id: impl Into<String>, mode: BootstrapMode) -> Self {
        Self {
            env_id: env_id.into(),
            num_seeds: 60,
            mode,
            limits: Limits::default(),
            rng_seed: 0,
            temperature: crate::lm::DEFAULT_TEMPERATURE,
            explore_temperature: crate::lm::DEFAULT_TEMPERATURE,
            controller: Controller::Grammar,
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<(), BootstrapError> {
        envsim::inventory(&self.env_id)?;
        let bad = |m: &str| Err(BootstrapError::Config(m.to_string()));
        if self.num_seeds == 0 {
            return bad("num_seeds must be at least 1");
        }
        if self.limits.max_iterations == 0 {
            return bad("T_iter must be at least 1");
        }
        if self.limits.max_steps == 0 {
            return bad("T must be at least 1");
        }
        if self.limits.max_resamples == 0 {
            return bad("m must be at least 1");
        }
        for t in [self.temperature, self.explore_temperature] {
            if !(t.is_finite() && t >= 0.0) {
                return bad("temperatures must be non-negative");
            }
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1");
        }
        Ok(())
    }

    /// Environment seed of the `i`-th bootstrap episode.
    pub fn env_seed(&self, i: u32) -> u64 {
        self.rng_seed.wrapping_add(u64::from(i))
    }
}

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("invalid bootstrap config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Component(#[from] ComponentError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One judged (instruction, trajectory) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: u32,
    pub exec_failures: u32,
    pub length: usize,
    pub verdict: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefineOutcome {
    Accepted(Demonstration),
    /// The last pair seen. `instruction` is `None` when the trajectory was
    /// empty and could not be labeled.
    Rejected {
        instruction: Option<Instruction>,
        trajectory: Trajectory,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefineResult {
    pub env_id: String,
    pub seed: u64,
    pub outcome: RefineOutcome,
    pub diagnostics: Vec<IterationRecord>,
}

impl RefineResult {
    pub fn accepted(&self) -> Option<&Demonstration> {
        match &self.outcome {
            RefineOutcome::Accepted(d) => Some(d),
            RefineOutcome::Rejected { .. } => None,
        }
    }

    pub fn verdicts(&self) -> Vec<u8> {
        self.diagnostics.iter().map(|d| d.verdict).collect()
    }
}

pub fn demo_id(env_id: &str, seed: u64) -> String {
    format!("{env_id}-s{seed:04}")
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Request key for round trip `k` of the episode on `seed`.
pub fn sample_key(seed: u64, k: u32) -> u64 {
    splitmix64(splitmix64(seed) ^ u64::from(k))
}

/// Runs one bootstrap episode on a fixed environment seed. Every rollout in
/// the episode starts from a fresh session on that same seed.
pub fn refine(
    env_id: &str,
    seed: u64,
    lm: &dyn LanguageModel,
    prompts: &PromptSet,
    config: &BootstrapConfig,
) -> Result<RefineResult, BootstrapError> {
    let mut agent = Agent::for_env(lm, prompts, env_id)?.with_budget(config.limits);
    agent.temperature = config.temperature;
    agent.explore_temperature = config.explore_temperature;
    agent.controller = config.controller;
    let at = |k: u32| agent.with_key(sample_key(seed, k));
    let fresh = || envsim::reset(env_id, seed).map(|(s, _)| s);
    let rounds = if config.mode.iterative() {
        config.limits.max_iterations.max(1)
    } else {
        1
    };

    let mut diagnostics = Vec::new();
    let record = |diagnostics: &mut Vec<IterationRecord>, k: u32, t: &Trajectory, verdict: u8| {
        diagnostics.push(IterationRecord {
            k,
            exec_failures: t.exec_failures,
            length: t.len(),
            verdict,
        });
    };
    let accept = |instruction: Instruction, trajectory: Trajectory, k: u32| Demonstration {
        id: demo_id(env_id, seed),
        instruction,
        trajectory,
        env_id: env_id.to_string(),
        source: config.mode.source(),
        iterations_used: k,
        filter_verdict: 1,
    };
    let done = |outcome, diagnostics| RefineResult {
        env_id: env_id.to_string(),
        seed,
        outcome,
        diagnostics,
    };

    // Instruction-first seeds with a generated instruction whose first
    // rollout is judged as-is; later rounds relabel like trajectory-first.
    let (mut trajectory, mut given): (Trajectory, Option<Instruction>) = match config.mode.source() {
        Source::TrajectoryFirst => (at(0).explore_rollout(&mut fresh()?)?, None),
        Source::InstructionFirst => {
            let (session, obs) = envsim::reset(env_id, seed)?;
            drop(session);
            let g0 = at(0).generate_instruction(&obs)?;
            (at(0).follow_rollout(&mut fresh()?, &g0, &[])?, Some(g0))
        }
    };

    let mut last_instruction = given.clone();
    for k in 0..rounds {
        if trajectory.is_empty() {
            record(&mut diagnostics, k, &trajectory, 0);
            return Ok(done(
                RefineOutcome::Rejected {
                    instruction: last_instruction,
                    trajectory,
                },
                diagnostics,
            ));
        }
        let relabeled = given.is_none();
        let instruction = match given.take() {
            Some(g) => g,
            None => at(k).label_trajectory(&trajectory)?,
        };
        let verdict = at(k).judge(&instruction, &trajectory)?;
        record(&mut diagnostics, k, &trajectory, verdict);
        if verdict == 1 {
            return Ok(done(
                RefineOutcome::Accepted(accept(instruction, trajectory, k)),
                diagnostics,
            ));
        }
        last_instruction = Some(instruction.clone());
        if k + 1 < rounds && relabeled {
            trajectory = at(k + 1).follow_rollout(&mut fresh()?, &instruction, &[])?;
        }
    }
    Ok(done(
        RefineOutcome::Rejected {
            instruction: last_instruction,
            trajectory,
        },
        diagnostics,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub k: u32,
    /// Number of pairs judged at this round.
    pub count: usize,
    pub mean_exec_failures: f64,
    pub mean_length: f64,
    pub accept_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub env_id: String,
    pub mode: BootstrapMode,
    pub num_seeds: u32,
    pub completed_seeds: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub mean_iterations: f64,
    pub per_iteration: Vec<IterationSummary>,
    pub incomplete: bool,
    pub warnings: Vec<String>,
}

impl RunReport {
    pub fn from_results(config: &BootstrapConfig, results: &[RefineResult], error: Option<&str>) -> Self {
        let accepted: Vec<&Demonstration> = results.iter().filter_map(RefineResult::accepted).collect();
        let mut by_k: BTreeMap<u32, Vec<&IterationRecord>> = BTreeMap::new();
        for r in results {
            for d in &r.diagnostics {
                by_k.entry(d.k).or_default().push(d);
            }
        }
        let per_iteration = by_k
            .into_iter()
            .map(|(k, recs)| {
                let n = recs.len() as f64;
                IterationSummary {
                    k,
                    count: recs.len(),
                    mean_exec_failures: recs.iter().map(|r| f64::from(r.exec_failures)).sum::<f64>() / n,
                    mean_length: recs.iter().map(|r| r.length as f64).sum::<f64>() / n,
                    accept_count: recs.iter().filter(|r| r.verdict == 1).count(),
                }
            })
            .collect();
        let mut warnings = Vec::new();
        if accepted.is_empty() {
            warnings.push("no demonstrations were accepted; the buffer is empty".to_string());
        }
        if let Some(e) = error {
            warnings.push(format!("run stopped early: {e}"));
        }
        let mean_iterations = if accepted.is_empty() {
            0.0
        } else {
            accepted.iter().map(|d| f64::from(d.iterations_used)).sum::<f64>() / accepted.len() as f64
        };
        Self {
            env_id: config.env_id.clone(),
            mode: config.mode,
            num_seeds: config.num_seeds,
            completed_seeds: results.len(),
            accepted: accepted.len(),
            acceptance_rate: accepted.len() as f64 / f64::from(config.num_seeds.max(1)),
            mean_iterations,
            per_iteration,
            incomplete: error.is_some(),
            warnings,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub buffer: DemoBuffer,
    pub results: Vec<RefineResult>,
    pub report: RunReport,
    /// First error that stopped the run, if any.
    pub error: Option<String>,
}

impl RunOutput {
    pub fn rejected(&self) -> impl Iterator<Item = &RefineResult> {
        self.results.iter().filter(|r| r.accepted().is_none())
    }

    /// JSON lines describing every rejected pair, in seed order.
    pub fn rejected_jsonl(&self) -> String {
        let mut out = String::new();
        for r in self.rejected() {
            let RefineOutcome::Rejected {
                instruction,
                trajectory,
            } = &r.outcome
            else {
                continue;
            };
            let line = json!({
                "env_id": r.env_id,
                "seed": r.seed,
                "instruction": instruction.as_ref().map(|i| i.as_str()),
                "actions": trajectory.actions().map(|a| a.as_str()).collect::<Vec<_>>(),
                "exec_failures": trajectory.exec_failures,
                "terminated_by": trajectory.terminated_by,
                "diagnostics": r.diagnostics,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }

    /// Writes the buffer, the report and the rejected-pair sidecar.
    pub fn write(&self, buffer: &Path, report: &Path, rejected: &Path) -> Result<(), BootstrapError> {
        self.buffer.save(buffer)?;
        write_file(report, &self.report.to_json())?;
        write_file(rejected, &self.rejected_jsonl())
    }
}

pub fn write_file(path: &Path, text: &str) -> Result<(), BootstrapError> {
    std::fs::write(path, text).map_err(|source| BootstrapError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Default sidecar path for rejected pairs next to a buffer file.
pub fn rejected_path(buffer: &Path) -> std::path::PathBuf {
    let mut name = buffer.file_stem().unwrap_or_default().to_os_string();
    name.push(".rejected.jsonl");
    buffer.with_file_name(name)
}

/// Runs [`refine`] over `num_seeds` consecutive environment seeds. Seeds
/// are processed on `config.jobs` threads and collected in seed order. A
/// backend failure stops new seeds from starting; finished ones are kept.
pub fn bootstrap_run(
    config: &BootstrapConfig,
    lm: &dyn LanguageModel,
    prompts: &PromptSet,
) -> Result<RunOutput, BootstrapError> {
    config.validate()?;
    let seeds: Vec<u64> = (0..config.num_seeds).map(|i| config.env_seed(i)).collect();
    let stop = AtomicBool::new(false);
    let outcomes = par::map(&seeds, config.jobs, |&seed| {
        if stop.load(Ordering::Relaxed) {
            return None;
        }
        let r = refine(&config.env_id, seed, lm, prompts, config);
        if r.is_err() {
            stop.store(true, Ordering::Relaxed);
        }
        Some(r)
    });

    let mut results = Vec::new();
    let mut error = None;
    for outcome in outcomes.into_iter().flatten() {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                if error.is_none() {
                    error = Some(e.to_string());
                }
            }
        }
    }
    let mut buffer = DemoBuffer::new(&config.env_id);
    for r in &results {
        if let Some(d) = r.accepted() {
            buffer
                .push(d.clone())
                .map_err(|e| BootstrapError::Config(format!("refine produced an invalid demo: {e}")))?;
        }
    }
    let report = RunReport::from_results(config, &results, error.as_deref());
    Ok(RunOutput {
        buffer,
        results,
        report,
        error,
    })
}

/// Drops demonstrations whose instruction text repeats an earlier one.
pub fn dedup(buffer: &DemoBuffer) -> DemoBuffer {
    let mut seen = HashSet::new();
    let mut out = buffer.clone();
    out.retain(|d| seen.insert(d.instruction.as_str().to_string()));
    out
}
