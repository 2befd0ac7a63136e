//! Domain types shared by every module, plus the one-line JSON record used to
//! persist demonstrations.
//!
//! Records are written with sorted keys so buffer files are byte-stable and
//! diff cleanly. Observation step indices are not stored; they are implied by
//! position when a record is loaded.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest observation text kept, in characters, including the marker.
pub const MAX_OBSERVATION_CHARS: usize = 2000;
/// Appended to an observation whose text had to be cut.
pub const TRUNCATION_MARKER: &str = " ...[truncated]";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TypeError {
    #[error("action string must be non-empty")]
    EmptyAction,
    #[error("action string must be a single line: {0:?}")]
    MultilineAction(String),
    #[error("instruction must be non-empty")]
    EmptyInstruction,
    #[error("instruction must be a single line: {0:?}")]
    MultilineInstruction(String),
}

/// A single surface action emitted by a policy, e.g. `click 12`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActionString(String);

impl ActionString {
    pub fn new(text: impl Into<String>) -> Result<Self, TypeError> {
        let text = text.into();
        if text.is_empty() {
            return Err(TypeError::EmptyAction);
        }
        if text.contains(['\n', '\r']) {
            return Err(TypeError::MultilineAction(text));
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ActionString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Cut `text` to at most `limit` characters, marker included.
pub fn truncate_chars(text: &str, limit: usize) -> String {
    if text.chars().count() <= limit {
        return text.to_string();
    }
    let keep = limit.saturating_sub(TRUNCATION_MARKER.chars().count());
    let mut out: String = text.chars().take(keep).collect();
    out.push_str(TRUNCATION_MARKER);
    out
}

/// Rendered environment state at one time step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    text: String,
    step_index: u32,
}

impl Observation {
    /// Builds an observation, truncating overlong text.
    pub fn new(text: impl AsRef<str>, step_index: u32) -> Self {
        Self {
            text: truncate_chars(text.as_ref(), MAX_OBSERVATION_CHARS),
            step_index,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn step_index(&self) -> u32 {
        self.step_index
    }

    /// Text cut to `limit` characters, for prompts that bound context size.
    pub fn excerpt(&self, limit: usize) -> String {
        truncate_chars(&self.text, limit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminatedBy {
    /// A `finish` command or a terminal affordance (Submit, Send) ended the episode.
    FinishAction,
    StepBudget,
    ResampleBudget,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub observation: Observation,
    pub action: ActionString,
}

/// Alternating observations and actions for one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub final_observation: Observation,
    pub exec_failures: u32,
    pub terminated_by: TerminatedBy,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> impl Iterator<Item = &ActionString> {
        self.steps.iter().map(|s| &s.action)
    }

    /// Checks the structural invariants against the configured budgets.
    pub fn validate(&self, limits: &Limits) -> Result<(), String> {
        if self.steps.len() > limits.max_steps {
            return Err(format!(
                "trajectory has {} steps, more than the budget of {}",
                self.steps.len(),
                limits.max_steps
            ));
        }
        if self.steps.is_empty() && self.terminated_by != TerminatedBy::ResampleBudget {
            return Err("empty trajectory not terminated by the re-sample budget".into());
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.observation.step_index as usize != i {
                return Err(format!(
                    "observation {i} has step index {}",
                    step.observation.step_index
                ));
            }
        }
        if self.final_observation.step_index as usize != self.steps.len() {
            return Err("final observation index does not follow the last step".into());
        }
        let cap = (self.steps.len() as u64 + 1) * u64::from(limits.max_resamples);
        if u64::from(self.exec_failures) > cap {
            return Err(format!(
                "{} execution failures exceed the cap of {cap}",
                self.exec_failures
            ));
        }
        Ok(())
    }
}

/// A natural-language task description. Always trimmed and single-line.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Instruction(String);

impl Instruction {
    pub fn new(text: impl AsRef<str>) -> Result<Self, TypeError> {
        let text = text.as_ref().trim();
        if text.is_empty() {
            return Err(TypeError::EmptyInstruction);
        }
        if text.contains(['\n', '\r']) {
            return Err(TypeError::MultilineInstruction(text.to_string()));
        }
        Ok(Self(text.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    TrajectoryFirst,
    InstructionFirst,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demonstration {
    pub id: String,
    pub instruction: Instruction,
    pub trajectory: Trajectory,
    pub env_id: String,
    pub source: Source,
    pub iterations_used: u32,
    pub filter_verdict: u8,
}

/// Budgets that bound what a valid record may contain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    /// Max actions per episode (T).
    pub max_steps: usize,
    /// Max re-samples per step (m).
    pub max_resamples: u32,
    /// Max refinement round trips (T_iter).
    pub max_iterations: u32,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_steps: 15,
            max_resamples: 5,
            max_iterations: 5,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("line {line}: invariant violation: {message}")]
    InvariantViolation { line: usize, message: String },
}

#[derive(Debug, Error)]
pub enum BufferError {
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("line {line}: duplicate demonstration id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: demonstration for env {found:?} in a buffer for {expected:?}")]
    EnvMismatch {
        line: usize,
        expected: String,
        found: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    observation: String,
    action: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoRecord {
    id: String,
    instruction: String,
    env_id: String,
    source: Source,
    iterations_used: u32,
    filter_verdict: u8,
    steps: Vec<StepRecord>,
    final_observation: String,
    exec_failures: u32,
    terminated_by: TerminatedBy,
}

/// Encodes a demonstration as one JSON line with sorted keys (no trailing newline).
pub fn serialize_demo(demo: &Demonstration) -> String {
    let record = DemoRecord {
        id: demo.id.clone(),
        instruction: demo.instruction.as_str().to_string(),
        env_id: demo.env_id.clone(),
        source: demo.source,
        iterations_used: demo.iterations_used,
        filter_verdict: demo.filter_verdict,
        steps: demo
            .trajectory
            .steps
            .iter()
            .map(|s| StepRecord {
                observation: s.observation.text().to_string(),
                action: s.action.as_str().to_string(),
            })
            .collect(),
        final_observation: demo.trajectory.final_observation.text().to_string(),
        exec_failures: demo.trajectory.exec_failures,
        terminated_by: demo.trajectory.terminated_by,
    };
    // serde_json::Value maps are BTreeMaps, so this yields sorted keys.
    let value = serde_json::to_value(&record).expect("record is always representable");
    value.to_string()
}

/// Parses one record. `line` is the 1-based line number reported in errors.
///
/// Buffer files only hold accepted demonstrations, so a verdict other than 1
/// is an invariant violation.
pub fn deserialize_demo(text: &str, line: usize, limits: &Limits) -> Result<Demonstration, RecordError> {
    let malformed = |message: String| RecordError::MalformedRecord { line, message };
    let invalid = |message: String| RecordError::InvariantViolation { line, message };

    let record: DemoRecord = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;

    if record.id.is_empty() {
        return Err(invalid("empty id".into()));
    }
    if record.filter_verdict != 1 {
        return Err(invalid(format!(
            "filter_verdict is {}, buffers only hold 1",
            record.filter_verdict
        )));
    }
    if record.iterations_used > limits.max_iterations {
        return Err(invalid(format!(
            "iterations_used {} exceeds T_iter {}",
            record.iterations_used, limits.max_iterations
        )));
    }
    let instruction = Instruction::new(&record.instruction).map_err(|e| invalid(e.to_string()))?;
    if instruction.as_str() != record.instruction {
        return Err(invalid("instruction has surrounding whitespace".into()));
    }
    let mut steps = Vec::with_capacity(record.steps.len());
    for (i, s) in record.steps.into_iter().enumerate() {
        if s.observation.chars().count() > MAX_OBSERVATION_CHARS {
            return Err(invalid(format!(
                "observation {i} is longer than {MAX_OBSERVATION_CHARS} characters"
            )));
        }
        steps.push(Step {
            observation: Observation::new(s.observation, i as u32),
            action: ActionString::new(s.action).map_err(|e| invalid(e.to_string()))?,
        });
    }
    if steps.is_empty() {
        return Err(invalid("a demonstration needs at least one step".into()));
    }
    if record.final_observation.chars().count() > MAX_OBSERVATION_CHARS {
        return Err(invalid("final observation too long".into()));
    }
    let trajectory = Trajectory {
        final_observation: Observation::new(record.final_observation, steps.len() as u32),
        steps,
        exec_failures: record.exec_failures,
        terminated_by: record.terminated_by,
    };
    trajectory.validate(limits).map_err(invalid)?;

    Ok(Demonstration {
        id: record.id,
        instruction,
        trajectory,
        env_id: record.env_id,
        source: record.source,
        iterations_used: record.iterations_used,
        filter_verdict: record.filter_verdict,
    })
}

/// Accepted demonstrations for one environment, in insertion order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoBuffer {
    env_id: String,
    demos: Vec<Demonstration>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PushError {
    #[error("demonstration {0:?} was not accepted by the filter")]
    NotAccepted(String),
    #[error("duplicate demonstration id {0:?}")]
    DuplicateId(String),
    #[error("demonstration env {found:?} does not match buffer env {expected:?}")]
    EnvMismatch { expected: String, found: String },
}

impl DemoBuffer {
    pub fn new(env_id: impl Into<String>) -> Self {
        Self {
            env_id: env_id.into(),
            demos: Vec::new(),
        }
    }

    pub fn env_id(&self) -> &str {
        &self.env_id
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Demonstration> {
        self.demos.iter().find(|d| d.id == id)
    }

    pub fn push(&mut self, demo: Demonstration) -> Result<(), PushError> {
        if demo.filter_verdict != 1 {
            return Err(PushError::NotAccepted(demo.id));
        }
        if demo.env_id != self.env_id {
            return Err(PushError::EnvMismatch {
                expected: self.env_id.clone(),
                found: demo.env_id,
            });
        }
        if self.get(&demo.id).is_some() {
            return Err(PushError::DuplicateId(demo.id));
        }
        self.demos.push(demo);
        Ok(())
    }

    /// Keeps only the demos for which `keep` holds, preserving order.
    pub fn retain(&mut self, keep: impl FnMut(&Demonstration) -> bool) {
        self.demos.retain(keep);
    }

    /// Full file contents: one record per line, each newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for demo in &self.demos {
            out.push_str(&serialize_demo(demo));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(text: &str, env_id: &str, limits: &Limits) -> Result<Self, BufferError> {
        let mut buffer = Self::new(env_id);
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let line_no = i + 1;
            let demo = deserialize_demo(line, line_no, limits)?;
            match buffer.push(demo) {
                Ok(()) => {}
                Err(PushError::DuplicateId(id)) => return Err(BufferError::DuplicateId { line: line_no, id }),
                Err(PushError::EnvMismatch { expected, found }) => {
                    return Err(BufferError::EnvMismatch {
                        line: line_no,
                        expected,
                        found,
                    })
                }
                Err(PushError::NotAccepted(_)) => unreachable!("deserialize_demo rejects verdict 0"),
            }
        }
        Ok(buffer)
    }

    pub fn save(&self, path: &Path) -> Result<(), BufferError> {
        let io = |source| BufferError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(self.to_jsonl().as_bytes()).map_err(io)?;
        Ok(())
    }

    /// Loads a buffer file. When `env_id` is `None` it is taken from the first
    /// record (an empty file then yields a buffer with an empty env id).
    pub fn load(path: &Path, env_id: Option<&str>, limits: &Limits) -> Result<Self, BufferError> {
        let io = |source| BufferError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = fs::File::open(path).map_err(io)?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(io)?);
            text.push('\n');
        }
        let env = match env_id {
            Some(e) => e.to_string(),
            None => first_env_id(&text).unwrap_or_default(),
        };
        Self::parse_jsonl(&text, &env, limits)
    }
}

fn first_env_id(text: &str) -> Option<String> {
    let line = text.lines().find(|l| !l.trim().is_empty())?;
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    value.get("env_id")?.as_str().map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(text: &str, i: u32) -> Observation {
        Observation::new(text, i)
    }

    fn sample_demo(instruction: &str) -> Demonstration {
        Demonstration {
            id: "d1".into(),
            instruction: Instruction::new(instruction).unwrap(),
            trajectory: Trajectory {
                steps: vec![Step {
                    observation: obs("[0] button \"datepicker\"", 0),
                    action: ActionString::new("click 0").unwrap(),
                }],
                final_observation: obs("[0] button \"datepicker\"\n[1] button \"Prev\"", 1),
                exec_failures: 0,
                terminated_by: TerminatedBy::StepBudget,
            },
            env_id: "choose_date".into(),
            source: Source::TrajectoryFirst,
            iterations_used: 0,
            filter_verdict: 1,
        }
    }

    #[test]
    fn action_string_rejects_empty_and_newlines() {
        assert_eq!(ActionString::new(""), Err(TypeError::EmptyAction));
        assert!(ActionString::new("click 1\nclick 2").is_err());
        assert!(ActionString::new("click 1").is_ok());
    }

    #[test]
    fn instruction_is_trimmed() {
        assert_eq!(
            Instruction::new("  Reply to Trixi ").unwrap().as_str(),
            "Reply to Trixi"
        );
        assert!(Instruction::new("   ").is_err());
        assert!(Instruction::new("a\nb").is_err());
    }

    #[test]
    fn observation_truncates_with_marker() {
        let long = "x".repeat(5000);
        let o = Observation::new(&long, 0);
        assert_eq!(o.text().chars().count(), MAX_OBSERVATION_CHARS);
        assert!(o.text().ends_with(TRUNCATION_MARKER));
        let short = Observation::new("abc", 3);
        assert_eq!(short.text(), "abc");
    }

    #[test]
    fn serialized_demo_is_one_line_with_verdict() {
        let line = serialize_demo(&sample_demo("Select October 7"));
        assert!(!line.contains('\n'));
        assert!(line.contains("\"filter_verdict\":1"));
        // sorted keys
        assert!(line.starts_with("{\"env_id\":"));
    }

    #[test]
    fn quotes_in_instruction_are_escaped() {
        let line = serialize_demo(&sample_demo("Reply to Trixi with \"hi\""));
        assert!(!line.contains('\n'));
        assert!(line.contains(r#"Reply to Trixi with \"hi\""#));
        let back = deserialize_demo(&line, 1, &Limits::default()).unwrap();
        assert_eq!(back.instruction.as_str(), "Reply to Trixi with \"hi\"");
    }

    #[test]
    fn empty_object_is_malformed() {
        let err = deserialize_demo("{}", 4, &Limits::default()).unwrap_err();
        assert!(matches!(err, RecordError::MalformedRecord { line: 4, .. }));
    }

    #[test]
    fn iterations_beyond_t_iter_is_violation() {
        let mut demo = sample_demo("Select October 7");
        demo.iterations_used = 9;
        let line = serialize_demo(&demo);
        let err = deserialize_demo(&line, 2, &Limits::default()).unwrap_err();
        assert!(matches!(err, RecordError::InvariantViolation { line: 2, .. }), "{err}");
    }

    #[test]
    fn verdict_zero_fails_to_load() {
        let mut demo = sample_demo("Select October 7");
        demo.filter_verdict = 0;
        let text = format!("{}\n", serialize_demo(&demo));
        let err = DemoBuffer::parse_jsonl(&text, "choose_date", &Limits::default()).unwrap_err();
        assert!(matches!(
            err,
            BufferError::Record(RecordError::InvariantViolation { line: 1, .. })
        ));
    }

    #[test]
    fn buffer_rejects_duplicates_and_rejected_demos() {
        let mut buf = DemoBuffer::new("choose_date");
        buf.push(sample_demo("a")).unwrap();
        assert_eq!(buf.push(sample_demo("b")), Err(PushError::DuplicateId("d1".into())));
        let mut rejected = sample_demo("c");
        rejected.id = "d2".into();
        rejected.filter_verdict = 0;
        assert!(matches!(buf.push(rejected), Err(PushError::NotAccepted(_))));
        let mut other = sample_demo("c");
        other.id = "d3".into();
        other.env_id = "toolbench".into();
        assert!(matches!(buf.push(other), Err(PushError::EnvMismatch { .. })));
    }

    #[test]
    fn unknown_fields_are_malformed() {
        let mut v: serde_json::Value = serde_json::from_str(&serialize_demo(&sample_demo("x"))).unwrap();
        v["thought"] = serde_json::json!("hmm");
        let err = deserialize_demo(&v.to_string(), 1, &Limits::default()).unwrap_err();
        assert!(matches!(err, RecordError::MalformedRecord { .. }));
    }

    fn arb_text() -> impl Strategy<Value = String> {
        // printable, may include quotes, backslashes and unicode; no newlines
        "[a-zA-Z0-9 \"\\\\:\\[\\]éß€]{1,40}"
    }

    fn arb_demo() -> impl Strategy<Value = Demonstration> {
        (
            "[a-z0-9-]{1,12}",
            arb_text().prop_filter("non-blank", |s| !s.trim().is_empty()),
            prop::collection::vec((arb_text(), arb_text()), 1..15),
            "[ -~\n]{0,300}",
            0u32..=5,
            0u32..5,
            prop_oneof![Just(Source::TrajectoryFirst), Just(Source::InstructionFirst)],
            prop_oneof![
                Just(TerminatedBy::FinishAction),
                Just(TerminatedBy::StepBudget),
                Just(TerminatedBy::ResampleBudget)
            ],
        )
            .prop_map(|(id, instr, steps, fin, iters, fails, source, term)| Demonstration {
                id,
                instruction: Instruction::new(instr).unwrap(),
                trajectory: Trajectory {
                    final_observation: Observation::new(fin, steps.len() as u32),
                    steps: steps
                        .into_iter()
                        .enumerate()
                        .map(|(i, (o, a))| Step {
                            observation: Observation::new(o, i as u32),
                            action: ActionString::new(a).unwrap(),
                        })
                        .collect(),
                    exec_failures: fails,
                    terminated_by: term,
                },
                env_id: "email_inbox".into(),
                source,
                iterations_used: iters,
                filter_verdict: 1,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn record_round_trip(demo in arb_demo()) {
            let line = serialize_demo(&demo);
            prop_assert!(!line.contains('\n'));
            let back = deserialize_demo(&line, 1, &Limits::default()).unwrap();
            prop_assert_eq!(&back, &demo);
            prop_assert_eq!(serialize_demo(&back), line);
        }
    }
}
