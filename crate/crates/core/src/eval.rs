//! Test-time episodes with in-context demonstrations, and their metrics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bootstrap::sample_key;
use crate::components::{Agent, ComponentError, Controller};
use crate::envsim::{self, EnvError, OracleOutcome, TaskOracle};
use crate::lm::{LanguageModel, PromptSet};
use crate::par;
use crate::retrieval::{top_k_indices, Embedder, RetrievalError};
use crate::types::{DemoBuffer, Demonstration, Limits, TerminatedBy};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("raw reward {0} is outside [-1, 1]")]
pub struct OutOfRange(pub f64);

/// Maps a raw reward in [-1, 1] onto [0, 1].
pub fn map_reward(raw: f64) -> Result<f64, OutOfRange> {
    if !(-1.0..=1.0).contains(&raw) {
        return Err(OutOfRange(raw));
    }
    Ok((raw + 1.0) / 2.0)
}

/// Lowercase, drop ASCII and Unicode punctuation, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let stripped: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation() && !is_unicode_punct(*c))
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{3000}'..='\u{303F}')
}

/// Token-level F1 between a prediction and a gold answer after
/// normalization, counting overlap as a multiset intersection.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoMode {
    None,
    Retrieved,
    Random,
    Shuffled,
    ManualFiltered,
}

impl DemoMode {
    pub const ALL: [DemoMode; 5] = [
        DemoMode::None,
        DemoMode::Retrieved,
        DemoMode::Random,
        DemoMode::Shuffled,
        DemoMode::ManualFiltered,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DemoMode::None => "none",
            DemoMode::Retrieved => "retrieved",
            DemoMode::Random => "random",
            DemoMode::Shuffled => "shuffled",
            DemoMode::ManualFiltered => "manual-filtered",
        }
    }

    pub fn needs_demos(self) -> bool {
        self != DemoMode::None
    }
}

impl fmt::Display for DemoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DemoMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Self::ALL.into_iter().find(|m| m.as_str() == norm).ok_or_else(|| {
            format!("unknown demo mode {s:?}; expected none, retrieved, random, shuffled or manual-filtered")
        })
    }
}

/// Reviewer verdict on one buffered demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mark {
    Accept,
    Reject,
}

impl Mark {
    pub fn as_str(self) -> &'static str {
        match self {
            Mark::Accept => "accept",
            Mark::Reject => "reject",
        }
    }
}

impl fmt::Display for Mark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mark {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "accept" => Ok(Mark::Accept),
            "reject" => Ok(Mark::Reject),
            other => Err(format!("mark must be accept or reject, got {other:?}")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarkRecord {
    id: String,
    verdict: Mark,
}

/// Manual review sidecar: one `{"id", "verdict"}` line per reviewed demo,
/// sorted by id. Later lines win when a file has repeats.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Marks(BTreeMap<String, Mark>);

#[derive(Debug, Error)]
pub enum MarksError {
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Marks {
    pub fn get(&self, id: &str) -> Option<Mark> {
        self.0.get(id).copied()
    }

    pub fn set(&mut self, id: impl Into<String>, mark: Mark) {
        self.0.insert(id.into(), mark);
    }

    pub fn accepted(&self) -> impl Iterator<Item = &str> {
        self.0
            .iter()
            .filter(|(_, m)| **m == Mark::Accept)
            .map(|(id, _)| id.as_str())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, verdict) in &self.0 {
            let rec = MarkRecord {
                id: id.clone(),
                verdict: *verdict,
            };
            out.push_str(&serde_json::to_string(&rec).expect("mark serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &str) -> Result<Self, MarksError> {
        let mut marks = Marks::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: MarkRecord = serde_json::from_str(line).map_err(|e| MarksError::Malformed {
                path: path.to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            marks.set(rec.id, rec.verdict);
        }
        Ok(marks)
    }

    /// A missing file is an empty set of marks.
    pub fn load(path: &Path) -> Result<Self, MarksError> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::parse(&text, &path.display().to_string()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(source) => Err(MarksError::Io {
                path: path.display().to_string(),
                source,
            }),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), MarksError> {
        std::fs::write(path, self.to_jsonl()).map_err(|source| MarksError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Default review sidecar path next to a buffer file.
pub fn marks_path(buffer: &Path) -> std::path::PathBuf {
    let mut name = buffer.file_stem().unwrap_or_default().to_os_string();
    name.push(".marks.jsonl");
    buffer.with_file_name(name)
}

/// Read access to stored demonstrations. Evaluation goes through this trait
/// so tests can observe whether the buffer was consulted at all.
pub trait DemoSource: Sync {
    fn demos(&self) -> &[Demonstration];
}

impl DemoSource for DemoBuffer {
    fn demos(&self) -> &[Demonstration] {
        DemoBuffer::demos(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub env_id: String,
    pub task_seeds: Vec<u64>,
    pub demo_mode: DemoMode,
    pub k: usize,
    pub limits: Limits,
    pub temperature: f64,
    pub controller: Controller,
    /// Seeds the random and shuffled demo selections.
    pub rng_seed: u64,
    pub jobs: usize,
    /// Reviewer marks, used by `manual-filtered`.
    pub marks: Marks,
}

impl EvalConfig {
    pub fn new(env_id: impl Into<String>, demo_mode: DemoMode) -> Self {
        Self {
            env_id: env_id.into(),
            task_seeds: (0..50).collect(),
            demo_mode,
            k: crate::retrieval::DEFAULT_K,
            limits: Limits::default(),
            temperature: crate::lm::DEFAULT_TEMPERATURE,
            controller: Controller::Grammar,
            rng_seed: 0,
            jobs: 1,
            marks: Marks::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("demo mode {0} needs a non-empty demonstration buffer")]
    EmptyBuffer(DemoMode),
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Component(#[from] ComponentError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub instruction: String,
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    pub exec_failures: u32,
    pub length: usize,
    pub terminated_by: TerminatedBy,
    pub demo_ids: Vec<String>,
    /// Shuffled mode only: the demo set was too small to permute.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub unshuffled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub env_id: String,
    pub demo_mode: DemoMode,
    pub k: usize,
    pub episodes: usize,
    pub mean_score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_f1: Option<f64>,
    pub mean_exec_failures: f64,
    pub per_task: Vec<EpisodeResult>,
    pub warnings: Vec<String>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MetricsReport {
    pub fn from_episodes(config: &EvalConfig, per_task: Vec<EpisodeResult>, mut warnings: Vec<String>) -> Self {
        let f1s: Vec<f64> = per_task.iter().filter_map(|e| e.f1).collect();
        let unshuffled = per_task.iter().filter(|e| e.unshuffled).count();
        if unshuffled > 0 {
            warnings.push(format!(
                "{unshuffled} episode(s) had a single demonstration; instructions could not be permuted"
            ));
        }
        Self {
            env_id: config.env_id.clone(),
            demo_mode: config.demo_mode,
            k: config.k,
            episodes: per_task.len(),
            mean_score: mean(per_task.iter().map(|e| e.score)),
            mean_f1: (!f1s.is_empty()).then(|| mean(f1s.iter().copied())),
            mean_exec_failures: mean(per_task.iter().map(|e| f64::from(e.exec_failures))),
            per_task,
            warnings,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Aligned plain-text summary and per-task table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "env {}  demo mode {}  k {}  episodes {}\nmean score {:.4}",
            self.env_id, self.demo_mode, self.k, self.episodes, self.mean_score
        );
        if let Some(f1) = self.mean_f1 {
            out.push_str(&format!("  mean F1 {f1:.4}"));
        }
        out.push_str(&format!("  mean exec failures {:.4}\n\n", self.mean_exec_failures));
        let header = ["seed", "score", "fails", "steps", "end", "instruction"];
        let rows: Vec<[String; 6]> = self
            .per_task
            .iter()
            .map(|e| {
                [
                    e.seed.to_string(),
                    format!("{:.3}", e.score),
                    e.exec_failures.to_string(),
                    e.length.to_string(),
                    format!("{:?}", e.terminated_by),
                    e.instruction.clone(),
                ]
            })
            .collect();
        let mut widths = header.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: [&str; 6]| {
            let mut s = String::new();
            for (i, c) in cells.iter().enumerate() {
                if i == 5 {
                    s.push_str(c);
                } else if i == 0 || i == 4 {
                    s.push_str(&format!("{c:<w$}  ", w = widths[i]));
                } else {
                    s.push_str(&format!("{c:>w$}  ", w = widths[i]));
                }
            }
            s.trim_end().to_string() + "\n"
        };
        out.push_str(&line(header));
        for r in &rows {
            out.push_str(&line([&r[0], &r[1], &r[2], &r[3], &r[4], &r[5]]));
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

/// Sattolo's algorithm: a uniformly random cyclic permutation, which has no
/// fixed points whenever `n >= 2`.
pub fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Keeps each trajectory but gives it the instruction of another demo in the
/// same set. Returns `false` when the set is too small to permute.
pub fn shuffle_instructions(demos: &mut [Demonstration], rng: &mut impl Rng) -> bool {
    if demos.len() < 2 {
        return false;
    }
    let perm = derangement(demos.len(), rng);
    let instructions: Vec<_> = demos.iter().map(|d| d.instruction.clone()).collect();
    for (d, &src) in demos.iter_mut().zip(&perm) {
        d.instruction = instructions[src].clone();
    }
    true
}

fn episode_rng(config: &EvalConfig, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_key(config.rng_seed, 0) ^ sample_key(seed, 1))
}

struct Selector<'s> {
    pool: Vec<&'s Demonstration>,
    embeddings: Vec<crate::retrieval::Embedding>,
}

impl<'s> Selector<'s> {
    fn new(config: &EvalConfig, source: &'s dyn DemoSource, embedder: &dyn Embedder) -> Result<Self, EvalError> {
        let all = source.demos();
        let pool: Vec<&Demonstration> = match config.demo_mode {
            DemoMode::ManualFiltered => {
                let ok: HashSet<&str> = config.marks.accepted().collect();
                all.iter().filter(|d| ok.contains(d.id.as_str())).collect()
            }
            _ => all.iter().collect(),
        };
        if pool.is_empty() {
            return Err(EvalError::EmptyBuffer(config.demo_mode));
        }
        let embeddings = match config.demo_mode {
            DemoMode::Random => Vec::new(),
            _ => pool
                .iter()
                .map(|d| embedder.embed(d.instruction.as_str()))
                .collect::<Result<_, _>>()?,
        };
        Ok(Self { pool, embeddings })
    }

    fn select(
        &self,
        config: &EvalConfig,
        query: &str,
        seed: u64,
        embedder: &dyn Embedder,
    ) -> Result<(Vec<Demonstration>, bool), EvalError> {
        let mut rng = episode_rng(config, seed);
        if config.demo_mode == DemoMode::Random {
            let picked = self
                .pool
                .choose_multiple(&mut rng, config.k)
                .map(|d| (*d).clone())
                .collect();
            return Ok((picked, false));
        }
        let q = embedder.embed(query)?;
        let scores: Vec<f64> = self
            .embeddings
            .iter()
            .map(|e| crate::retrieval::cosine(&q, e))
            .collect::<Result<_, _>>()?;
        let mut picked: Vec<Demonstration> = top_k_indices(&scores, config.k)
            .into_iter()
            .map(|i| self.pool[i].clone())
            .collect();
        let mut unshuffled = false;
        if config.demo_mode == DemoMode::Shuffled {
            unshuffled = !shuffle_instructions(&mut picked, &mut rng);
        }
        Ok((picked, unshuffled))
    }
}

/// Runs one follow rollout per task seed and scores it with the task oracle.
pub fn run_eval(
    config: &EvalConfig,
    source: Option<&dyn DemoSource>,
    lm: &dyn LanguageModel,
    prompts: &PromptSet,
    embedder: &dyn Embedder,
) -> Result<MetricsReport, EvalError> {
    envsim::inventory(&config.env_id)?;
    if config.k == 0 {
        return Err(EvalError::Config("k must be at least 1".into()));
    }
    if config.jobs == 0 {
        return Err(EvalError::Config("jobs must be at least 1".into()));
    }
    let selector = match (config.demo_mode, source) {
        (DemoMode::None, _) => None,
        (mode, None) => return Err(EvalError::EmptyBuffer(mode)),
        (_, Some(src)) => Some(Selector::new(config, src, embedder)?),
    };
    let mut warnings = Vec::new();
    if config.demo_mode == DemoMode::ManualFiltered {
        if let (Some(sel), Some(src)) = (&selector, source) {
            let dropped = src.demos().len() - sel.pool.len();
            if dropped > 0 {
                warnings.push(format!("{dropped} demonstration(s) not marked accept were skipped"));
            }
        }
    }

    let mut agent = Agent::for_env(lm, prompts, &config.env_id)?.with_budget(config.limits);
    agent.temperature = config.temperature;
    agent.controller = config.controller;

    let episodes = par::map(
        &config.task_seeds,
        config.jobs,
        |&seed| -> Result<EpisodeResult, EvalError> {
            let task = envsim::task_instance(&config.env_id, seed)?;
            let (demos, unshuffled) = match &selector {
                Some(sel) => sel.select(config, task.gold_instruction.as_str(), seed, embedder)?,
                None => (Vec::new(), false),
            };
            let (mut session, _) = envsim::reset(&config.env_id, seed)?;
            let traj = agent.with_key(sample_key(seed, u32::MAX)).follow_rollout(
                &mut session,
                &task.gold_instruction,
                &demos,
            )?;
            let (score, f1) = match &task.oracle {
                TaskOracle::Answer(gold) => {
                    let f1 = token_f1(session.answer().unwrap_or(""), gold);
                    (f1, Some(f1))
                }
                _ => {
                    let raw = match envsim::oracle_score(&task, &session) {
                        Ok(OracleOutcome::Reward(r)) => r,
                        Ok(OracleOutcome::GoldAnswer(_)) => unreachable!("web tasks have rewards"),
                        Err(EnvError::EpisodeNotDone) => -1.0,
                        Err(e) => return Err(e.into()),
                    };
                    (map_reward(raw).expect("oracle rewards are in range"), None)
                }
            };
            Ok(EpisodeResult {
                seed,
                instruction: task.gold_instruction.as_str().to_string(),
                score,
                f1,
                exec_failures: traj.exec_failures,
                length: traj.len(),
                terminated_by: traj.terminated_by,
                demo_ids: demos.iter().map(|d| d.id.clone()).collect(),
                unshuffled,
            })
        },
    );
    let per_task = episodes.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(MetricsReport::from_episodes(config, per_task, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reward_map() {
        assert_eq!(map_reward(-1.0).unwrap(), 0.0);
        assert_eq!(map_reward(1.0).unwrap(), 1.0);
        assert_eq!(map_reward(0.0).unwrap(), 0.5);
        assert!(map_reward(1.5).is_err());
        assert!(map_reward(f64::NAN).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1("300", "300"), 1.0);
        assert!((token_f1("the cat sat", "cat sat down") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(token_f1("", "10"), 0.0);
        assert_eq!(token_f1("", ""), 1.0);
        assert_eq!(token_f1("Canal House.", "canal house"), 1.0);
        assert_eq!(token_f1("a a a", "a"), 0.5);
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 2..20 {
            for _ in 0..20 {
                let p = derangement(n, &mut rng);
                assert!(p.iter().enumerate().all(|(i, &x)| i != x));
                let mut sorted = p.clone();
                sorted.sort();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            }
        }
        assert_eq!(derangement(1, &mut rng), [0]);
    }

    #[test]
    fn modes_parse() {
        for m in DemoMode::ALL {
            assert_eq!(m.as_str().parse::<DemoMode>().unwrap(), m);
        }
        assert_eq!("manual_filtered".parse::<DemoMode>().unwrap(), DemoMode::ManualFiltered);
        assert!("best".parse::<DemoMode>().is_err());
    }

    #[test]
    fn marks_round_trip_sorted() {
        let mut m = Marks::default();
        m.set("d17", Mark::Accept);
        m.set("a1", Mark::Reject);
        m.set("d17", Mark::Accept);
        let text = m.to_jsonl();
        assert_eq!(
            text,
            "{\"id\":\"a1\",\"verdict\":\"reject\"}\n{\"id\":\"d17\",\"verdict\":\"accept\"}\n"
        );
        assert_eq!(Marks::parse(&text, "x").unwrap(), m);
        assert_eq!(m.accepted().collect::<Vec<_>>(), ["d17"]);
        assert!(Marks::parse("{\"id\":\"a\",\"verdict\":\"maybe\"}", "x").is_err());
    }

    proptest! {
        #[test]
        fn f1_bounds_and_symmetry(a in "[a-c ,.]{0,12}", b in "[a-c ,.]{0,12}") {
            let x = token_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert!((x - token_f1(&b, &a)).abs() < 1e-12);
            prop_assert_eq!(token_f1(&a, &a), 1.0);
        }

        #[test]
        fn reward_map_is_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
            let (x, y) = (map_reward(a).unwrap(), map_reward(b).unwrap());
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(a < b, x < y);
        }
    }
}
