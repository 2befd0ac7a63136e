//! Deterministic rule-driven backend for tests and offline runs.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{LanguageModel, LmError, LmRequest, RequestMeta, Role};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Responses repeat in order, one per matching call.
    #[default]
    Cycle,
    /// Each response is used once; an exhausted rule stops matching.
    InOrder,
    /// Response indexed by the request's step (last one repeats).
    ByStep,
    /// Response chosen by hashing the script seed with the request's
    /// sample key, step and attempt. Independent of call order.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<String> {
        match self {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRule")]
pub struct ScriptRule {
    /// Whole-prompt match. Takes precedence over every other rule.
    pub exact: Option<String>,
    /// All substrings must occur in the prompt.
    pub contains: Vec<String>,
    pub role: Option<Role>,
    pub step: Option<u32>,
    pub attempt: Option<u32>,
    pub responses: Vec<String>,
    pub mode: MatchMode,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRule {
    exact: Option<String>,
    contains: Option<OneOrMany>,
    role: Option<Role>,
    step: Option<u32>,
    attempt: Option<u32>,
    responses: Vec<String>,
    #[serde(default)]
    mode: MatchMode,
}

impl TryFrom<RawRule> for ScriptRule {
    type Error = String;

    fn try_from(raw: RawRule) -> Result<Self, String> {
        if raw.responses.is_empty() {
            return Err("rule has no responses".into());
        }
        Ok(Self {
            exact: raw.exact,
            contains: raw.contains.map(OneOrMany::into_vec).unwrap_or_default(),
            role: raw.role,
            step: raw.step,
            attempt: raw.attempt,
            responses: raw.responses,
            mode: raw.mode,
        })
    }
}

impl ScriptRule {
    fn base(responses: &[&str]) -> Self {
        Self {
            exact: None,
            contains: Vec::new(),
            role: None,
            step: None,
            attempt: None,
            responses: responses.iter().map(|s| s.to_string()).collect(),
            mode: MatchMode::Cycle,
        }
    }

    pub fn contains(needle: impl Into<String>, responses: &[&str]) -> Self {
        Self {
            contains: vec![needle.into()],
            ..Self::base(responses)
        }
    }

    pub fn exact(prompt: impl Into<String>, responses: &[&str]) -> Self {
        Self {
            exact: Some(prompt.into()),
            ..Self::base(responses)
        }
    }

    pub fn role(role: Role, responses: &[&str]) -> Self {
        Self {
            role: Some(role),
            ..Self::base(responses)
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = Some(role);
        self
    }

    pub fn at_step(mut self, step: u32) -> Self {
        self.step = Some(step);
        self
    }

    pub fn at_attempt(mut self, attempt: u32) -> Self {
        self.attempt = Some(attempt);
        self
    }

    pub fn mode(mut self, mode: MatchMode) -> Self {
        self.mode = mode;
        self
    }

    fn matches(&self, prompt: &str, meta: &RequestMeta) -> bool {
        self.exact.as_deref().is_none_or(|e| e == prompt)
            && self.contains.iter().all(|c| prompt.contains(c.as_str()))
            && self.role.is_none_or(|r| r == meta.role)
            && self.step.is_none_or(|s| s == meta.step)
            && self.attempt.is_none_or(|a| a == meta.attempt)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFile {
    #[serde(default)]
    pub seed: u64,
    pub rules: Vec<ScriptRule>,
}

#[derive(Debug, Default)]
struct State {
    counters: Vec<usize>,
    calls: usize,
    captured: Vec<(RequestMeta, String)>,
}

/// Replays canned responses. Rules with `exact` are tried first; the rest
/// are tried in declaration order and the first match wins.
///
/// `cycle` and `in_order` rules keep a per-rule counter, so their output
/// depends on call order; use them only from one thread at a time.
/// `by_step` and `sample` rules are safe to share across threads.
#[derive(Debug)]
pub struct ScriptedBackend {
    seed: u64,
    rules: Vec<ScriptRule>,
    capture: bool,
    state: Mutex<State>,
}

impl ScriptedBackend {
    pub fn new(script: ScriptFile) -> Result<Self, LmError> {
        let mut seen = HashSet::new();
        for (i, rule) in script.rules.iter().enumerate() {
            if rule.responses.is_empty() {
                return Err(LmError::Config(format!("rule {i} has no responses")));
            }
            if let Some(e) = &rule.exact {
                if !seen.insert(e.as_str()) {
                    return Err(LmError::Config(format!("rule {i} duplicates an exact prompt")));
                }
            }
        }
        let n = script.rules.len();
        Ok(Self {
            seed: script.seed,
            rules: script.rules,
            capture: false,
            state: Mutex::new(State {
                counters: vec![0; n],
                ..State::default()
            }),
        })
    }

    pub fn from_rules(rules: Vec<ScriptRule>) -> Result<Self, LmError> {
        Self::new(ScriptFile { seed: 0, rules })
    }

    pub fn from_json(text: &str) -> Result<Self, LmError> {
        let script: ScriptFile =
            serde_json::from_str(text).map_err(|e| LmError::Config(format!("bad LM script: {e}")))?;
        Self::new(script)
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LmError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Records every prompt for later inspection.
    pub fn capturing(mut self) -> Self {
        self.capture = true;
        self
    }

    pub fn captured(&self) -> Vec<(RequestMeta, String)> {
        self.lock().captured.clone()
    }

    pub fn call_count(&self) -> usize {
        self.lock().calls
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Only the counter-based modes touch shared state.
    fn pick(&self, idx: usize, rule: &ScriptRule, meta: &RequestMeta) -> Option<String> {
        let n = rule.responses.len();
        let i = match rule.mode {
            MatchMode::Cycle => {
                let mut state = self.lock();
                let c = state.counters[idx];
                state.counters[idx] += 1;
                c % n
            }
            MatchMode::InOrder => {
                let mut state = self.lock();
                let c = state.counters[idx];
                if c >= n {
                    return None;
                }
                state.counters[idx] += 1;
                c
            }
            MatchMode::ByStep => (meta.step as usize).min(n - 1),
            MatchMode::Sample => {
                let h = mix(self.seed, meta.sample_key, idx as u64, meta.step, meta.attempt);
                (h % n as u64) as usize
            }
        };
        Some(rule.responses[i].clone())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn mix(seed: u64, key: u64, rule: u64, step: u32, attempt: u32) -> u64 {
    let mut h = splitmix64(seed);
    for v in [key, rule, step as u64, attempt as u64] {
        h = splitmix64(h ^ v);
    }
    h
}

impl LanguageModel for ScriptedBackend {
    fn generate(&self, req: &LmRequest) -> Result<String, LmError> {
        {
            let mut state = self.lock();
            state.calls += 1;
            if self.capture {
                state.captured.push((req.meta, req.prompt.clone()));
            }
        }
        let exact = self.rules.iter().enumerate().filter(|(_, r)| r.exact.is_some());
        let rest = self.rules.iter().enumerate().filter(|(_, r)| r.exact.is_none());
        for (idx, rule) in exact.chain(rest) {
            if rule.matches(&req.prompt, &req.meta) {
                if let Some(text) = self.pick(idx, rule, &req.meta) {
                    return Ok(text);
                }
            }
        }
        let tail: String = req
            .prompt
            .chars()
            .rev()
            .take(80)
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        Err(LmError::NoRuleMatched {
            role: req.meta.role,
            step: req.meta.step,
            attempt: req.meta.attempt,
            preview: tail,
        })
    }
}
