//! The five agent components: exploration policy, instruction-following
//! policy, trajectory labeler, instruction generator and demonstration filter.
//! All of them are prompts over one shared language model.

use thiserror::Error;

use crate::envsim::{inventory, parse_action, CommandTranslator, EnvError, EnvSession, ParseMode};
use crate::lm::{
    sanitize, Bindings, LanguageModel, LmError, LmRequest, Placeholder, PromptSet, PromptTemplate, RequestMeta, Role,
    TemplateError,
};
use crate::types::{ActionString, Demonstration, Instruction, Limits, Observation, Step, TerminatedBy, Trajectory};

/// Observation characters shown per step when a trajectory is put in a prompt.
pub const PROMPT_OBSERVATION_CHARS: usize = 500;

#[derive(Debug, Error)]
pub enum ComponentError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl ComponentError {
    /// True when the language model itself could not be reached.
    pub fn is_backend_failure(&self) -> bool {
        matches!(self, ComponentError::Lm(LmError::BackendUnavailable { .. }))
    }
}

/// How action strings become environment commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Controller {
    Grammar,
    /// Ask the model to rewrite each action into grammar form.
    Lm {
        max_attempts: u32,
    },
}

/// Renders a trajectory for the labeler and filter prompts: every step's
/// observation (cut to `limit` characters) followed by its action, then the
/// final observation.
pub fn trajectory_text(traj: &Trajectory, limit: usize) -> String {
    let mut out = String::new();
    for step in &traj.steps {
        out.push_str("Observation:\n");
        out.push_str(&step.observation.excerpt(limit));
        out.push_str("\nAction: ");
        out.push_str(step.action.as_str());
        out.push('\n');
    }
    out.push_str("Final observation:\n");
    out.push_str(&traj.final_observation.excerpt(limit));
    out
}

/// In-context examples for the follow prompt, in the given order.
pub fn demos_text(demos: &[Demonstration]) -> String {
    if demos.is_empty() {
        return String::new();
    }
    let mut out = String::from("Examples of instructions carried out in this interface:\n\n");
    for (i, d) in demos.iter().enumerate() {
        out.push_str(&format!("Example {}\nExample instruction: {}\n", i + 1, d.instruction));
        out.push_str(&trajectory_text(&d.trajectory, PROMPT_OBSERVATION_CHARS));
        out.push_str("\n\n");
    }
    out
}

fn strip_label<'t>(text: &'t str, label: &str) -> &'t str {
    match text.get(..label.len()) {
        Some(head) if head.eq_ignore_ascii_case(label) => text[label.len()..].trim(),
        _ => text,
    }
}

fn thought(text: &str) -> Option<&str> {
    match text.get(..6) {
        Some(head) if head.eq_ignore_ascii_case("think:") => Some(text[6..].trim()),
        _ => None,
    }
}

/// Parses a filter reply; `None` when it is neither yes/1 nor no/0.
pub fn parse_verdict(reply: &str) -> Option<u8> {
    let r = reply.trim().trim_end_matches('.').trim().to_ascii_lowercase();
    match r.as_str() {
        "1" | "yes" => Some(1),
        "0" | "no" => Some(0),
        _ => None,
    }
}

/// One agent: a language model plus prompts, budgets and sampling settings.
#[derive(Clone, Copy)]
pub struct Agent<'a> {
    lm: &'a dyn LanguageModel,
    prompts: &'a PromptSet,
    inventory: &'a str,
    pub budget: Limits,
    pub temperature: f64,
    pub explore_temperature: f64,
    pub controller: Controller,
    /// Forwarded to every request so sampled scripts and seeded servers can
    /// vary per episode while staying reproducible.
    pub sample_key: u64,
}

impl<'a> Agent<'a> {
    pub fn new(lm: &'a dyn LanguageModel, prompts: &'a PromptSet, inventory: &'a str) -> Self {
        Self {
            lm,
            prompts,
            inventory,
            budget: Limits::default(),
            temperature: crate::lm::DEFAULT_TEMPERATURE,
            explore_temperature: crate::lm::DEFAULT_TEMPERATURE,
            controller: Controller::Grammar,
            sample_key: 0,
        }
    }

    pub fn for_env(lm: &'a dyn LanguageModel, prompts: &'a PromptSet, env_id: &str) -> Result<Self, EnvError> {
        Ok(Self::new(lm, prompts, inventory(env_id)?))
    }

    pub fn with_budget(mut self, budget: Limits) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_key(mut self, key: u64) -> Self {
        self.sample_key = key;
        self
    }

    fn bindings(&self) -> Bindings {
        let mut b = Bindings::new();
        // Left unbound when empty so a misconfigured agent fails loudly.
        if !self.inventory.is_empty() {
            b.set(Placeholder::InventoryStr, sanitize(self.inventory));
        }
        b
    }

    fn meta(&self, role: Role) -> RequestMeta {
        RequestMeta::new(role).key(self.sample_key)
    }

    fn ask(&self, prompt: String, meta: RequestMeta, temperature: f64) -> Result<String, LmError> {
        self.lm
            .complete(&LmRequest::new(prompt, meta).with_temperature(temperature))
    }

    /// Unconditioned rollout with the exploration prompt.
    pub fn explore_rollout(&self, session: &mut EnvSession) -> Result<Trajectory, ComponentError> {
        self.rollout(session, Role::Explore, self.bindings(), self.explore_temperature)
    }

    /// Rollout conditioned on `instruction`, with optional in-context demos.
    pub fn follow_rollout(
        &self,
        session: &mut EnvSession,
        instruction: &Instruction,
        demos: &[Demonstration],
    ) -> Result<Trajectory, ComponentError> {
        let b = self
            .bindings()
            .with(Placeholder::Instruction, sanitize(instruction.as_str()))
            .with(Placeholder::Demos, sanitize(&demos_text(demos)));
        self.rollout(session, Role::Follow, b, self.temperature)
    }

    fn rollout(
        &self,
        session: &mut EnvSession,
        role: Role,
        mut bindings: Bindings,
        temperature: f64,
    ) -> Result<Trajectory, ComponentError> {
        if session.step_count != 0 || session.done {
            return Err(ComponentError::Precondition("rollouts need a fresh session".into()));
        }
        let template = self.prompts.get(role);
        let max_resamples = self.budget.max_resamples.max(1);
        let mut steps: Vec<Step> = Vec::new();
        let mut history: Vec<String> = Vec::new();
        let mut exec_failures = 0u32;
        let mut obs = session.observation();

        let terminated_by = 'episode: loop {
            if steps.len() >= self.budget.max_steps {
                break TerminatedBy::StepBudget;
            }
            let step_idx = steps.len() as u32;
            let mut failures = 0u32;
            let mut thoughts = 0u32;
            let mut attempt = 0u32;
            let mut suffix = String::new();
            loop {
                bindings.set(Placeholder::History, history_text(&history));
                bindings.set(Placeholder::Observation, sanitize(obs.text()));
                let prompt = format!("{}{suffix}", template.render(&bindings)?.trim_end());
                let meta = self.meta(role).step(step_idx).attempt(attempt);
                attempt += 1;
                let text = match self.ask(prompt, meta, temperature) {
                    Ok(t) => t,
                    Err(LmError::MalformedResponse(why)) => {
                        // An empty reply is treated like an unusable action.
                        exec_failures += 1;
                        failures += 1;
                        if failures >= max_resamples {
                            break 'episode TerminatedBy::ResampleBudget;
                        }
                        suffix.push_str(&self.resample_suffix("", &why)?);
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                if let Some(t) = thought(&text) {
                    if thoughts < max_resamples {
                        thoughts += 1;
                        history.push(format!("Thought: {t}"));
                        continue;
                    }
                }
                let action = ActionString::new(strip_label(&text, "action:").to_string()).unwrap_or_else(|_| {
                    ActionString::new(text.clone()).expect("completions are non-empty single lines")
                });
                match self.execute(session, &action, step_idx) {
                    Ok(next) => {
                        steps.push(Step {
                            observation: obs,
                            action: action.clone(),
                        });
                        history.push(format!("Action: {action}"));
                        obs = next;
                        if session.done {
                            break 'episode TerminatedBy::FinishAction;
                        }
                        break;
                    }
                    Err(StepFailure::Backend(e)) => return Err(e.into()),
                    Err(StepFailure::Rejected(message)) => {
                        exec_failures += 1;
                        failures += 1;
                        if failures >= max_resamples {
                            break 'episode TerminatedBy::ResampleBudget;
                        }
                        suffix.push_str(&self.resample_suffix(action.as_str(), &message)?);
                    }
                }
            }
        };
        Ok(Trajectory {
            steps,
            final_observation: obs,
            exec_failures,
            terminated_by,
        })
    }

    fn resample_suffix(&self, bad_action: &str, message: &str) -> Result<String, TemplateError> {
        let note = self
            .prompts
            .resample
            .render(&Bindings::new().with(Placeholder::ErrorMessage, sanitize(message)))?;
        Ok(format!(" {}\n{}", sanitize(bad_action), note.trim_end()))
    }

    fn execute(&self, session: &mut EnvSession, action: &ActionString, step: u32) -> Result<Observation, StepFailure> {
        let cmd = match self.controller {
            Controller::Grammar => parse_action(action, ParseMode::Grammar),
            Controller::Lm { max_attempts } => {
                let translator = LmTranslator {
                    agent: self,
                    observation: session.observation(),
                    step,
                };
                parse_action(
                    action,
                    ParseMode::LmController {
                        translator: &translator,
                        max_attempts,
                    },
                )
            }
        };
        let cmd = match cmd {
            Ok(c) => c,
            Err(crate::envsim::ActionError::Parse(e)) => return Err(StepFailure::Rejected(e.to_string())),
            Err(crate::envsim::ActionError::Backend(e)) => return Err(StepFailure::Backend(e)),
        };
        session.execute(&cmd).map_err(|e| StepFailure::Rejected(e.to_string()))
    }

    fn short_answer(
        &self,
        template: &PromptTemplate,
        bindings: &Bindings,
        role: Role,
    ) -> Result<String, ComponentError> {
        let prompt = template.render(bindings)?;
        match self.ask(prompt.clone(), self.meta(role), self.temperature) {
            Err(LmError::MalformedResponse(_)) => {
                let repair = format!(
                    "{}\nYour previous reply was empty. Respond with a single non-empty line.\n",
                    prompt.trim_end()
                );
                Ok(self.ask(repair, self.meta(role).attempt(1), self.temperature)?)
            }
            other => Ok(other?),
        }
    }

    /// Hindsight instruction for a whole trajectory.
    pub fn label_trajectory(&self, traj: &Trajectory) -> Result<Instruction, ComponentError> {
        if traj.is_empty() {
            return Err(ComponentError::Precondition("cannot label an empty trajectory".into()));
        }
        let b = self.bindings().with(
            Placeholder::Trajectory,
            sanitize(&trajectory_text(traj, PROMPT_OBSERVATION_CHARS)),
        );
        let text = self.short_answer(&self.prompts.label, &b, Role::Label)?;
        Instruction::new(strip_label(&text, "instruction:"))
            .map_err(|e| LmError::MalformedResponse(e.to_string()).into())
    }

    /// A plausible instruction from the first observation alone.
    pub fn generate_instruction(&self, initial: &Observation) -> Result<Instruction, ComponentError> {
        let b = self.bindings().with(Placeholder::Observation, sanitize(initial.text()));
        let text = self.short_answer(&self.prompts.instruct, &b, Role::Instruct)?;
        Instruction::new(strip_label(&text, "instruction:"))
            .map_err(|e| LmError::MalformedResponse(e.to_string()).into())
    }

    /// Binary filter verdict. Unparseable replies get one repair query and
    /// then count as a rejection.
    pub fn judge(&self, instruction: &Instruction, traj: &Trajectory) -> Result<u8, ComponentError> {
        if traj.is_empty() {
            return Err(ComponentError::Precondition("cannot judge an empty trajectory".into()));
        }
        let b = self
            .bindings()
            .with(Placeholder::Instruction, sanitize(instruction.as_str()))
            .with(
                Placeholder::Trajectory,
                sanitize(&trajectory_text(traj, PROMPT_OBSERVATION_CHARS)),
            );
        let prompt = self.prompts.filter.render(&b)?;
        let first = match self.ask(prompt.clone(), self.meta(Role::Filter), self.temperature) {
            Ok(r) => r,
            Err(LmError::MalformedResponse(_)) => String::new(),
            Err(e) => return Err(e.into()),
        };
        if let Some(v) = parse_verdict(&first) {
            return Ok(v);
        }
        let repair = format!(
            "{} {}\nAnswer with only the digit 1 (yes) or 0 (no).\nAnswer:",
            prompt.trim_end(),
            sanitize(&first)
        );
        let second = match self.ask(repair, self.meta(Role::Filter).attempt(1), self.temperature) {
            Ok(r) => r,
            Err(LmError::MalformedResponse(_)) => String::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(parse_verdict(&second).unwrap_or_else(|| {
            log::warn!("filter reply {second:?} is not 1/0 after repair; rejecting");
            0
        }))
    }
}

enum StepFailure {
    Rejected(String),
    Backend(LmError),
}

fn history_text(history: &[String]) -> String {
    if history.is_empty() {
        "(none)".to_string()
    } else {
        sanitize(&history.join("\n"))
    }
}

struct LmTranslator<'x, 'a> {
    agent: &'x Agent<'a>,
    observation: Observation,
    step: u32,
}

impl CommandTranslator for LmTranslator<'_, '_> {
    fn translate(&self, action: &str, attempt: u32, previous_error: Option<&str>) -> Result<String, LmError> {
        let error = previous_error
            .map(|e| format!("Your previous command could not be parsed: {}\n", sanitize(e)))
            .unwrap_or_default();
        let b = self
            .agent
            .bindings()
            .with(Placeholder::Observation, sanitize(self.observation.text()))
            .with(Placeholder::Instruction, sanitize(action))
            .with(Placeholder::ErrorMessage, error);
        let prompt = self
            .agent
            .prompts
            .controller
            .render(&b)
            .map_err(|e| LmError::Config(e.to_string()))?;
        let meta = self.agent.meta(Role::Controller).step(self.step).attempt(attempt);
        self.agent.ask(prompt, meta, self.agent.temperature)
    }
}
