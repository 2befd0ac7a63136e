//! Deterministic desk-scale environments behind one session contract.
//!
//! Registered scenes: `choose_date`, `email_inbox` and `click_checkboxes`
//! (ToyWeb, DOM-like) and `toolbench` (tool calls over bundled fixtures).
//! A session is fully determined by `(env_id, seed)` and the command sequence.

pub mod calc;
pub mod dom;
pub mod parser;
pub mod toolbench;

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::types::{Instruction, Observation};
use dom::{ComposeKind, DomState, Scene, SceneModel, MONTHS, REPLY_PHRASES, SENDER_NAMES};
pub use parser::{
    parse_action, parse_grammar, ActionError, CommandKind, CommandTranslator, LowLevelCommand, ParseError, ParseMode,
};
use toolbench::ToolState;

pub const ENV_IDS: [&str; 4] = ["choose_date", "email_inbox", "click_checkboxes", "toolbench"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnvError {
    #[error("unknown environment {0:?}; registered: choose_date, email_inbox, click_checkboxes, toolbench")]
    UnknownEnv(String),
    #[error("episode is not done yet")]
    EpisodeNotDone,
    #[error("task is for {task} but the session is {session}")]
    TaskMismatch { task: String, session: String },
}

/// Environment-side failure of a well-formed command. Never consumes a step.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecutionError {
    #[error("cannot type on element {id}: a {tag} cannot be typed on")]
    TypeOnNonEditable { id: u32, tag: String },
    #[error("no element with id {0}")]
    UnknownElementId(u32),
    #[error("element {0} is not visible")]
    ElementNotVisible(u32),
    #[error("{0}")]
    ToolNotLoaded(String),
    #[error("bad tool call: {0}")]
    BadToolSyntax(String),
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("{0}")]
    UnsupportedCommand(String),
    #[error("there is no open message to send")]
    NothingToSend,
    #[error("the episode is already done")]
    EpisodeDone,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvState {
    Dom(DomState),
    Tool(ToolState),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvSession {
    pub env_id: String,
    pub seed: u64,
    pub state: EnvState,
    pub done: bool,
    pub step_count: u32,
}

fn scene_for(env_id: &str) -> Option<Option<Scene>> {
    match env_id {
        "choose_date" => Some(Some(Scene::ChooseDate)),
        "email_inbox" => Some(Some(Scene::EmailInbox)),
        "click_checkboxes" => Some(Some(Scene::ClickCheckboxes)),
        "toolbench" => Some(None),
        _ => None,
    }
}

fn scene_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Starts a fresh episode.
pub fn reset(env_id: &str, seed: u64) -> Result<(EnvSession, Observation), EnvError> {
    let scene = scene_for(env_id).ok_or_else(|| EnvError::UnknownEnv(env_id.to_string()))?;
    let state = match scene {
        Some(scene) => EnvState::Dom(DomState::generate(scene, &mut scene_rng(seed))),
        None => EnvState::Tool(ToolState::new()),
    };
    let session = EnvSession {
        env_id: env_id.to_string(),
        seed,
        state,
        done: false,
        step_count: 0,
    };
    let obs = session.observation();
    Ok((session, obs))
}

impl EnvSession {
    /// Current rendering; ToolBench shows the raw last tool output.
    pub fn observation(&self) -> Observation {
        let text = match &self.state {
            EnvState::Dom(dom) => dom.render(),
            EnvState::Tool(tool) => tool.last_output.clone(),
        };
        Observation::new(text, self.step_count)
    }

    /// Runs one command. Errors leave the state and step count untouched.
    pub fn execute(&mut self, cmd: &LowLevelCommand) -> Result<Observation, ExecutionError> {
        if self.done {
            return Err(ExecutionError::EpisodeDone);
        }
        let mut next = self.state.clone();
        let finished = match &mut next {
            EnvState::Dom(dom) => dom.apply(cmd)?,
            EnvState::Tool(tool) => tool.apply(cmd)?,
        };
        self.state = next;
        self.step_count += 1;
        self.done = finished;
        Ok(self.observation())
    }

    pub fn answer(&self) -> Option<&str> {
        match &self.state {
            EnvState::Tool(t) => t.answer.as_deref(),
            EnvState::Dom(_) => None,
        }
    }
}

/// Free-function form of [`EnvSession::execute`].
pub fn execute(session: &mut EnvSession, cmd: &LowLevelCommand) -> Result<Observation, ExecutionError> {
    session.execute(cmd)
}

/// Action-space description shown to every prompt as `{inventory_str}`.
pub fn inventory(env_id: &str) -> Result<&'static str, EnvError> {
    match scene_for(env_id) {
        Some(Some(_)) => Ok(WEB_INVENTORY),
        Some(None) => Ok(TOOL_INVENTORY),
        None => Err(EnvError::UnknownEnv(env_id.to_string())),
    }
}

const WEB_INVENTORY: &str = "\
click <id>: click the element with that id
type <id> \"<text>\": type text into an editable element (input or textarea)
clear <id>: clear the text of an editable element
move <id>: move the mouse over an element
finish: end the episode";

const TOOL_INVENTORY: &str = "\
tool load_table(<table>): load a table (tables: rentals)
tool filter_rows(<column> <op> <value>, ...): keep rows matching all conditions; ops are <, >, =, contains
tool query_rows(sort <column> asc|desc limit <n>): sort the current rows and keep the first n
tool get_value(<row name>, <column>): read one cell of the loaded table
tool load_graph(<graph>): load a graph (graphs: authors)
tool neighbors(<node>): list the neighbours of a node in the loaded graph
tool edge_check(<node>, <node>): check whether two nodes are connected
tool retrieve(<query>): search the passage corpus
tool calculator(<expression>): evaluate an arithmetic expression
tool set_op(intersect|union, [a, b], [c, d]): combine two lists
finish: <answer>: end the episode with an answer";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EmailGoal {
    Star { email: usize },
    Delete { email: usize },
    Reply { email: usize, text: String },
    Forward { email: usize, to: String },
}

/// Success predicate (or gold answer) for an evaluation task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskOracle {
    ChooseDate { month: usize, day: u32 },
    Email(EmailGoal),
    Checkboxes(BTreeSet<String>),
    Answer(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub env_id: String,
    pub seed: u64,
    pub gold_instruction: Instruction,
    pub oracle: TaskOracle,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleOutcome {
    /// ToyWeb raw reward: +1 success, -1 otherwise.
    Reward(f64),
    /// ToolBench gold answer, scored against the prediction by token F1.
    GoldAnswer(String),
}

fn instruction(text: String) -> Instruction {
    Instruction::new(text).expect("task templates are non-empty single lines")
}

/// Builds the task for `(env_id, seed)`; the scene matches `reset(env_id, seed)`.
pub fn task_instance(env_id: &str, seed: u64) -> Result<TaskInstance, EnvError> {
    let scene = scene_for(env_id).ok_or_else(|| EnvError::UnknownEnv(env_id.to_string()))?;
    let (gold, oracle) = match scene {
        Some(scene) => {
            let mut rng = scene_rng(seed);
            let state = DomState::generate(scene, &mut rng);
            web_task(&state.model, &mut rng)
        }
        None => tool_task(seed),
    };
    Ok(TaskInstance {
        env_id: env_id.to_string(),
        seed,
        gold_instruction: instruction(gold),
        oracle,
    })
}

fn web_task(model: &SceneModel, rng: &mut ChaCha8Rng) -> (String, TaskOracle) {
    match model {
        SceneModel::ChooseDate(_) => {
            let month = rng.random_range(0..12);
            let day = rng.random_range(1..=dom::days_in_month(month));
            (
                format!("Select {} {day} from the date picker and submit", MONTHS[month]),
                TaskOracle::ChooseDate { month, day },
            )
        }
        SceneModel::EmailInbox(inbox) => {
            let email = rng.random_range(0..inbox.emails.len());
            let sender = &inbox.emails[email].sender;
            match rng.random_range(0..4) {
                0 => (
                    format!("Star the email from {sender}"),
                    TaskOracle::Email(EmailGoal::Star { email }),
                ),
                1 => (
                    format!("Delete the email from {sender}"),
                    TaskOracle::Email(EmailGoal::Delete { email }),
                ),
                2 => {
                    let text = REPLY_PHRASES.choose(rng).expect("non-empty").to_string();
                    (
                        format!("Reply to {sender} with \"{text}\""),
                        TaskOracle::Email(EmailGoal::Reply { email, text }),
                    )
                }
                _ => {
                    let others: Vec<&str> = SENDER_NAMES.iter().copied().filter(|n| n != sender).collect();
                    let to = others.choose(rng).expect("non-empty").to_string();
                    (
                        format!("Forward the email from {sender} to {to}"),
                        TaskOracle::Email(EmailGoal::Forward { email, to }),
                    )
                }
            }
        }
        SceneModel::ClickCheckboxes(boxes) => {
            let count = rng.random_range(1..=boxes.labels.len());
            let mut picked: Vec<String> = boxes.labels.choose_multiple(rng, count).cloned().collect();
            picked.sort_by_key(|l| boxes.labels.iter().position(|x| x == l));
            let listed = match picked.as_slice() {
                [one] => one.clone(),
                [init @ .., last] => format!("{} and {last}", init.join(", ")),
                [] => unreachable!(),
            };
            (
                format!("Select {listed} and click Submit"),
                TaskOracle::Checkboxes(picked.into_iter().collect()),
            )
        }
    }
}

fn tool_task(seed: u64) -> (String, TaskOracle) {
    let j = seed / 5;
    let thresholds = [600i64, 700, 800, 900, 1000];
    let answer = |s: String| TaskOracle::Answer(s);
    match seed % 5 {
        0 => {
            let a = 3 + (j * 5 % 17) as i64;
            let b = 7 + (j * 3 % 13) as i64;
            let (sym, value) = match j % 3 {
                0 => ('+', a + b),
                1 => ('*', a * b),
                _ => ('-', a - b),
            };
            (format!("What is {a}{sym}{b}?"), answer(value.to_string()))
        }
        1 => {
            let p = thresholds[(j % 5) as usize];
            (
                format!("How many rentals have price < {p}?"),
                answer(toolbench::rentals_below(p).len().to_string()),
            )
        }
        2 => {
            let p = thresholds[(j % 5) as usize];
            let name = toolbench::most_reviewed_below(p).expect("fixture has rentals below every threshold");
            (
                format!("Which rental with price < {p} has the most reviews?"),
                answer(name),
            )
        }
        3 => {
            let graph = &toolbench::fixtures().graphs["authors"];
            let names: Vec<&String> = graph.keys().collect();
            let author = names[(j as usize) % names.len()];
            (
                format!("Who are the coauthors of {author}?"),
                answer(toolbench::coauthors(author).join(", ")),
            )
        }
        _ => {
            let pairs = toolbench::pairs_with_common_coauthors();
            let (a, b, common) = &pairs[(j as usize) % pairs.len()];
            (
                format!("Which authors have collaborated with both {a} and {b}?"),
                answer(common.join(", ")),
            )
        }
    }
}

/// Scores a finished episode: ToyWeb gives a raw reward in {-1, 1}, ToolBench
/// hands back the gold answer for F1 scoring.
pub fn oracle_score(task: &TaskInstance, terminal: &EnvSession) -> Result<OracleOutcome, EnvError> {
    if task.env_id != terminal.env_id || task.seed != terminal.seed {
        return Err(EnvError::TaskMismatch {
            task: format!("{}#{}", task.env_id, task.seed),
            session: format!("{}#{}", terminal.env_id, terminal.seed),
        });
    }
    if !terminal.done {
        return Err(EnvError::EpisodeNotDone);
    }
    let success = match (&task.oracle, &terminal.state) {
        (TaskOracle::Answer(gold), _) => return Ok(OracleOutcome::GoldAnswer(gold.clone())),
        (oracle, EnvState::Dom(dom)) => web_success(oracle, &dom.model),
        (_, EnvState::Tool(_)) => false,
    };
    Ok(OracleOutcome::Reward(if success { 1.0 } else { -1.0 }))
}

fn web_success(oracle: &TaskOracle, model: &SceneModel) -> bool {
    match (oracle, model) {
        (TaskOracle::ChooseDate { month, day }, SceneModel::ChooseDate(cal)) => {
            cal.submitted && cal.selected == Some((*month, *day))
        }
        (TaskOracle::Checkboxes(target), SceneModel::ClickCheckboxes(boxes)) => {
            let checked: BTreeSet<String> = boxes
                .labels
                .iter()
                .zip(&boxes.checked)
                .filter(|(_, c)| **c)
                .map(|(l, _)| l.clone())
                .collect();
            boxes.submitted && &checked == target
        }
        (TaskOracle::Email(goal), SceneModel::EmailInbox(inbox)) => match goal {
            EmailGoal::Star { email } => inbox.emails[*email].starred && !inbox.emails[*email].deleted,
            EmailGoal::Delete { email } => inbox.emails[*email].deleted,
            EmailGoal::Reply { email, text } => inbox
                .sent
                .as_ref()
                .is_some_and(|s| s.email == *email && s.kind == ComposeKind::Reply && s.body.trim() == text),
            EmailGoal::Forward { email, to } => inbox.sent.as_ref().is_some_and(|s| {
                s.email == *email && s.kind == ComposeKind::Forward && s.to.trim().eq_ignore_ascii_case(to)
            }),
        },
        _ => false,
    }
}
