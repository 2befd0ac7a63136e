//! ToyWeb: three small seeded web scenes over a DOM-like node list.
//!
//! Each scene keeps its own model (calendar month, inbox, checkboxes) and
//! rebuilds the node list after every transition, so node ids are a pure
//! function of the scene layout and stay stable for the whole episode.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::parser::LowLevelCommand;
use super::ExecutionError;

pub const MONTHS: [&str; 12] = [
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];

const DAYS_IN_MONTH: [u32; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

pub const SENDER_NAMES: [&str; 12] = [
    "Trixi", "Bob", "Alice", "Carmen", "Dmitri", "Elena", "Farid", "Greta", "Hiro", "Ines", "Jonas", "Kemal",
];

const SUBJECTS: [&str; 8] = [
    "Lunch on Friday?",
    "Quarterly report",
    "Weekend plans",
    "Re: invoice",
    "Photos from the trip",
    "Meeting moved",
    "Quick question",
    "Happy birthday!",
];

pub(crate) const REPLY_PHRASES: [&str; 6] = [
    "Sounds good",
    "See you then",
    "Thanks a lot",
    "I will check",
    "Not this time",
    "Count me in",
];

const CHECKBOX_WORDS: [&str; 16] = [
    "apple", "river", "stone", "cloud", "maple", "tiger", "lemon", "orbit", "piano", "delta", "ember", "frost",
    "grape", "hazel", "ivory", "jolly",
];

pub fn days_in_month(month: usize) -> u32 {
    DAYS_IN_MONTH[month % 12]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Button,
    Input,
    Checkbox,
    Link,
    Text,
    DayCell,
    Tab,
    Textarea,
}

impl Tag {
    fn editable(self) -> bool {
        matches!(self, Tag::Input | Tag::Textarea)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::Button => "button",
            Tag::Input => "input",
            Tag::Checkbox => "checkbox",
            Tag::Link => "link",
            Tag::Text => "text",
            Tag::DayCell => "day_cell",
            Tag::Tab => "tab",
            Tag::Textarea => "textarea",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomNode {
    pub id: u32,
    pub parent: Option<u32>,
    pub tag: Tag,
    pub label: String,
    pub value: String,
    pub checked: bool,
    pub visible: bool,
}

impl DomNode {
    fn new(id: u32, parent: Option<u32>, tag: Tag, label: impl Into<String>) -> Self {
        Self {
            id,
            parent,
            tag,
            label: label.into(),
            value: String::new(),
            checked: false,
            visible: true,
        }
    }

    fn value(mut self, value: impl Into<String>) -> Self {
        self.value = value.into();
        self
    }

    fn checked(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    fn visible(mut self, visible: bool) -> Self {
        self.visible = visible;
        self
    }

    /// `[<id>] <tag> "<label>"` followed by state flags.
    pub fn render(&self) -> String {
        let mut line = format!("[{}] {} \"{}\"", self.id, self.tag, quote(&self.label));
        if !self.value.is_empty() {
            line.push_str(&format!(" value=\"{}\"", quote(&self.value)));
        }
        if self.checked {
            line.push_str(" checked");
        }
        line
    }
}

fn quote(text: &str) -> String {
    text.replace('\\', "\\\\")
        .replace('"', "\\\"")
        .replace('\n', "\\n")
        .replace('\r', "\\r")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scene {
    ChooseDate,
    EmailInbox,
    ClickCheckboxes,
}

impl Scene {
    pub fn env_id(self) -> &'static str {
        match self {
            Scene::ChooseDate => "choose_date",
            Scene::EmailInbox => "email_inbox",
            Scene::ClickCheckboxes => "click_checkboxes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Calendar {
    pub start_month: usize,
    pub month: usize,
    pub open: bool,
    /// (month index, day)
    pub selected: Option<(usize, u32)>,
    pub submitted: bool,
}

pub const DATEPICKER_ID: u32 = 0;
pub const PREV_ID: u32 = 1;
pub const MONTH_LABEL_ID: u32 = 2;
pub const NEXT_ID: u32 = 3;
const FIRST_DAY_ID: u32 = 4;
pub const DATE_SUBMIT_ID: u32 = FIRST_DAY_ID + 31;

pub fn day_cell_id(day: u32) -> u32 {
    FIRST_DAY_ID + day - 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComposeKind {
    Reply,
    Forward,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Email {
    pub sender: String,
    pub subject: String,
    pub selected: bool,
    pub starred: bool,
    pub deleted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Compose {
    pub email: usize,
    pub kind: ComposeKind,
    pub to: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inbox {
    pub emails: Vec<Email>,
    pub compose: Option<Compose>,
    pub sent: Option<Compose>,
}

const EMAIL_STRIDE: u32 = 6;

impl Inbox {
    fn body_id(&self) -> u32 {
        self.emails.len() as u32 * EMAIL_STRIDE
    }

    fn to_id(&self) -> u32 {
        self.body_id() + 1
    }

    pub fn send_id(&self) -> u32 {
        self.body_id() + 2
    }
}

/// Id of the email row control `offset` (0 select, 1 text, 2 star, 3 reply, 4 forward, 5 delete).
pub fn email_control_id(email: usize, offset: u32) -> u32 {
    email as u32 * EMAIL_STRIDE + offset
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkboxes {
    pub labels: Vec<String>,
    pub checked: Vec<bool>,
    pub submitted: bool,
}

impl Checkboxes {
    pub fn submit_id(&self) -> u32 {
        self.labels.len() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SceneModel {
    ChooseDate(Calendar),
    EmailInbox(Inbox),
    ClickCheckboxes(Checkboxes),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomState {
    pub scene: Scene,
    pub model: SceneModel,
    pub nodes: Vec<DomNode>,
}

impl DomState {
    pub fn generate(scene: Scene, rng: &mut ChaCha8Rng) -> Self {
        let model = match scene {
            Scene::ChooseDate => {
                let month = rng.random_range(0..12);
                SceneModel::ChooseDate(Calendar {
                    start_month: month,
                    month,
                    open: false,
                    selected: None,
                    submitted: false,
                })
            }
            Scene::EmailInbox => {
                let count = rng.random_range(3..=6);
                let mut names = SENDER_NAMES.to_vec();
                names.shuffle(rng);
                let emails = names
                    .into_iter()
                    .take(count)
                    .map(|sender| Email {
                        sender: sender.to_string(),
                        subject: SUBJECTS[rng.random_range(0..SUBJECTS.len())].to_string(),
                        selected: false,
                        starred: false,
                        deleted: false,
                    })
                    .collect();
                SceneModel::EmailInbox(Inbox {
                    emails,
                    compose: None,
                    sent: None,
                })
            }
            Scene::ClickCheckboxes => {
                let count = rng.random_range(4..=8);
                let mut words = CHECKBOX_WORDS.to_vec();
                words.shuffle(rng);
                let labels: Vec<String> = words.into_iter().take(count).map(str::to_string).collect();
                SceneModel::ClickCheckboxes(Checkboxes {
                    checked: vec![false; labels.len()],
                    labels,
                    submitted: false,
                })
            }
        };
        let mut state = Self {
            scene,
            model,
            nodes: Vec::new(),
        };
        state.rebuild();
        state
    }

    fn rebuild(&mut self) {
        self.nodes = build_nodes(&self.model);
    }

    pub fn node(&self, id: u32) -> Option<&DomNode> {
        self.nodes.get(id as usize)
    }

    /// One line per visible node, in id order.
    pub fn render(&self) -> String {
        self.nodes
            .iter()
            .filter(|n| n.visible)
            .map(DomNode::render)
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Applies a command. Returns `true` when the command ended the episode.
    /// On error the state is left untouched.
    pub fn apply(&mut self, cmd: &LowLevelCommand) -> Result<bool, ExecutionError> {
        let target = match cmd {
            LowLevelCommand::Finish(_) => return Ok(true),
            LowLevelCommand::Tool { name, .. } => {
                return Err(ExecutionError::UnsupportedCommand(format!(
                    "tool {name} is not available in a web scene"
                )))
            }
            LowLevelCommand::Click(id)
            | LowLevelCommand::Type(id, _)
            | LowLevelCommand::Clear(id)
            | LowLevelCommand::Move(id) => *id,
        };
        let node = self.node(target).ok_or(ExecutionError::UnknownElementId(target))?;
        if !node.visible {
            return Err(ExecutionError::ElementNotVisible(target));
        }
        let tag = node.tag;
        let done = match cmd {
            LowLevelCommand::Move(_) => false,
            LowLevelCommand::Type(_, text) => {
                if !tag.editable() {
                    return Err(ExecutionError::TypeOnNonEditable {
                        id: target,
                        tag: tag.to_string(),
                    });
                }
                self.edit(target, |value| value.push_str(text));
                false
            }
            LowLevelCommand::Clear(_) => {
                if !tag.editable() {
                    return Err(ExecutionError::TypeOnNonEditable {
                        id: target,
                        tag: tag.to_string(),
                    });
                }
                self.edit(target, String::clear);
                false
            }
            LowLevelCommand::Click(_) => self.click(target)?,
            _ => unreachable!(),
        };
        self.rebuild();
        Ok(done)
    }

    fn edit(&mut self, id: u32, f: impl FnOnce(&mut String)) {
        if let SceneModel::EmailInbox(inbox) = &mut self.model {
            let (body_id, to_id) = (inbox.body_id(), inbox.to_id());
            if let Some(compose) = inbox.compose.as_mut() {
                if id == body_id {
                    f(&mut compose.body);
                } else if id == to_id {
                    f(&mut compose.to);
                }
            }
        }
    }

    fn click(&mut self, id: u32) -> Result<bool, ExecutionError> {
        match &mut self.model {
            SceneModel::ChooseDate(cal) => {
                match id {
                    DATEPICKER_ID => cal.open = !cal.open,
                    PREV_ID => cal.month = (cal.month + 11) % 12,
                    NEXT_ID => cal.month = (cal.month + 1) % 12,
                    MONTH_LABEL_ID => {}
                    DATE_SUBMIT_ID => {
                        cal.submitted = true;
                        return Ok(true);
                    }
                    _ => {
                        let day = id - FIRST_DAY_ID + 1;
                        cal.selected = Some((cal.month, day));
                        cal.open = false;
                    }
                }
                Ok(false)
            }
            SceneModel::EmailInbox(inbox) => {
                if id == inbox.send_id() {
                    let Some(compose) = inbox.compose.take() else {
                        return Err(ExecutionError::NothingToSend);
                    };
                    inbox.sent = Some(compose);
                    return Ok(true);
                }
                if id >= inbox.body_id() {
                    // textarea / input: focusing is a no-op
                    return Ok(false);
                }
                let email = (id / EMAIL_STRIDE) as usize;
                match id % EMAIL_STRIDE {
                    0 => inbox.emails[email].selected = !inbox.emails[email].selected,
                    1 => {}
                    2 => inbox.emails[email].starred = !inbox.emails[email].starred,
                    3 | 4 => {
                        let kind = if id % EMAIL_STRIDE == 3 {
                            ComposeKind::Reply
                        } else {
                            ComposeKind::Forward
                        };
                        inbox.compose = Some(Compose {
                            email,
                            kind,
                            to: String::new(),
                            body: String::new(),
                        });
                    }
                    _ => {
                        inbox.emails[email].deleted = true;
                        if inbox.compose.as_ref().is_some_and(|c| c.email == email) {
                            inbox.compose = None;
                        }
                    }
                }
                Ok(false)
            }
            SceneModel::ClickCheckboxes(boxes) => {
                if id == boxes.submit_id() {
                    boxes.submitted = true;
                    return Ok(true);
                }
                let i = id as usize;
                boxes.checked[i] = !boxes.checked[i];
                Ok(false)
            }
        }
    }
}

fn build_nodes(model: &SceneModel) -> Vec<DomNode> {
    match model {
        SceneModel::ChooseDate(cal) => {
            let picked = cal
                .selected
                .map(|(m, d)| format!("{} {d}", MONTHS[m]))
                .unwrap_or_default();
            let mut nodes = vec![
                DomNode::new(DATEPICKER_ID, None, Tag::Button, "datepicker").value(picked),
                DomNode::new(PREV_ID, Some(DATEPICKER_ID), Tag::Button, "Prev").visible(cal.open),
                DomNode::new(MONTH_LABEL_ID, Some(DATEPICKER_ID), Tag::Text, MONTHS[cal.month]).visible(cal.open),
                DomNode::new(NEXT_ID, Some(DATEPICKER_ID), Tag::Button, "Next").visible(cal.open),
            ];
            for day in 1..=31 {
                nodes.push(
                    DomNode::new(day_cell_id(day), Some(DATEPICKER_ID), Tag::DayCell, day.to_string())
                        .checked(cal.selected == Some((cal.month, day)))
                        .visible(cal.open && day <= days_in_month(cal.month)),
                );
            }
            nodes.push(DomNode::new(DATE_SUBMIT_ID, None, Tag::Button, "Submit"));
            nodes
        }
        SceneModel::EmailInbox(inbox) => {
            let mut nodes = Vec::new();
            for (i, email) in inbox.emails.iter().enumerate() {
                let row = email_control_id(i, 1);
                let shown = !email.deleted;
                nodes.push(
                    DomNode::new(email_control_id(i, 0), Some(row), Tag::Checkbox, "select")
                        .checked(email.selected)
                        .visible(shown),
                );
                nodes.push(
                    DomNode::new(row, None, Tag::Text, format!("{}: {}", email.sender, email.subject)).visible(shown),
                );
                for (offset, label) in [(2, "Star"), (3, "Reply"), (4, "Forward"), (5, "Delete")] {
                    nodes.push(
                        DomNode::new(email_control_id(i, offset), Some(row), Tag::Button, label)
                            .checked(offset == 2 && email.starred)
                            .visible(shown),
                    );
                }
            }
            let compose = inbox.compose.as_ref();
            nodes.push(
                DomNode::new(inbox.body_id(), None, Tag::Textarea, "Message")
                    .value(compose.map(|c| c.body.clone()).unwrap_or_default())
                    .visible(compose.is_some()),
            );
            nodes.push(
                DomNode::new(inbox.to_id(), None, Tag::Input, "To")
                    .value(compose.map(|c| c.to.clone()).unwrap_or_default())
                    .visible(compose.is_some_and(|c| c.kind == ComposeKind::Forward)),
            );
            nodes.push(DomNode::new(inbox.send_id(), None, Tag::Button, "Send"));
            nodes
        }
        SceneModel::ClickCheckboxes(boxes) => {
            let mut nodes: Vec<DomNode> = boxes
                .labels
                .iter()
                .zip(&boxes.checked)
                .enumerate()
                .map(|(i, (label, &checked))| {
                    DomNode::new(i as u32, None, Tag::Checkbox, label.clone()).checked(checked)
                })
                .collect();
            nodes.push(DomNode::new(boxes.submit_id(), None, Tag::Button, "Submit"));
            nodes
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn state(scene: Scene, seed: u64) -> DomState {
        DomState::generate(scene, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn calendar(state: &DomState) -> &Calendar {
        match &state.model {
            SceneModel::ChooseDate(c) => c,
            _ => panic!("not a calendar"),
        }
    }

    #[test]
    fn node_ids_match_positions() {
        for scene in [Scene::ChooseDate, Scene::EmailInbox, Scene::ClickCheckboxes] {
            for seed in 0..10 {
                let s = state(scene, seed);
                for (i, n) in s.nodes.iter().enumerate() {
                    assert_eq!(n.id as usize, i);
                }
            }
        }
    }

    #[test]
    fn exactly_one_terminal_affordance_visible() {
        for scene in [Scene::ChooseDate, Scene::EmailInbox, Scene::ClickCheckboxes] {
            for seed in 0..20 {
                let s = state(scene, seed);
                let terminals = s
                    .nodes
                    .iter()
                    .filter(|n| n.visible && n.tag == Tag::Button && (n.label == "Submit" || n.label == "Send"))
                    .count();
                assert_eq!(terminals, 1, "{scene:?} seed {seed}");
            }
        }
    }

    #[test]
    fn calendar_opens_and_selects() {
        let mut s = state(Scene::ChooseDate, 1);
        assert!(!s.render().contains("Prev"));
        assert_eq!(
            s.apply(&LowLevelCommand::Click(PREV_ID)),
            Err(ExecutionError::ElementNotVisible(PREV_ID))
        );
        s.apply(&LowLevelCommand::Click(DATEPICKER_ID)).unwrap();
        assert!(s.render().contains("[1] button \"Prev\""));
        let month = calendar(&s).month;
        s.apply(&LowLevelCommand::Click(day_cell_id(7))).unwrap();
        assert_eq!(calendar(&s).selected, Some((month, 7)));
        assert!(s.render().contains(&format!("value=\"{} 7\"", MONTHS[month])));
        assert!(!s.render().contains("Prev"));
        assert_eq!(s.apply(&LowLevelCommand::Click(DATE_SUBMIT_ID)), Ok(true));
    }

    #[test]
    fn short_months_hide_trailing_days() {
        let mut s = state(Scene::ChooseDate, 0);
        s.apply(&LowLevelCommand::Click(DATEPICKER_ID)).unwrap();
        while calendar(&s).month != 1 {
            s.apply(&LowLevelCommand::Click(NEXT_ID)).unwrap();
        }
        assert!(s.render().contains("day_cell \"28\""));
        assert!(!s.render().contains("day_cell \"29\""));
        assert_eq!(
            s.apply(&LowLevelCommand::Click(day_cell_id(30))),
            Err(ExecutionError::ElementNotVisible(day_cell_id(30)))
        );
    }

    #[test]
    fn reply_flow() {
        let mut s = state(Scene::EmailInbox, 3);
        let SceneModel::EmailInbox(inbox) = &s.model else {
            unreachable!()
        };
        let send = inbox.send_id();
        let body = inbox.body_id();
        assert_eq!(
            s.apply(&LowLevelCommand::Click(send)),
            Err(ExecutionError::NothingToSend)
        );
        assert_eq!(
            s.apply(&LowLevelCommand::Type(body, "x".into())),
            Err(ExecutionError::ElementNotVisible(body))
        );
        s.apply(&LowLevelCommand::Click(email_control_id(1, 3))).unwrap();
        s.apply(&LowLevelCommand::Type(body, "See you".into())).unwrap();
        s.apply(&LowLevelCommand::Type(body, " then".into())).unwrap();
        assert!(s.render().contains("[") && s.render().contains("value=\"See you then\""));
        assert_eq!(s.apply(&LowLevelCommand::Click(send)), Ok(true));
        let SceneModel::EmailInbox(inbox) = &s.model else {
            unreachable!()
        };
        let sent = inbox.sent.as_ref().unwrap();
        assert_eq!(
            (sent.email, sent.kind, sent.body.as_str()),
            (1, ComposeKind::Reply, "See you then")
        );
    }

    #[test]
    fn delete_hides_row() {
        let mut s = state(Scene::EmailInbox, 5);
        let before = s.render().lines().count();
        s.apply(&LowLevelCommand::Click(email_control_id(0, 5))).unwrap();
        assert_eq!(s.render().lines().count(), before - 6);
        assert_eq!(
            s.apply(&LowLevelCommand::Click(email_control_id(0, 2))),
            Err(ExecutionError::ElementNotVisible(email_control_id(0, 2)))
        );
    }

    #[test]
    fn checkbox_toggle_and_type_error() {
        let mut s = state(Scene::ClickCheckboxes, 2);
        s.apply(&LowLevelCommand::Click(0)).unwrap();
        assert!(s.render().lines().next().unwrap().ends_with(" checked"));
        assert!(matches!(
            s.apply(&LowLevelCommand::Type(0, "x".into())),
            Err(ExecutionError::TypeOnNonEditable { id: 0, .. })
        ));
        s.apply(&LowLevelCommand::Click(0)).unwrap();
        assert!(!s.render().lines().next().unwrap().ends_with(" checked"));
    }

    #[test]
    fn render_escapes_quotes() {
        let node = DomNode::new(4, None, Tag::Input, "To").value("say \"hi\"");
        assert_eq!(node.render(), r#"[4] input "To" value="say \"hi\"""#);
    }
}
