//! Role-specific prompt templates with `{name}` placeholders.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which component a prompt (or LM request) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Explore,
    Label,
    Follow,
    Filter,
    Instruct,
    Controller,
    Resample,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Explore,
        Role::Label,
        Role::Follow,
        Role::Filter,
        Role::Instruct,
        Role::Controller,
        Role::Resample,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Explore => "explore",
            Role::Label => "label",
            Role::Follow => "follow",
            Role::Filter => "filter",
            Role::Instruct => "instruct",
            Role::Controller => "controller",
            Role::Resample => "resample",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Placeholder {
    InventoryStr,
    Observation,
    History,
    Instruction,
    Trajectory,
    ErrorMessage,
    Demos,
}

impl Placeholder {
    pub const ALL: [Placeholder; 7] = [
        Placeholder::InventoryStr,
        Placeholder::Observation,
        Placeholder::History,
        Placeholder::Instruction,
        Placeholder::Trajectory,
        Placeholder::ErrorMessage,
        Placeholder::Demos,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::InventoryStr => "inventory_str",
            Placeholder::Observation => "observation",
            Placeholder::History => "history",
            Placeholder::Instruction => "instruction",
            Placeholder::Trajectory => "trajectory",
            Placeholder::ErrorMessage => "error_message",
            Placeholder::Demos => "demos",
        }
    }
}

impl FromStr for Placeholder {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template for {role} uses unknown placeholder {{{name}}}")]
    UnknownPlaceholder { role: Role, name: String },
    #[error("placeholder {{{0}}} is not bound")]
    UnboundPlaceholder(&'static str),
    #[error("value for {{{0}}} contains a placeholder delimiter")]
    DelimiterInValue(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Placeholder),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    role: Role,
    body: String,
    pieces: Vec<Piece>,
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s.bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl PromptTemplate {
    /// Parses a body. `{ident}` must name an allowed placeholder; braces that
    /// do not enclose an identifier are literal text.
    pub fn new(role: Role, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        let mut pieces = Vec::new();
        let mut text = String::new();
        let mut rest = body.as_str();
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_ident(&after[..close]) => {
                    let name = &after[..close];
                    let slot = name.parse().map_err(|_| TemplateError::UnknownPlaceholder {
                        role,
                        name: name.to_string(),
                    })?;
                    text.push_str(&rest[..open]);
                    if !text.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut text)));
                    }
                    pieces.push(Piece::Slot(slot));
                    rest = &after[close + 1..];
                }
                _ => {
                    text.push_str(&rest[..=open]);
                    rest = after;
                }
            }
        }
        text.push_str(rest);
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        Ok(Self { role, body, pieces })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> Vec<Placeholder> {
        let mut out: Vec<Placeholder> = self
            .pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(*s),
                Piece::Text(_) => None,
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Plain substitution, no escaping. Values may not contain `{` or `}`.
    pub fn render(&self, bindings: &Bindings) -> Result<String, TemplateError> {
        for slot in self.placeholders() {
            let value = bindings
                .get(slot)
                .ok_or(TemplateError::UnboundPlaceholder(slot.name()))?;
            if value.contains(['{', '}']) {
                return Err(TemplateError::DelimiterInValue(slot.name()));
            }
        }
        let mut out = String::new();
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => out.push_str(bindings.get(*s).expect("checked above")),
            }
        }
        Ok(out)
    }
}

/// Placeholder values for one render call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings(BTreeMap<Placeholder, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, slot: Placeholder, value: impl Into<String>) -> Self {
        self.0.insert(slot, value.into());
        self
    }

    pub fn set(&mut self, slot: Placeholder, value: impl Into<String>) {
        self.0.insert(slot, value.into());
    }

    pub fn get(&self, slot: Placeholder) -> Option<&str> {
        self.0.get(&slot).map(String::as_str)
    }
}

/// Replaces template delimiters in free text so it can be bound safely.
pub fn sanitize(text: &str) -> String {
    text.replace('{', "(").replace('}', ")")
}

/// The seven templates used by the agent components.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub explore: PromptTemplate,
    pub label: PromptTemplate,
    pub follow: PromptTemplate,
    pub filter: PromptTemplate,
    pub instruct: PromptTemplate,
    pub controller: PromptTemplate,
    pub resample: PromptTemplate,
}

impl PromptSet {
    pub fn get(&self, role: Role) -> &PromptTemplate {
        match role {
            Role::Explore => &self.explore,
            Role::Label => &self.label,
            Role::Follow => &self.follow,
            Role::Filter => &self.filter,
            Role::Instruct => &self.instruct,
            Role::Controller => &self.controller,
            Role::Resample => &self.resample,
        }
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        let t = |role, body: &str| PromptTemplate::new(role, body).expect("bundled template is valid");
        Self {
            explore: t(Role::Explore, include_str!("../../prompts/explore.txt")),
            label: t(Role::Label, include_str!("../../prompts/label.txt")),
            follow: t(Role::Follow, include_str!("../../prompts/follow.txt")),
            filter: t(Role::Filter, include_str!("../../prompts/filter.txt")),
            instruct: t(Role::Instruct, include_str!("../../prompts/instruct.txt")),
            controller: t(Role::Controller, include_str!("../../prompts/controller.txt")),
            resample: t(Role::Resample, include_str!("../../prompts/resample.txt")),
        }
    }
}
