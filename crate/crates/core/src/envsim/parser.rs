//! Action-string grammar and the low-level commands it produces.
//!
//! ```text
//! click <int> | type <int> "<text>" | clear <int> | move <int>
//! finish | finish: <text> | tool <ident>(<args>)
//! ```
//!
//! Keywords are case-insensitive. Inside `type` quotes, `\"`, `\\`, `\n` and
//! `\r` are the only escapes.

use std::fmt;

use thiserror::Error;

use crate::lm::LmError;
use crate::types::ActionString;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LowLevelCommand {
    Click(u32),
    Type(u32, String),
    Clear(u32),
    Move(u32),
    Finish(Option<String>),
    Tool { name: String, args: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CommandKind {
    Click,
    Type,
    Clear,
    Move,
    Finish,
    Tool,
}

impl CommandKind {
    pub const ALL: [CommandKind; 6] = [
        CommandKind::Click,
        CommandKind::Type,
        CommandKind::Clear,
        CommandKind::Move,
        CommandKind::Finish,
        CommandKind::Tool,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            CommandKind::Click => "click",
            CommandKind::Type => "type",
            CommandKind::Clear => "clear",
            CommandKind::Move => "move",
            CommandKind::Finish => "finish",
            CommandKind::Tool => "tool",
        }
    }

    pub fn production(self) -> &'static str {
        match self {
            CommandKind::Click => "click <int>",
            CommandKind::Type => "type <int> \"<text>\"",
            CommandKind::Clear => "clear <int>",
            CommandKind::Move => "move <int>",
            CommandKind::Finish => "finish | finish: <text>",
            CommandKind::Tool => "tool <ident>(<args>)",
        }
    }

    fn from_keyword(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.keyword().eq_ignore_ascii_case(word))
    }
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

impl LowLevelCommand {
    pub fn kind(&self) -> CommandKind {
        match self {
            LowLevelCommand::Click(_) => CommandKind::Click,
            LowLevelCommand::Type(..) => CommandKind::Type,
            LowLevelCommand::Clear(_) => CommandKind::Clear,
            LowLevelCommand::Move(_) => CommandKind::Move,
            LowLevelCommand::Finish(_) => CommandKind::Finish,
            LowLevelCommand::Tool { .. } => CommandKind::Tool,
        }
    }

    /// Canonical action string; `parse_grammar(render(c)) == c`.
    pub fn render(&self) -> String {
        match self {
            LowLevelCommand::Click(id) => format!("click {id}"),
            LowLevelCommand::Type(id, text) => format!("type {id} \"{}\"", escape(text)),
            LowLevelCommand::Clear(id) => format!("clear {id}"),
            LowLevelCommand::Move(id) => format!("move {id}"),
            LowLevelCommand::Finish(None) => "finish".to_string(),
            LowLevelCommand::Finish(Some(answer)) => format!("finish: {answer}"),
            LowLevelCommand::Tool { name, args } => format!("tool {name}({args})"),
        }
    }
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{message}; nearest production: `{nearest}`")]
pub struct ParseError {
    pub input: String,
    pub nearest: &'static str,
    pub message: String,
}

impl ParseError {
    fn args(kind: CommandKind, input: &str, why: &str) -> Self {
        Self {
            input: input.to_string(),
            nearest: kind.production(),
            message: format!("malformed {} action {input:?}: {why}", kind.keyword()),
        }
    }
}

fn nearest_kind(word: &str) -> CommandKind {
    let word = word.to_ascii_lowercase();
    CommandKind::ALL
        .into_iter()
        .min_by_key(|k| strsim::levenshtein(&word, k.keyword()))
        .expect("non-empty keyword list")
}

fn parse_id(kind: CommandKind, input: &str, rest: &str) -> Result<u32, ParseError> {
    let rest = rest.trim();
    if rest.is_empty() || !rest.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ParseError::args(kind, input, "expected an element id"));
    }
    rest.parse()
        .map_err(|_| ParseError::args(kind, input, "element id out of range"))
}

fn parse_quoted(kind: CommandKind, input: &str, rest: &str) -> Result<String, ParseError> {
    let inner = rest
        .strip_prefix('"')
        .ok_or_else(|| ParseError::args(kind, input, "expected a double-quoted text"))?;
    let mut out = String::new();
    let mut chars = inner.chars();
    loop {
        match chars.next() {
            None => return Err(ParseError::args(kind, input, "unterminated quoted text")),
            Some('"') => break,
            Some('\\') => match chars.next() {
                Some('"') => out.push('"'),
                Some('\\') => out.push('\\'),
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                _ => return Err(ParseError::args(kind, input, "invalid escape in quoted text")),
            },
            Some(c) => out.push(c),
        }
    }
    if !chars.as_str().trim().is_empty() {
        return Err(ParseError::args(kind, input, "unexpected text after closing quote"));
    }
    Ok(out)
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Deterministic grammar parse of one action string.
pub fn parse_grammar(text: &str) -> Result<LowLevelCommand, ParseError> {
    let input = text.trim();
    let split = input
        .find(|c: char| c.is_whitespace() || c == ':' || c == '(')
        .unwrap_or(input.len());
    let (word, rest) = input.split_at(split);

    let Some(kind) = CommandKind::from_keyword(word) else {
        let nearest = nearest_kind(word);
        return Err(ParseError {
            input: input.to_string(),
            nearest: nearest.production(),
            message: format!("no production matches {input:?}"),
        });
    };

    match kind {
        CommandKind::Click => parse_id(kind, input, rest).map(LowLevelCommand::Click),
        CommandKind::Clear => parse_id(kind, input, rest).map(LowLevelCommand::Clear),
        CommandKind::Move => parse_id(kind, input, rest).map(LowLevelCommand::Move),
        CommandKind::Type => {
            let rest = rest.trim_start();
            let digits = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
            if digits == 0 {
                return Err(ParseError::args(kind, input, "expected an element id"));
            }
            let id = parse_id(kind, input, &rest[..digits])?;
            let after = &rest[digits..];
            if !after.starts_with(char::is_whitespace) {
                return Err(ParseError::args(kind, input, "expected a space before the text"));
            }
            let text = parse_quoted(kind, input, after.trim_start())?;
            Ok(LowLevelCommand::Type(id, text))
        }
        CommandKind::Finish => {
            if rest.trim().is_empty() {
                return Ok(LowLevelCommand::Finish(None));
            }
            let Some(answer) = rest.trim_start().strip_prefix(':') else {
                return Err(ParseError::args(kind, input, "expected `:` before the answer"));
            };
            let answer = answer.trim();
            Ok(LowLevelCommand::Finish(
                (!answer.is_empty()).then(|| answer.to_string()),
            ))
        }
        CommandKind::Tool => {
            let rest = rest.trim_start();
            let open = rest
                .find('(')
                .ok_or_else(|| ParseError::args(kind, input, "expected `(` after the tool name"))?;
            let name = rest[..open].trim_end();
            if !is_ident(name) {
                return Err(ParseError::args(kind, input, "tool name must be an identifier"));
            }
            let Some(args) = rest[open + 1..].strip_suffix(')') else {
                return Err(ParseError::args(kind, input, "expected `)` at the end"));
            };
            Ok(LowLevelCommand::Tool {
                name: name.to_string(),
                args: args.to_string(),
            })
        }
    }
}

/// Maps a free-form action string to one grammar line, typically via an LM.
///
/// `previous_error` carries the parse error of the last attempt, if any.
pub trait CommandTranslator {
    fn translate(&self, action: &str, attempt: u32, previous_error: Option<&str>) -> Result<String, LmError>;
}

#[derive(Clone, Copy)]
pub enum ParseMode<'a> {
    Grammar,
    LmController {
        translator: &'a dyn CommandTranslator,
        max_attempts: u32,
    },
}

#[derive(Debug, Error)]
pub enum ActionError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Backend(#[from] LmError),
}

/// Converts an action string into a low-level command.
///
/// In controller mode the translator is asked for a grammar line up to
/// `max_attempts` times; the last parse error is returned if none parses.
pub fn parse_action(text: &ActionString, mode: ParseMode<'_>) -> Result<LowLevelCommand, ActionError> {
    match mode {
        ParseMode::Grammar => Ok(parse_grammar(text.as_str())?),
        ParseMode::LmController {
            translator,
            max_attempts,
        } => {
            let mut last: Option<ParseError> = None;
            for attempt in 0..max_attempts.max(1) {
                let line = translator.translate(text.as_str(), attempt, last.as_ref().map(|e| e.message.as_str()))?;
                match parse_grammar(&line) {
                    Ok(cmd) => return Ok(cmd),
                    Err(e) => last = Some(e),
                }
            }
            Err(last.expect("at least one attempt").into())
        }
    }
}
