//! ToolBench: a tool-use session over bundled fixtures (one table, one graph,
//! a small passage corpus) plus a calculator and set operations.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use super::calc::{self, CalcError};
use super::parser::LowLevelCommand;
use super::ExecutionError;

const RENTALS_CSV: &str = include_str!("../../fixtures/toolbench/rentals.csv");
const AUTHORS_JSON: &str = include_str!("../../fixtures/toolbench/authors.json");
const CORPUS_JSONL: &str = include_str!("../../fixtures/toolbench/corpus.jsonl");

pub const RESET_OUTPUT: &str =
    "System: ToolBench session ready. Tables: rentals. Graphs: authors. Corpus: 20 passages.";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Cell {
    Int(i64),
    Text(String),
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.eq_ignore_ascii_case(name.trim()))
    }

    fn render_row(&self, row: &[Cell]) -> String {
        self.columns
            .iter()
            .zip(row)
            .map(|(c, v)| format!("{c}={v}"))
            .collect::<Vec<_>>()
            .join(" | ")
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq, Eq)]
pub struct Passage {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug)]
pub struct Fixtures {
    pub tables: BTreeMap<String, Table>,
    pub graphs: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    pub corpus: Vec<Passage>,
}

fn parse_table(name: &str, csv_text: &str) -> Table {
    let mut reader = csv::Reader::from_reader(csv_text.as_bytes());
    let columns = reader
        .headers()
        .expect("fixture header")
        .iter()
        .map(str::to_string)
        .collect();
    let rows = reader
        .records()
        .map(|r| {
            r.expect("fixture row")
                .iter()
                .map(|v| v.parse().map(Cell::Int).unwrap_or_else(|_| Cell::Text(v.to_string())))
                .collect()
        })
        .collect();
    Table {
        name: name.to_string(),
        columns,
        rows,
    }
}

/// Bundled read-only fixtures, parsed once.
pub fn fixtures() -> &'static Fixtures {
    static FIXTURES: OnceLock<Fixtures> = OnceLock::new();
    FIXTURES.get_or_init(|| {
        let mut tables = BTreeMap::new();
        tables.insert("rentals".to_string(), parse_table("rentals", RENTALS_CSV));
        let mut graphs = BTreeMap::new();
        graphs.insert(
            "authors".to_string(),
            serde_json::from_str(AUTHORS_JSON).expect("authors fixture"),
        );
        let corpus = CORPUS_JSONL
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).expect("corpus fixture"))
            .collect();
        Fixtures { tables, graphs, corpus }
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ToolState {
    pub loaded_table: Option<String>,
    pub working_rows: Option<Vec<usize>>,
    pub loaded_graphs: Vec<String>,
    pub last_output: String,
    pub answer: Option<String>,
}

fn bad(msg: impl Into<String>) -> ExecutionError {
    ExecutionError::BadToolSyntax(msg.into())
}

/// Splits on `sep` outside square brackets and parentheses.
fn split_top_level(args: &str, sep: char) -> Vec<String> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for c in args.chars() {
        match c {
            '[' | '(' => depth += 1,
            ']' | ')' => depth -= 1,
            _ => {}
        }
        if c == sep && depth == 0 {
            parts.push(cur.trim().to_string());
            cur.clear();
        } else {
            cur.push(c);
        }
    }
    parts.push(cur.trim().to_string());
    parts
}

fn parse_list(text: &str) -> Result<Vec<String>, ExecutionError> {
    let inner = text
        .trim()
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| bad(format!("expected a bracketed list, got {text:?}")))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    Ok(inner.split(',').map(|s| s.trim().to_string()).collect())
}

fn render_list(items: &[String]) -> String {
    format!("[{}]", items.join(", "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Lt,
    Gt,
    Eq,
    Contains,
}

struct Condition {
    column: usize,
    op: Op,
    value: String,
}

fn parse_condition(table: &Table, text: &str) -> Result<Condition, ExecutionError> {
    let lower = text.to_ascii_lowercase();
    let (pos, len, op) = if let Some(p) = lower.find(" contains ") {
        (p, " contains ".len(), Op::Contains)
    } else if let Some(p) = text.find(['<', '>', '=']) {
        let op = match &text[p..p + 1] {
            "<" => Op::Lt,
            ">" => Op::Gt,
            _ => Op::Eq,
        };
        (p, 1, op)
    } else {
        return Err(bad(format!(
            "condition {text:?} must look like `<column> <op> <value>`"
        )));
    };
    let column_name = text[..pos].trim();
    let value = text[pos + len..].trim().to_string();
    let column = table
        .column(column_name)
        .ok_or_else(|| bad(format!("unknown column {column_name:?}")))?;
    if value.is_empty() {
        return Err(bad(format!("condition {text:?} has no value")));
    }
    if matches!(op, Op::Lt | Op::Gt) && value.parse::<i64>().is_err() {
        return Err(bad(format!("`<` and `>` need a number, got {value:?}")));
    }
    Ok(Condition { column, op, value })
}

impl Condition {
    fn holds(&self, row: &[Cell]) -> bool {
        let cell = &row[self.column];
        match self.op {
            Op::Lt | Op::Gt => {
                let Cell::Int(v) = cell else { return false };
                let bound: i64 = self.value.parse().expect("validated");
                if self.op == Op::Lt {
                    *v < bound
                } else {
                    *v > bound
                }
            }
            Op::Eq => cell.to_string().eq_ignore_ascii_case(&self.value),
            Op::Contains => cell
                .to_string()
                .to_ascii_lowercase()
                .contains(&self.value.to_ascii_lowercase()),
        }
    }
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl ToolState {
    pub fn new() -> Self {
        Self {
            last_output: RESET_OUTPUT.to_string(),
            ..Self::default()
        }
    }

    fn table(&self) -> Result<&'static Table, ExecutionError> {
        let name = self
            .loaded_table
            .as_ref()
            .ok_or_else(|| ExecutionError::ToolNotLoaded("no table is loaded; call load_table first".into()))?;
        Ok(&fixtures().tables[name])
    }

    fn graph(&self) -> Result<&'static BTreeMap<String, Vec<String>>, ExecutionError> {
        let name = self
            .loaded_graphs
            .last()
            .ok_or_else(|| ExecutionError::ToolNotLoaded("no graph is loaded; call load_graph first".into()))?;
        Ok(&fixtures().graphs[name])
    }

    fn rows_listing(table: &Table, rows: &[usize]) -> String {
        let mut out = format!("{} rows", rows.len());
        for &r in rows {
            out.push('\n');
            out.push_str(&table.render_row(&table.rows[r]));
        }
        out
    }

    /// Applies a command; returns `true` when the episode is finished.
    /// The state is unchanged on error.
    pub fn apply(&mut self, cmd: &LowLevelCommand) -> Result<bool, ExecutionError> {
        match cmd {
            LowLevelCommand::Finish(answer) => {
                let answer = answer.clone().unwrap_or_default();
                self.last_output = format!("Finished with answer: {answer}");
                self.answer = Some(answer);
                Ok(true)
            }
            LowLevelCommand::Tool { name, args } => {
                let output = self.call(name, args)?;
                self.last_output = output;
                Ok(false)
            }
            other => Err(ExecutionError::UnsupportedCommand(format!(
                "{} is not available in ToolBench; use `tool <name>(<args>)`",
                other.kind()
            ))),
        }
    }

    fn call(&mut self, name: &str, args: &str) -> Result<String, ExecutionError> {
        let fx = fixtures();
        match name {
            "load_table" => {
                let table = fx
                    .tables
                    .get(args.trim())
                    .ok_or_else(|| bad(format!("unknown table {:?}", args.trim())))?;
                self.loaded_table = Some(table.name.clone());
                self.working_rows = None;
                Ok(format!(
                    "Loaded table {} ({} rows). Columns: {}",
                    table.name,
                    table.rows.len(),
                    table.columns.join(", ")
                ))
            }
            "filter_rows" => {
                let table = self.table()?;
                let conditions = split_top_level(args, ',')
                    .iter()
                    .map(|c| parse_condition(table, c))
                    .collect::<Result<Vec<_>, _>>()?;
                let rows: Vec<usize> = (0..table.rows.len())
                    .filter(|&r| conditions.iter().all(|c| c.holds(&table.rows[r])))
                    .collect();
                let out = Self::rows_listing(table, &rows);
                self.working_rows = Some(rows);
                Ok(out)
            }
            "query_rows" => {
                let table = self.table()?;
                let words: Vec<&str> = args.split_whitespace().collect();
                let [sort, column, dir, limit, n] = words.as_slice() else {
                    return Err(bad("expected `sort <column> asc|desc limit <n>`"));
                };
                if !sort.eq_ignore_ascii_case("sort") || !limit.eq_ignore_ascii_case("limit") {
                    return Err(bad("expected `sort <column> asc|desc limit <n>`"));
                }
                let col = table
                    .column(column)
                    .ok_or_else(|| bad(format!("unknown column {column:?}")))?;
                let desc = match dir.to_ascii_lowercase().as_str() {
                    "asc" => false,
                    "desc" => true,
                    _ => return Err(bad(format!("sort direction must be asc or desc, got {dir:?}"))),
                };
                let n: usize = n
                    .parse()
                    .map_err(|_| bad(format!("limit must be a number, got {n:?}")))?;
                let mut rows = self
                    .working_rows
                    .clone()
                    .unwrap_or_else(|| (0..table.rows.len()).collect());
                rows.sort_by(|&a, &b| {
                    let ord = table.rows[a][col].cmp(&table.rows[b][col]);
                    if desc {
                        ord.reverse()
                    } else {
                        ord
                    }
                });
                rows.truncate(n);
                Ok(Self::rows_listing(table, &rows))
            }
            "get_value" => {
                let table = self.table()?;
                let parts = split_top_level(args, ',');
                let [row_name, column] = parts.as_slice() else {
                    return Err(bad("expected `get_value(<row name>, <column>)`"));
                };
                let col = table
                    .column(column)
                    .ok_or_else(|| bad(format!("unknown column {column:?}")))?;
                let row = table
                    .rows
                    .iter()
                    .find(|r| r[0].to_string().eq_ignore_ascii_case(row_name))
                    .ok_or_else(|| bad(format!("no row named {row_name:?}")))?;
                Ok(row[col].to_string())
            }
            "load_graph" => {
                let key = args.trim();
                let graph = fx
                    .graphs
                    .get(key)
                    .ok_or_else(|| bad(format!("unknown graph {key:?}")))?;
                if !self.loaded_graphs.iter().any(|g| g == key) {
                    self.loaded_graphs.push(key.to_string());
                }
                Ok(format!("Loaded graph {key} ({} nodes)", graph.len()))
            }
            "neighbors" => {
                let graph = self.graph()?;
                let node = args.trim();
                let mut out = graph
                    .iter()
                    .find(|(k, _)| k.eq_ignore_ascii_case(node))
                    .map(|(_, v)| v.clone())
                    .ok_or_else(|| bad(format!("unknown node {node:?}")))?;
                out.sort();
                Ok(render_list(&out))
            }
            "edge_check" => {
                let graph = self.graph()?;
                let parts = split_top_level(args, ',');
                let [a, b] = parts.as_slice() else {
                    return Err(bad("expected `edge_check(<node>, <node>)`"));
                };
                let neighbors = graph
                    .iter()
                    .find(|(k, _)| k.eq_ignore_ascii_case(a))
                    .map(|(_, v)| v)
                    .ok_or_else(|| bad(format!("unknown node {a:?}")))?;
                Ok(neighbors.iter().any(|n| n.eq_ignore_ascii_case(b)).to_string())
            }
            "retrieve" => {
                let query: Vec<String> = tokens(args);
                if query.is_empty() {
                    return Err(bad("retrieve needs a non-empty query"));
                }
                let mut scored: Vec<(usize, &Passage)> = fx
                    .corpus
                    .iter()
                    .map(|p| {
                        let words = tokens(&p.text);
                        (query.iter().filter(|q| words.contains(q)).count(), p)
                    })
                    .filter(|(s, _)| *s > 0)
                    .collect();
                // stable: ties keep corpus order
                scored.sort_by_key(|s| std::cmp::Reverse(s.0));
                if scored.is_empty() {
                    return Ok("No passages found.".into());
                }
                Ok(scored
                    .iter()
                    .take(2)
                    .map(|(_, p)| format!("[{}] {}", p.doc_id, p.text))
                    .collect::<Vec<_>>()
                    .join("\n"))
            }
            "calculator" => match calc::evaluate(args) {
                Ok(v) => Ok(calc::format_rational(&v)),
                Err(CalcError::DivisionByZero) => Err(bad("division by zero")),
                Err(CalcError::Syntax(m)) => Err(bad(format!("calculator: {m}"))),
            },
            "set_op" => {
                let parts = split_top_level(args, ',');
                let [op, left, right] = parts.as_slice() else {
                    return Err(bad("expected `set_op(intersect|union, [..], [..])`"));
                };
                let (left, right) = (parse_list(left)?, parse_list(right)?);
                let out: Vec<String> = match op.to_ascii_lowercase().as_str() {
                    "intersect" => left.iter().filter(|x| right.contains(x)).cloned().collect(),
                    "union" => {
                        let mut all = left.clone();
                        for x in right {
                            if !all.contains(&x) {
                                all.push(x);
                            }
                        }
                        all
                    }
                    other => return Err(bad(format!("set_op needs intersect or union, got {other:?}"))),
                };
                Ok(render_list(&out))
            }
            other => Err(ExecutionError::UnknownTool(other.to_string())),
        }
    }
}

// Gold answers for generated questions, computed straight from the fixtures.

pub(crate) fn rentals_below(price: i64) -> Vec<&'static Vec<Cell>> {
    let t = &fixtures().tables["rentals"];
    let col = t.column("price").expect("price column");
    t.rows
        .iter()
        .filter(|r| matches!(r[col], Cell::Int(p) if p < price))
        .collect()
}

pub(crate) fn most_reviewed_below(price: i64) -> Option<String> {
    let t = &fixtures().tables["rentals"];
    let col = t.column("reviews").expect("reviews column");
    let mut best: Option<&Vec<Cell>> = None;
    for row in rentals_below(price) {
        if best.is_none_or(|b| row[col] > b[col]) {
            best = Some(row);
        }
    }
    best.map(|r| r[0].to_string())
}

pub(crate) fn coauthors(author: &str) -> Vec<String> {
    let mut v = fixtures().graphs["authors"][author].clone();
    v.sort();
    v
}

/// Author pairs sharing at least one coauthor, in name order.
pub(crate) fn pairs_with_common_coauthors() -> Vec<(String, String, Vec<String>)> {
    let graph = &fixtures().graphs["authors"];
    let names: Vec<&String> = graph.keys().collect();
    let mut out = Vec::new();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let mut common: Vec<String> = graph[*a].iter().filter(|x| graph[*b].contains(x)).cloned().collect();
            common.sort();
            if !common.is_empty() {
                out.push(((*a).clone(), (*b).clone(), common));
            }
        }
    }
    out
}
