//! Layered settings: command-line flags override `BAGEL_*` environment
//! variables, which override the config file, which overrides defaults.
//! Every key is spelled exactly like its long flag.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Every key a config file may contain.
pub const KEYS: &[&str] = &[
    "env",
    "mode",
    "seeds",
    "rng-seed",
    "temperature",
    "explore-temperature",
    "max-steps",
    "max-resamples",
    "max-iterations",
    "controller",
    "jobs",
    "lm-script",
    "lm-url",
    "lm-timeout-ms",
    "buffer",
    "report",
    "rejected",
    "demo-mode",
    "k",
    "tasks",
    "task-start",
    "marks",
    "dims",
    "embed-url",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Origin {
    File,
    Env,
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::File => "config file",
            Origin::Env => "environment",
            Origin::Flag => "command line",
        })
    }
}

/// Environment variable that carries `key`, e.g. `lm-url` → `BAGEL_LM_URL`.
pub fn env_var(key: &str) -> String {
    format!("BAGEL_{}", key.to_ascii_uppercase().replace('-', "_"))
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// values may be wrapped in double quotes.
pub fn parse_config_file(text: &str, path: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| CliError::Config(format!("{path}:{}: {msg}", i + 1));
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected `key = value`, got {line:?}")))?;
        let key = key.trim().replace('_', "-");
        if !KEYS.contains(&key.as_str()) {
            return Err(bad(format!("unknown key {key:?}")));
        }
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        out.insert(key, value.to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, (String, Origin)>,
}

impl Settings {
    /// Merges the layers for the given keys. `flags` holds only values the
    /// user actually passed.
    pub fn resolve(
        keys: &[&str],
        flags: &BTreeMap<String, String>,
        env: &BTreeMap<String, String>,
        file: &BTreeMap<String, String>,
    ) -> Self {
        let mut values = BTreeMap::new();
        for &key in keys {
            let hit = flags
                .get(key)
                .map(|v| (v.clone(), Origin::Flag))
                .or_else(|| env.get(&env_var(key)).map(|v| (v.clone(), Origin::Env)))
                .or_else(|| file.get(key).map(|v| (v.clone(), Origin::File)));
            if let Some(hit) = hit {
                values.insert(key.to_string(), hit);
            }
        }
        Self { values }
    }

    /// Reads the config file named by `--config` or `BAGEL_CONFIG`, if any,
    /// then resolves.
    pub fn load(
        keys: &[&str],
        flags: &BTreeMap<String, String>,
        env: &BTreeMap<String, String>,
    ) -> Result<Self, CliError> {
        let path = flags.get("config").or_else(|| env.get(&env_var("config")));
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(Path::new(p))
                    .map_err(|e| CliError::Config(format!("cannot read config file {p}: {e}")))?;
                parse_config_file(&text, p)?
            }
            None => BTreeMap::new(),
        };
        Ok(Self::resolve(keys, flags, env, &file))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    pub fn origin(&self, key: &str) -> Option<Origin> {
        self.values.get(key).map(|(_, o)| *o)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        let Some((value, origin)) = self.values.get(key) else {
            return Ok(None);
        };
        value.trim().parse().map(Some).map_err(|e| {
            let from = match origin {
                Origin::Flag => format!("--{key}"),
                Origin::Env => env_var(key),
                Origin::File => format!("`{key}` in the config file"),
            };
            CliError::Config(format!("invalid value {value:?} for {from}: {e}"))
        })
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require(&self, key: &str) -> Result<String, CliError> {
        self.raw(key).map(str::to_string).ok_or_else(|| {
            CliError::Usage(format!(
                "missing required setting `{key}`: pass --{key}, set {} or add `{key} = ...` to the config file",
                env_var(key)
            ))
        })
    }
}
