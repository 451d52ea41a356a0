//! Flat `key = value` run configuration. Every command starts from its own
//! defaults, overlays a config file, then command-line flags; the merged
//! result is what gets echoed next to the outputs.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::experiment::ExperimentConfig;
use crate::sim::{GeneratorConfig, SnrPreset};
use crate::train::ClassBalance;

/// Keys understood by each command, with their defaults (empty = unset).
pub const GENERATE_KEYS: &[(&str, &str)] = &[
    ("subjects", "9"),
    ("sessions", "4"),
    ("runs", "6"),
    ("seed", "42"),
    ("snr", "high"),
    ("out", ""),
];

pub const TRAIN_KEYS: &[(&str, &str)] = &[
    ("arch", "eeg-tcfnet"),
    ("strategy", "session"),
    ("seed", "42"),
    ("lr", "0.0001"),
    ("batch", "64"),
    ("max_epochs", "200"),
    ("patience", "20"),
    ("balance", "weighted"),
    ("fnb_k", "4"),
    ("window_ms", "1000"),
    ("max_blocks", "20"),
    ("jobs", "1"),
    ("data", ""),
    ("out", ""),
];

pub const EVALUATE_KEYS: &[(&str, &str)] = &[
    ("checkpoints", ""),
    ("strategy", "session"),
    ("seed", "42"),
    ("window_ms", "1000"),
    ("max_blocks", "20"),
    ("data", ""),
    ("out", ""),
];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn with_defaults(keys: &[(&str, &str)]) -> Self {
        RunConfig {
            entries: keys
                .iter()
                .map(|&(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(
                    origin,
                    format!("line {}: expected `key = value`, got `{line}`", i + 1),
                )
            })?;
            let k = k.trim().replace('-', "_");
            if k.is_empty() {
                return Err(Error::format(origin, format!("line {}: empty key", i + 1)));
            }
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::format(
                    origin,
                    format!("line {}: `{k}` given twice", i + 1),
                ));
            }
        }
        Ok(RunConfig { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Overlay `other` onto `self`, refusing keys that `self` does not know.
    pub fn merge(&mut self, other: &RunConfig) -> Result<()> {
        for (k, v) in &other.entries {
            self.set(k, v.clone())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        match self.entries.get_mut(key) {
            Some(slot) => {
                *slot = value.into();
                Ok(())
            }
            None => {
                let valid: Vec<&str> = self.entries.keys().map(String::as_str).collect();
                Err(Error::invalid(format!(
                    "unknown config key `{key}` (valid: {})",
                    valid.join(", ")
                )))
            }
        }
    }

    /// Set `key` only when a flag was actually given.
    pub fn set_opt<T: Display>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, v.to_string()),
            None => Ok(()),
        }
    }

    /// The value of `key`, `None` when unset or empty.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .filter(|v| !v.is_empty())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::invalid(format!("`{key}` is required")))
    }

    pub fn parsed<T>(&self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        let v = self.require(key)?;
        v.parse()
            .map_err(|e| Error::invalid(format!("bad value `{v}` for `{key}`: {e}")))
    }

    /// Canonical text: sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Write the effective configuration (plus the hash of everything that
    /// shapes the results) as `<dir>/<command>.config`.
    pub fn echo(&self, dir: &Path, command: &str, hash: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{command}.config"));
        let text = format!(
            "# effective {command} configuration\nconfig_hash={hash}\n{}",
            self.to_text()
        );
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        let snr: SnrPreset = self.parsed("snr")?;
        let mut g = GeneratorConfig::preset(snr, self.parsed("seed")?);
        g.subjects = self.parsed("subjects")?;
        g.sessions = self.parsed("sessions")?;
        g.runs_per_session = self.parsed("runs")?;
        g.validate()?;
        Ok(g)
    }

    /// Experiment settings from whichever of the training keys are present.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let has = |k: &str| self.entries.contains_key(k);
        if has("seed") {
            cfg.seed = self.parsed("seed")?;
        }
        if has("lr") {
            cfg.train.lr = self.parsed("lr")?;
        }
        if has("batch") {
            cfg.train.batch_size = self.parsed("batch")?;
        }
        if has("max_epochs") {
            cfg.train.max_epochs = self.parsed("max_epochs")?;
        }
        if has("patience") {
            cfg.train.patience = self.parsed("patience")?;
        }
        if has("balance") {
            cfg.train.balance = self.parsed::<ClassBalance>("balance")?;
        }
        if has("fnb_k") {
            cfg.fnb_rules = self.parsed("fnb_k")?;
        }
        if has("window_ms") {
            cfg.preprocess.window_ms = self.parsed("window_ms")?;
        }
        if has("max_blocks") {
            cfg.max_blocks = self.parsed("max_blocks")?;
        }
        let lr = cfg.train.lr;
        if !(lr > 0.0 && lr.is_finite())
            || cfg.train.batch_size == 0
            || cfg.train.max_epochs == 0
            || cfg.fnb_rules == 0
        {
            return Err(Error::invalid(
                "lr, batch, max_epochs and fnb_k must be positive",
            ));
        }
        if cfg.max_blocks == 0 {
            return Err(Error::invalid("max_blocks must be at least 1"));
        }
        Ok(cfg)
    }
}
