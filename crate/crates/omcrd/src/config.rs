//! Run configuration file (TOML).
//!
//! Omitted fields take the published defaults. Training defaults depend on
//! the peer count and extractor, so they are resolved after those two are
//! known: a file that only sets `train.peers = 2` gets 60 epochs and weight
//! decay 2.

use std::path::{Path, PathBuf};

use omcrd_core::trainer::TrainMode;
use omcrd_core::{PeerConfig, SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};

/// Environment variable selecting `deterministic` (default) or `fast` mode.
pub const MODE_VAR: &str = "OMCRD_MODE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub folds: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            folds: 5,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset container; synthesized from `[synth]` when absent.
    pub dataset: Option<PathBuf>,
    /// Split plan; generated from `[split]` when absent.
    pub split: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: None,
            split: None,
            run_dir: PathBuf::from("runs/omcrd"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub peer: PeerConfig,
    pub train: TrainConfig,
    pub split: SplitSettings,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::resolve(Table::new()).expect("defaults are valid")
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn lookup<'a>(t: &'a Table, path: &[&str]) -> Option<&'a Value> {
    let (last, head) = path.split_last()?;
    let mut cur = t;
    for k in head {
        cur = cur.get(*k)?.as_table()?;
    }
    cur.get(*last)
}

fn to_table<T: Serialize>(v: &T) -> Result<Table> {
    Table::try_from(v).map_err(|e| Error::Config(e.to_string()))
}

impl RunConfig {
    /// Builds the configuration from a user table layered over defaults.
    pub fn resolve(user: Table) -> Result<Self> {
        let parse = |path: &[&str]| -> Result<Option<Value>> { Ok(lookup(&user, path).cloned()) };
        let mut synth_t = to_table(&SynthConfig::default())?;
        if let Some(Value::Table(s)) = user.get("synth") {
            merge(&mut synth_t, s.clone());
        }
        let synth: SynthConfig = synth_t
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("[synth] {}", e.message())))?;

        let mut peer = PeerConfig {
            channels: synth.channels,
            samples: synth.samples,
            ..PeerConfig::default()
        };
        if let Some(v) = parse(&["peer", "kind"])? {
            peer.kind = v
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("peer.kind: {}", e.message())))?;
        }
        let peers = match parse(&["train", "peers"])? {
            Some(Value::Integer(m)) if m > 0 => m as usize,
            Some(v) => return Err(Error::Config(format!("train.peers must be a positive integer, got {}", v))),
            None => 3,
        };
        let base = RunConfig {
            synth,
            peer,
            train: TrainConfig::for_setup(peer.kind, peers),
            split: SplitSettings::default(),
            paths: Paths::default(),
        };
        let mut table = to_table(&base)?;
        merge(&mut table, user);
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.train.mode = mode_from_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a TOML document; `overrides` are `(dotted.key, value)` pairs
    /// applied on top of the file before defaults are resolved.
    pub fn from_toml(text: &str, overrides: &[(&str, Value)]) -> Result<Self> {
        let mut user: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        for (key, value) in overrides {
            let parts: Vec<&str> = key.split('.').collect();
            let (last, head) = parts.split_last().expect("non-empty key");
            let mut cur = &mut user;
            for k in head {
                cur = cur
                    .entry(k.to_string())
                    .or_insert_with(|| Value::Table(Table::new()))
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("{} is not a table", k)))?;
            }
            cur.insert(last.to_string(), value.clone());
        }
        Self::resolve(user)
    }

    pub fn load(path: Option<&Path>, overrides: &[(&str, Value)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides).map_err(|e| match (e, path) {
            (Error::Config(m), Some(p)) => Error::Config(format!("{}: {}", p.display(), m)),
            (e, _) => e,
        })
    }

    /// Fully explicit TOML; loading it reproduces this configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.peer.validate()?;
        self.train.validate()?;
        if self.split.folds == 0 {
            return Err(Error::Config("split.folds must be at least 1".into()));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split.train_fraction {} must lie in (0, 1)",
                self.split.train_fraction
            )));
        }
        Ok(())
    }
}

/// Reads [`MODE_VAR`]; unset means deterministic.
pub fn mode_from_env() -> Result<TrainMode> {
    match std::env::var(MODE_VAR) {
        Err(_) => Ok(TrainMode::Deterministic),
        Ok(v) => match v.to_ascii_lowercase().as_str() {
            "" | "deterministic" => Ok(TrainMode::Deterministic),
            "fast" => Ok(TrainMode::Fast),
            other => Err(Error::Config(format!("{}={} (expected deterministic or fast)", MODE_VAR, other))),
        },
    }
}
