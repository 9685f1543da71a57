//! JSON documents (split and batch plans, fold results, reports) and the
//! JSON-lines epoch log.

use std::io::Write;
use std::path::Path;

use omcrd_core::EpochLog;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bytes::{read_file, write_file};
use crate::error::{Error, Result};

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_file(path)?).map_err(|e| Error::format(path, e.to_string()))
}

/// One line of the epoch log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub fold: usize,
    #[serde(flatten)]
    pub log: EpochLog,
}

pub fn append_epoch(path: &Path, record: &EpochRecord) -> Result<()> {
    let mut line = serde_json::to_string(record).map_err(|e| Error::format(path, e.to_string()))?;
    line.push('\n');
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::format(path, "epoch log is not UTF-8"))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {}", i + 1, e))))
        .collect()
}
