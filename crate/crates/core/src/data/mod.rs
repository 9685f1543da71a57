//! Trial records, dataset validation and the tensor layouts fed to each
//! extractor.

mod batch;
mod split;
mod synth;

pub use batch::{plan_balanced_batches, BatchPlan};
pub use split::{make_subject_folds, Fold, SplitPlan};
pub use synth::{synth_generate, SynthConfig};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of emotion classes.
pub const CLASS_COUNT: usize = 4;

/// Recording paradigm a trial belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Emotional perception (passive picture viewing).
    Empe,
    /// Affective imagery.
    Afim,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Empe => "Empe",
            Task::Afim => "Afim",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Empe" => Some(Task::Empe),
            "Afim" => Some(Task::Afim),
            _ => None,
        }
    }
}

/// Valence/arousal quadrant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Emotion {
    /// High arousal, positive valence.
    Hapv = 0,
    /// High arousal, negative valence.
    Hanv = 1,
    /// Low arousal, positive valence.
    Lapv = 2,
    /// Low arousal, negative valence.
    Lanv = 3,
}

impl Emotion {
    pub const ALL: [Emotion; CLASS_COUNT] = [Emotion::Hapv, Emotion::Hanv, Emotion::Lapv, Emotion::Lanv];
    pub const NAMES: [&'static str; CLASS_COUNT] = ["HAPV", "HANV", "LAPV", "LANV"];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }
}

/// One trial's hemodynamic signal, stored `[chromophore][channel][time]`
/// with HbO in plane 0 and HbR in plane 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    channels: usize,
    samples: usize,
    data: Vec<f32>,
}

impl Signal {
    pub fn new(channels: usize, samples: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || samples == 0 {
            return Err(Error::Validation(format!(
                "signal needs at least one channel and sample, got {}x{}",
                channels, samples
            )));
        }
        if data.len() != 2 * channels * samples {
            return Err(Error::Shape(format!(
                "signal [2][{}][{}] needs {} values, got {}",
                channels,
                samples,
                2 * channels * samples,
                data.len()
            )));
        }
        Ok(Self { channels, samples, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, chromophore: usize, channel: usize, t: usize) -> f32 {
        self.data[(chromophore * self.channels + channel) * self.samples + t]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[2n][T]` layout: rows `0..n` are HbO channels, rows `n..2n` HbR.
    pub fn to_cnn(&self) -> Vec<f32> {
        // chromophore-major storage already is the stacked layout
        self.data.clone()
    }

    pub fn from_cnn(channels: usize, samples: usize, stacked: &[f32]) -> Result<Self> {
        Self::new(channels, samples, stacked.to_vec())
    }

    /// Region tokens `[n][2T]`: row `c` is HbO channel `c` followed by HbR channel `c`.
    pub fn to_region_tokens(&self) -> Vec<f32> {
        let (n, t) = (self.channels, self.samples);
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..n {
            out.extend_from_slice(&self.data[c * t..(c + 1) * t]);
            out.extend_from_slice(&self.data[(n + c) * t..(n + c + 1) * t]);
        }
        out
    }

    pub fn from_region_tokens(channels: usize, samples: usize, tokens: &[f32]) -> Result<Self> {
        let (n, t) = (channels, samples);
        if tokens.len() != 2 * n * t {
            return Err(Error::Shape(format!("region tokens need {} values", 2 * n * t)));
        }
        let mut data = alloc::vec![0.0f32; 2 * n * t];
        for c in 0..n {
            data[c * t..(c + 1) * t].copy_from_slice(&tokens[c * 2 * t..c * 2 * t + t]);
            data[(n + c) * t..(n + c + 1) * t].copy_from_slice(&tokens[c * 2 * t + t..(c + 1) * 2 * t]);
        }
        Self::new(n, t, data)
    }

    /// Time tokens `[T][2n]`: row `t` is all HbO channels at `t` followed by all HbR channels.
    pub fn to_time_tokens(&self) -> Vec<f32> {
        let (rows, t) = (2 * self.channels, self.samples);
        let mut out = alloc::vec![0.0f32; rows * t];
        for r in 0..rows {
            for s in 0..t {
                out[s * rows + r] = self.data[r * t + s];
            }
        }
        out
    }

    pub fn from_time_tokens(channels: usize, samples: usize, tokens: &[f32]) -> Result<Self> {
        let (rows, t) = (2 * channels, samples);
        if tokens.len() != rows * t {
            return Err(Error::Shape(format!("time tokens need {} values", rows * t)));
        }
        let mut data = alloc::vec![0.0f32; rows * t];
        for r in 0..rows {
            for s in 0..t {
                data[r * t + s] = tokens[s * rows + r];
            }
        }
        Self::new(channels, samples, data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FnirsRecord {
    pub subject_id: String,
    pub task: Task,
    pub label: Emotion,
    pub signal: Signal,
    pub sample_rate_hz: f32,
}

/// Validated, shape-homogeneous collection of trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    records: Vec<FnirsRecord>,
}

impl Dataset {
    pub fn new(records: Vec<FnirsRecord>) -> Result<Self> {
        let first = records.first().ok_or(Error::Empty("dataset has zero records"))?;
        let (task, n, t, rate) = (first.task, first.signal.channels(), first.signal.samples(), first.sample_rate_hz);
        if !(rate.is_finite() && rate > 0.0) {
            return Err(Error::Validation(format!("sample rate {} is not positive", rate)));
        }
        for (i, r) in records.iter().enumerate() {
            if r.signal.channels() != n || r.signal.samples() != t {
                return Err(Error::Shape(format!(
                    "record {} has shape [2][{}][{}], expected [2][{}][{}]",
                    i,
                    r.signal.channels(),
                    r.signal.samples(),
                    n,
                    t
                )));
            }
            if r.task != task {
                return Err(Error::Validation(format!(
                    "record {} has task {:?}, expected {:?}",
                    i, r.task, task
                )));
            }
            if r.sample_rate_hz != rate {
                return Err(Error::Validation(format!(
                    "record {} has sample rate {}, expected {}",
                    i, r.sample_rate_hz, rate
                )));
            }
            if !r.signal.is_finite() {
                return Err(Error::Validation(format!("record {} contains non-finite values", i)));
            }
            if r.subject_id.is_empty() {
                return Err(Error::Validation(format!("record {} has an empty subject id", i)));
            }
        }
        Ok(Self { records })
    }

    pub fn records(&self) -> &[FnirsRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_count(&self) -> usize {
        CLASS_COUNT
    }

    pub fn task(&self) -> Task {
        self.records[0].task
    }

    pub fn channels(&self) -> usize {
        self.records[0].signal.channels()
    }

    pub fn samples(&self) -> usize {
        self.records[0].signal.samples()
    }

    pub fn sample_rate_hz(&self) -> f32 {
        self.records[0].sample_rate_hz
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label.index()).collect()
    }

    pub fn class_counts(&self) -> [usize; CLASS_COUNT] {
        let mut counts = [0; CLASS_COUNT];
        for r in &self.records {
            counts[r.label.index()] += 1;
        }
        counts
    }

    /// Distinct subject ids in sorted order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen: BTreeMap<&str, ()> = BTreeMap::new();
        for r in &self.records {
            seen.insert(&r.subject_id, ());
        }
        seen.keys().map(|s| String::from(*s)).collect()
    }

    /// Record indices whose subject passes the filter, in file order.
    pub fn indices_where(&self, mut keep: impl FnMut(&str) -> bool) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| keep(&r.subject_id))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }
}
