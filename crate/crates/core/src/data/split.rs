use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;

/// One train/test partition of subjects.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

/// Subject-grouped evaluation folds; test subjects never contribute
/// training records within their fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
    pub seed: u64,
}

impl SplitPlan {
    /// Rejects any fold whose train and test subject sets intersect.
    pub fn validate(&self) -> Result<()> {
        for (i, fold) in self.folds.iter().enumerate() {
            let train: BTreeSet<&str> = fold.train_subjects.iter().map(String::as_str).collect();
            if let Some(s) = fold.test_subjects.iter().find(|s| train.contains(s.as_str())) {
                return Err(Error::SubjectLeakage {
                    fold: i,
                    subject: s.clone(),
                });
            }
            if fold.test_subjects.is_empty() || fold.train_subjects.is_empty() {
                return Err(Error::Split(format!("fold {} has an empty side", i)));
            }
        }
        Ok(())
    }

    /// Record indices `(train, test)` for a fold, re-checking leakage at
    /// record level.
    pub fn fold_indices(&self, dataset: &Dataset, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        self.validate()?;
        let f = self
            .folds
            .get(fold)
            .ok_or_else(|| Error::Split(format!("fold {} out of range ({} folds)", fold, self.folds.len())))?;
        let train: BTreeSet<&str> = f.train_subjects.iter().map(String::as_str).collect();
        let test: BTreeSet<&str> = f.test_subjects.iter().map(String::as_str).collect();
        let train_idx = dataset.indices_where(|s| train.contains(s));
        let test_idx = dataset.indices_where(|s| test.contains(s));
        if let Some(&i) = train_idx.iter().find(|&&i| test.contains(dataset.records()[i].subject_id.as_str())) {
            return Err(Error::SubjectLeakage {
                fold,
                subject: dataset.records()[i].subject_id.clone(),
            });
        }
        if train_idx.is_empty() {
            return Err(Error::Empty("fold has no training records"));
        }
        if test_idx.is_empty() {
            return Err(Error::Empty("fold has no test records"));
        }
        Ok((train_idx, test_idx))
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Independently seeded random subject splits.
///
/// Each fold draws `round((1 - train_fraction) * S)` test subjects without
/// replacement (clamped to `1..S`). Folds are forced distinct whenever the
/// number of possible test sets allows it.
pub fn make_subject_folds(dataset: &Dataset, n_folds: usize, train_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction {} must lie in (0, 1)", train_fraction)));
    }
    if n_folds == 0 {
        return Err(Error::Config("n_folds must be positive".into()));
    }
    let subjects = dataset.subjects();
    let s = subjects.len();
    if s < 2 {
        return Err(Error::Split(format!("{} distinct subject(s); need at least 2", s)));
    }
    let raw = num_traits::Float::round((1.0 - train_fraction) * s as f64) as usize;
    let n_test = raw.clamp(1, s - 1);
    let distinct_possible = binomial(s, n_test) >= n_folds as u128;

    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut folds = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let mut attempt = 0u64;
        let picked = loop {
            let mut r = rng::stream(seed, &[0x5b11, f as u64, attempt]);
            let mut picked = index::sample(&mut r, s, n_test).into_vec();
            picked.sort_unstable();
            if !distinct_possible || !seen.contains(&picked) || attempt >= 256 {
                break picked;
            }
            attempt += 1;
        };
        seen.insert(picked.clone());
        let test: BTreeSet<usize> = picked.into_iter().collect();
        folds.push(Fold {
            train_subjects: (0..s).filter(|i| !test.contains(i)).map(|i| subjects[i].clone()).collect(),
            test_subjects: test.iter().map(|&i| subjects[i].clone()).collect(),
        });
    }
    Ok(SplitPlan { folds, seed })
}
