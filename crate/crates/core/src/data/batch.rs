use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Class-balanced batches for one epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub per_class: usize,
    pub batch_size: usize,
}

/// Draws batches holding exactly `per_class` indices of every class.
///
/// Each class's indices are shuffled independently; batches are filled
/// until the smallest class runs out and the leftover tail is dropped.
pub fn plan_balanced_batches(labels: &[usize], class_count: usize, per_class: usize, seed: u64) -> Result<BatchPlan> {
    if per_class == 0 || class_count == 0 {
        return Err(Error::Config(format!(
            "per_class ({}) and class_count ({}) must be positive",
            per_class, class_count
        )));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        if l >= class_count {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: class_count,
            });
        }
        pools[l].push(i);
    }
    if let Some(c) = pools.iter().position(Vec::is_empty) {
        return Err(Error::MissingClass(c));
    }
    for (c, pool) in pools.iter_mut().enumerate() {
        pool.shuffle(&mut rng::stream(seed, &[0xba7c, c as u64]));
    }
    let n_batches = pools.iter().map(|p| p.len() / per_class).min().unwrap_or(0);
    let batches = (0..n_batches)
        .map(|b| {
            pools
                .iter()
                .flat_map(|p| p[b * per_class..(b + 1) * per_class].iter().copied())
                .collect()
        })
        .collect();
    Ok(BatchPlan {
        batches,
        per_class,
        batch_size: per_class * class_count,
    })
}
