//! Class-imbalance handling: a weighted sampler whose draw probabilities are
//! inversely proportional to class frequency, and offline over/under-sampling
//! of the manifest itself.

use super::{DataError, DatasetManifest, ManifestRecord};
use crate::rng::Rng;
use crate::NUM_CLASSES;

/// Draws sample indices i.i.d. with replacement, each with probability
/// proportional to `1 / class_count[label]`, so expected class exposure is
/// uniform.
#[derive(Clone, Debug)]
pub struct WeightedSampler {
    cumulative: Vec<f64>,
    total: f64,
}

impl WeightedSampler {
    pub fn from_labels(labels: &[usize]) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Invalid("cannot sample from an empty dataset".into()));
        }
        let mut counts = [0usize; NUM_CLASSES];
        for &l in labels {
            if l >= NUM_CLASSES {
                return Err(DataError::Invalid(format!("label {l} out of range")));
            }
            counts[l] += 1;
        }
        let mut cumulative = Vec::with_capacity(labels.len());
        let mut total = 0.0;
        for &l in labels {
            total += 1.0 / counts[l] as f64;
            cumulative.push(total);
        }
        Ok(WeightedSampler { cumulative, total })
    }

    pub fn new(manifest: &DatasetManifest) -> Result<Self, DataError> {
        let labels: Vec<usize> = manifest.records.iter().map(|r| r.label).collect();
        Self::from_labels(&labels)
    }

    /// One weighted draw.
    pub fn next(&self, rng: &mut Rng) -> usize {
        let u = rng.next_f64() * self.total;
        // first index whose cumulative weight exceeds u
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }

    /// `n` independent weighted draws (with replacement).
    pub fn draw(&self, n: usize, rng: &mut Rng) -> Vec<usize> {
        (0..n).map(|_| self.next(rng)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RebalanceMode {
    /// Duplicate minority-class records (cycling in file order) up to the
    /// target; classes above an explicit cap are cut down to it.
    Oversample,
    /// Truncate majority classes (seeded shuffle, then cut) down to the
    /// target.
    Undersample,
}

/// Rebalance class counts. Without a cap the target is the maximum
/// (oversample) or minimum (undersample) class count; a cap overrides the
/// target. Classes already at the target are untouched. Output records are
/// grouped by class in index order.
pub fn rebalance(
    manifest: &DatasetManifest,
    mode: RebalanceMode,
    cap: Option<usize>,
    rng: &mut Rng,
) -> Result<DatasetManifest, DataError> {
    if manifest.is_empty() {
        return Err(DataError::Invalid("cannot rebalance an empty manifest".into()));
    }
    if cap == Some(0) {
        return Err(DataError::Invalid("cap must be at least 1".into()));
    }
    let present: Vec<usize> = (0..NUM_CLASSES)
        .filter(|&c| manifest.class_counts[c] > 0)
        .collect();
    let max_count = present.iter().map(|&c| manifest.class_counts[c]).max().unwrap();
    let min_count = present.iter().map(|&c| manifest.class_counts[c]).min().unwrap();
    let target = match mode {
        RebalanceMode::Oversample => cap.unwrap_or(max_count),
        RebalanceMode::Undersample => cap.unwrap_or(min_count),
    };

    let mut by_class: Vec<Vec<&ManifestRecord>> = vec![Vec::new(); NUM_CLASSES];
    for r in &manifest.records {
        by_class[r.label].push(r);
    }

    let mut records = Vec::new();
    for c in 0..NUM_CLASSES {
        let group = &by_class[c];
        if group.is_empty() {
            continue;
        }
        match group.len().cmp(&target) {
            std::cmp::Ordering::Equal => {
                records.extend(group.iter().map(|r| (*r).clone()));
            }
            std::cmp::Ordering::Less => match mode {
                RebalanceMode::Oversample => {
                    for i in 0..target {
                        records.push(group[i % group.len()].clone());
                    }
                }
                // undersampling never grows a class
                RebalanceMode::Undersample => {
                    records.extend(group.iter().map(|r| (*r).clone()));
                }
            },
            std::cmp::Ordering::Greater => {
                // seeded shuffle then cut
                let mut picks: Vec<usize> = (0..group.len()).collect();
                rng.shuffle(&mut picks);
                picks.truncate(target);
                picks.sort_unstable();
                records.extend(picks.into_iter().map(|i| group[i].clone()));
            }
        }
    }
    DatasetManifest::from_records(records)
}
