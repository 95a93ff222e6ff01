//! Greedy per-class capping of multilabel datasets.

use super::dataset::Dataset;
use crate::dsp::Labels;
use crate::error::{Error, Result};

fn label_list(l: &Labels) -> Vec<usize> {
    match l {
        Labels::Single(k) => vec![*k],
        Labels::Multi(ks) => ks.clone(),
        Labels::VerbNoun(v, n) => vec![*v, *n],
    }
}

/// Indices admitted in order: a sample is kept iff every one of its labels has
/// fewer than `cap` admitted samples so far.
pub fn greedy_cap_indices(labels: &[Vec<usize>], cap: usize) -> Result<Vec<usize>> {
    if cap == 0 {
        return Err(Error::invalid("greedy_class_cap", "cap must be at least 1"));
    }
    let width = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; width];
    let mut kept = Vec::new();
    for (i, ls) in labels.iter().enumerate() {
        if ls.iter().all(|&l| counts[l] < cap) {
            for &l in ls {
                counts[l] += 1;
            }
            kept.push(i);
        }
    }
    Ok(kept)
}

pub fn greedy_class_cap(dataset: &Dataset, cap: usize) -> Result<Dataset> {
    let labels: Vec<Vec<usize>> = dataset.clips.iter().map(|c| label_list(&c.labels)).collect();
    let kept = greedy_cap_indices(&labels, cap)?;
    Ok(Dataset {
        clips: kept.iter().map(|&i| dataset.clips[i].clone()).collect(),
        labels: dataset.labels,
        split: dataset.split.clone(),
        symbols: dataset.symbols.as_ref().map(|s| kept.iter().map(|&i| s[i]).collect()),
    })
}
