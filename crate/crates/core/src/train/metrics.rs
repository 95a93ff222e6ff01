//! Ranking and accuracy metrics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Class indices sorted by descending score; ties keep the lower index first.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Mean of the precision at each positive's rank; `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, i) in ranking(scores).into_iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub map: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes without positives, left out of the mean.
    pub excluded: Vec<usize>,
}

/// `scores` and `labels` are `[n, C]`; labels are read as `> 0.5`.
pub fn mean_average_precision(scores: &Tensor, labels: &Tensor) -> Result<MapReport> {
    if scores.rank() != 2 || scores.shape() != labels.shape() {
        return Err(Error::shape("mean_average_precision", scores.shape(), labels.shape()));
    }
    let (n, c) = (scores.shape()[0], scores.shape()[1]);
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let s: Vec<f64> = (0..n).map(|i| scores.data()[i * c + k]).collect();
            let y: Vec<bool> = (0..n).map(|i| labels.data()[i * c + k] > 0.5).collect();
            average_precision(&s, &y)
        })
        .collect();
    let excluded = (0..c).filter(|&k| per_class[k].is_none()).collect();
    let kept: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if kept.is_empty() { 0.0 } else { kept.iter().sum::<f64>() / kept.len() as f64 };
    Ok(MapReport { map, per_class, excluded })
}

/// Fraction of rows whose label is among the `k` highest scores.
pub fn topk_accuracy(scores: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    if scores.rank() != 2 || scores.shape()[0] != labels.len() {
        return Err(Error::shape("topk_accuracy", scores.shape(), &[labels.len()]));
    }
    let c = scores.shape()[1];
    if k == 0 || k > c {
        return Err(Error::invalid("topk_accuracy", format!("k = {k} with {c} classes")));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| ranking(scores.row(i))[..k].contains(&y))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
