//! Classification losses over graph logits.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Mean binary cross-entropy over every class and sample.
pub fn bce_loss(g: &mut Graph, logits: Var, targets: Tensor) -> Result<Var> {
    g.bce_with_logits(logits, targets)
}

/// Cross-entropy summed over heads, each averaged over the batch.
///
/// Targets are rows of class weights; use [`one_hot`] for hard indices.
pub fn ce_loss(g: &mut Graph, logits: &[Var], targets: &[Tensor]) -> Result<Var> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::invalid(
            "ce_loss",
            format!("{} heads but {} targets", logits.len(), targets.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (&x, t) in logits.iter().zip(targets) {
        let l = g.softmax_cross_entropy(x, t.clone())?;
        total = Some(match total {
            None => l,
            Some(a) => g.add(a, l)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `[n, classes]` indicator rows.
pub fn one_hot(indices: &[usize], classes: usize) -> Result<Tensor> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= classes) {
        return Err(Error::invalid("ce_loss", format!("target {bad} outside {classes} classes")));
    }
    Ok(Tensor::from_fn(&[indices.len(), classes], |i| {
        if indices[i / classes] == i % classes {
            1.0
        } else {
            0.0
        }
    }))
}
