//! Window tokenization and multi-crop evaluation.

use crate::data::{Dataset, LabelSpace};
use crate::dsp::{window_at, Clip, Labels, Modality, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{Mbt, ModelInputs};
use crate::tensor::Tensor;

use super::metrics::{mean_average_precision, topk_accuracy};

/// Token inputs of one window, `[N, P]` per used modality.
#[derive(Clone, Debug)]
pub struct WindowTokens {
    pub rgb: Option<Tensor>,
    pub spec: Option<Tensor>,
}

/// Stacks equally shaped `[N, P]` tensors into `[b, N, P]`.
pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    let first = rows.first().ok_or_else(|| Error::invalid("stack", "empty batch"))?;
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * rows.len());
    for r in rows {
        if r.shape() != first.shape() {
            return Err(Error::shape("stack", first.shape(), r.shape()));
        }
        data.extend_from_slice(r.data());
    }
    Tensor::new(shape, data)
}

pub fn batch_inputs(items: &[WindowTokens]) -> Result<ModelInputs> {
    let pick = |f: fn(&WindowTokens) -> Option<&Tensor>| -> Result<Option<Tensor>> {
        let rows: Option<Vec<Tensor>> = items.iter().map(|w| f(w).cloned()).collect();
        rows.map(|r| stack_rows(&r)).transpose()
    };
    Ok(ModelInputs { rgb: pick(|w| w.rgb.as_ref())?, spec: pick(|w| w.spec.as_ref())? })
}

fn uses(model: &Mbt, m: Modality) -> bool {
    model.modality(m).is_some()
}

/// Deterministic tokens of `clip` at a common start offset.
pub fn window_tokens(model: &Mbt, tok: &Tokenizer, clip: &Clip, offset: f64) -> Result<WindowTokens> {
    let cfg = tok.config();
    let w = window_at(clip, cfg.span_s, cfg.n_frames, offset, offset)?;
    Ok(WindowTokens {
        rgb: if uses(model, Modality::Rgb) { Some(tok.visual_patches(&w.frames)?.patches) } else { None },
        spec: if uses(model, Modality::Spec) { Some(tok.audio_patches(&w.audio)?.patches) } else { None },
    })
}

/// `n` start offsets evenly spaced over `[0, duration − span]`.
pub fn crop_offsets(duration: f64, span: f64, n: usize) -> Result<Vec<f64>> {
    let slack = duration - span;
    if slack < -1e-9 {
        return Err(Error::invalid(
            "multicrop_infer",
            format!("clip of {duration} s is shorter than the {span} s span"),
        ));
    }
    if n == 0 {
        return Err(Error::invalid("multicrop_infer", "need at least one crop"));
    }
    let slack = slack.max(0.0);
    Ok((0..n)
        .map(|i| if n == 1 { 0.0 } else { slack * i as f64 / (n - 1) as f64 })
        .collect())
}

/// Mean pre-softmax logits over `n_crops` windows, `[1, C]` per head.
pub fn multicrop_infer(model: &Mbt, tok: &Tokenizer, clip: &Clip, n_crops: usize) -> Result<Vec<Tensor>> {
    let offsets = crop_offsets(clip.duration(), tok.config().span_s, n_crops)?;
    let mut sum: Option<Vec<Tensor>> = None;
    for &o in &offsets {
        let inputs = batch_inputs(&[window_tokens(model, tok, clip, o)?])?;
        let logits = model.predict(&inputs)?;
        match sum.as_mut() {
            None => sum = Some(logits),
            Some(acc) => acc.iter_mut().zip(&logits).for_each(|(a, l)| a.add_assign(l)),
        }
    }
    let k = offsets.len() as f64;
    Ok(sum.expect("n_crops ≥ 1").into_iter().map(|t| t.map(|v| v / k)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    /// Per-head top-1 and top-5 (single-label spaces); action accuracy for verb-noun.
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub map: Option<f64>,
    /// Mean crop logits per head, `[n, C]`.
    pub scores: Vec<Tensor>,
}

fn log_softmax_row(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

fn bce_entry(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

/// Multi-crop evaluation, batching each crop position across clips.
pub fn evaluate(model: &Mbt, tok: &Tokenizer, data: &Dataset, n_crops: usize, batch: usize) -> Result<EvalReport> {
    let widths = data.labels.head_widths();
    if widths != model.config.head.widths() {
        return Err(Error::Config(format!(
            "dataset heads {widths:?} do not match model heads {:?}",
            model.config.head.widths()
        )));
    }
    let n = data.len();
    if n == 0 {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let mut scores: Vec<Vec<f64>> = widths.iter().map(|&c| vec![0.0; n * c]).collect();
    for start in (0..n).step_by(batch.max(1)) {
        let clips = &data.clips[start..(start + batch.max(1)).min(n)];
        let mut per_crop: Vec<Vec<WindowTokens>> = Vec::new();
        for c in clips {
            let offs = crop_offsets(c.duration(), tok.config().span_s, n_crops)?;
            let toks = offs.iter().map(|&o| window_tokens(model, tok, c, o)).collect::<Result<Vec<_>>>()?;
            per_crop.push(toks);
        }
        for k in 0..n_crops {
            let items: Vec<WindowTokens> = per_crop.iter().map(|t| t[k].clone()).collect();
            let logits = model.predict(&batch_inputs(&items)?)?;
            for (h, l) in logits.iter().enumerate() {
                let c = widths[h];
                for (i, v) in l.data().iter().enumerate() {
                    scores[h][start * c + i] += v / n_crops as f64;
                }
            }
        }
    }
    let scores: Vec<Tensor> =
        scores.into_iter().zip(&widths).map(|(s, &c)| Tensor::new(vec![n, c], s)).collect::<Result<_>>()?;
    report(&scores, data)
}

fn report(scores: &[Tensor], data: &Dataset) -> Result<EvalReport> {
    let n = data.len();
    let mut loss = 0.0;
    for (i, clip) in data.clips.iter().enumerate() {
        let targets = data.labels.targets(&clip.labels);
        for (h, t) in targets.iter().enumerate() {
            let row = scores[h].row(i);
            loss += match data.labels {
                LabelSpace::Multilabel(c) => row.iter().zip(t).map(|(&x, &y)| bce_entry(x, y)).sum::<f64>() / c as f64,
                _ => -log_softmax_row(row).iter().zip(t).map(|(l, y)| l * y).sum::<f64>(),
            };
        }
    }
    loss /= n as f64;
    let (mut top1, mut top5, mut map) = (None, None, None);
    match data.labels {
        LabelSpace::Classes(c) => {
            let y: Vec<usize> = data
                .clips
                .iter()
                .map(|cl| match cl.labels {
                    Labels::Single(k) => k,
                    _ => unreachable!("validated label space"),
                })
                .collect();
            top1 = Some(topk_accuracy(&scores[0], &y, 1)?);
            top5 = Some(topk_accuracy(&scores[0], &y, 5.min(c))?);
        }
        LabelSpace::Multilabel(c) => {
            let mut y = Tensor::zeros(&[n, c]);
            for (i, cl) in data.clips.iter().enumerate() {
                for (k, v) in data.labels.targets(&cl.labels)[0].iter().enumerate() {
                    y.data_mut()[i * c + k] = *v;
                }
            }
            map = Some(mean_average_precision(&scores[0], &y)?.map);
        }
        LabelSpace::VerbNoun(..) => {
            // A clip counts when both heads rank the true class first.
            let hits = data
                .clips
                .iter()
                .enumerate()
                .filter(|&(i, cl)| {
                    let Labels::VerbNoun(v, nn) = cl.labels else { return false };
                    let first = |t: &Tensor, y: usize| {
                        topk_accuracy(&Tensor::from_parts(vec![1, t.shape()[1]], t.row(i).to_vec()), &[y], 1)
                            .map_or(false, |a| a == 1.0)
                    };
                    first(&scores[0], v) && first(&scores[1], nn)
                })
                .count();
            top1 = Some(hits as f64 / n as f64);
        }
    }
    Ok(EvalReport { loss, top1, top5, map, scores: scores.to_vec() })
}
