//! Attention rollout over the joint token sequence.

use std::fmt::Write as _;

use crate::attention::AttentionRecord;
use crate::dsp::{Modality, TokenizerConfig};
use crate::error::{Error, Result};
use crate::model::TokenLayout;
use crate::tensor::kernels::{gemm, Layout};
use crate::tensor::Tensor;

/// Residual-adjusted flow matrix of one `(layer, stage)`.
///
/// Rows of tokens queried by several records (the bottleneck in symmetric
/// mode) average those records; tokens not queried keep an identity row.
pub fn stage_matrix(records: &[&AttentionRecord], total: usize, sample: usize) -> Result<Tensor> {
    let mut sum = vec![0.0; total * total];
    let mut count = vec![0usize; total];
    for r in records {
        if sample >= r.probs.shape()[0] {
            return Err(Error::invalid("attention_rollout", format!("sample {sample} outside the batch")));
        }
        let a = r.mean_heads(sample);
        let nk = r.keys.len();
        for (qi, &q) in r.queries.iter().enumerate() {
            if q >= total || r.keys.iter().any(|&k| k >= total) {
                return Err(Error::invalid("attention_rollout", "record indexes past the layout"));
            }
            count[q] += 1;
            for (kj, &k) in r.keys.iter().enumerate() {
                sum[q * total + k] += a.data()[qi * nk + kj];
            }
        }
    }
    for q in 0..total {
        let row = &mut sum[q * total..(q + 1) * total];
        if count[q] == 0 {
            row[q] = 1.0;
            continue;
        }
        let c = count[q] as f64;
        row.iter_mut().for_each(|v| *v *= 0.5 / c);
        row[q] += 0.5;
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(Tensor::from_parts(vec![total, total], sum))
}

/// Stage matrices in application order, checking every layer is present.
pub fn stage_matrices(
    records: &[AttentionRecord],
    total: usize,
    layers: usize,
    sample: usize,
) -> Result<Vec<((usize, usize), Tensor)>> {
    let mut keys: Vec<(usize, usize)> = records.iter().map(|r| (r.layer, r.stage)).collect();
    keys.sort_unstable();
    keys.dedup();
    for l in 0..layers {
        if !keys.iter().any(|k| k.0 == l) {
            return Err(Error::invalid("attention_rollout", format!("no attention records for layer {l}")));
        }
    }
    keys.into_iter()
        .filter(|k| k.0 < layers)
        .map(|k| {
            let rs: Vec<&AttentionRecord> = records.iter().filter(|r| (r.layer, r.stage) == k).collect();
            Ok((k, stage_matrix(&rs, total, sample)?))
        })
        .collect()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let mut c = vec![0.0; n * n];
    gemm(n, n, n, a.data(), Layout::Normal, b.data(), Layout::Normal, 0.0, &mut c);
    Tensor::from_parts(vec![n, n], c)
}

/// Products `Ã_k ··· Ã_1` after each layer; the last entry is the full rollout.
pub fn rollout_by_layer(records: &[AttentionRecord], total: usize, layers: usize, sample: usize) -> Result<Vec<Tensor>> {
    let mut acc = Tensor::eye(total);
    let mut out = Vec::with_capacity(layers);
    let stages = stage_matrices(records, total, layers, sample)?;
    for l in 0..layers {
        for (_, m) in stages.iter().filter(|(k, _)| k.0 == l) {
            acc = matmul(m, &acc);
        }
        out.push(acc.clone());
    }
    Ok(out)
}

pub fn rollout_matrix(records: &[AttentionRecord], total: usize, layers: usize, sample: usize) -> Result<Tensor> {
    Ok(rollout_by_layer(records, total, layers, sample)?.pop().unwrap_or_else(|| Tensor::eye(total)))
}

/// Largest deviation of a row sum from one.
pub fn row_stochastic_error(m: &Tensor) -> f64 {
    let n = m.shape()[1];
    m.data()
        .chunks_exact(n.max(1))
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Rolled-out attention mass of one output token over the input tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub source: usize,
    pub masses: Vec<f64>,
    pub layout: TokenLayout,
}

impl SaliencyMap {
    pub fn modality_mass(&self, m: Modality) -> f64 {
        self.masses[self.layout.range(m)].iter().sum()
    }

    pub fn bottleneck_mass(&self) -> f64 {
        self.masses[self.layout.fsn.clone()].iter().sum()
    }

    /// Patch masses as `[frames, rows, cols]`, CLS excluded.
    pub fn rgb_grid(&self, t: &TokenizerConfig) -> Result<Tensor> {
        let r = &self.layout.rgb;
        if r.is_empty() {
            return Err(Error::invalid("saliency", "no rgb tokens"));
        }
        Tensor::new(t.rgb_grid().to_vec(), self.masses[r.start + 1..r.end].to_vec())
    }

    /// Patch masses as `[mel patches, time patches]`, CLS excluded.
    pub fn spec_grid(&self, t: &TokenizerConfig) -> Result<Tensor> {
        let r = &self.layout.spec;
        if r.is_empty() {
            return Err(Error::invalid("saliency", "no spectrogram tokens"));
        }
        Tensor::new(t.spec_grid().to_vec(), self.masses[r.start + 1..r.end].to_vec())
    }

    /// Raw masses, one `index<TAB>group<TAB>mass` line per token.
    pub fn sidecar(&self) -> String {
        let mut s = format!("# source token {}\n", self.source);
        for (i, m) in self.masses.iter().enumerate() {
            let group = if self.layout.rgb.contains(&i) {
                if i == self.layout.rgb.start { "rgb-cls" } else { "rgb" }
            } else if self.layout.fsn.contains(&i) {
                "fsn"
            } else if i == self.layout.spec.start {
                "spec-cls"
            } else {
                "spec"
            };
            let _ = writeln!(s, "{i}\t{group}\t{m:e}");
        }
        s
    }
}

/// Plain (ASCII) PGM of a 2-D grid, or of frames tiled left to right for a
/// 3-D `[f, h, w]` grid; scaled so the maximum maps to 255.
pub fn to_pgm(grid: &Tensor) -> Result<String> {
    let (f, h, w) = match grid.shape() {
        [h, w] => (1, *h, *w),
        [f, h, w] => (*f, *h, *w),
        s => return Err(Error::invalid("to_pgm", format!("grid of shape {s:?}"))),
    };
    let max = grid.data().iter().copied().fold(0.0, f64::max);
    let mut s = format!("P2\n{} {}\n255\n", f * w, h);
    for y in 0..h {
        let row: Vec<String> = (0..f)
            .flat_map(|fr| (0..w).map(move |x| (fr, x)))
            .map(|(fr, x)| {
                let v = grid.data()[(fr * h + y) * w + x];
                let px = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                format!("{}", px.clamp(0.0, 255.0) as u8)
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    Ok(s)
}

/// Rollout from output token `source` of sample `sample`.
pub fn attention_rollout(
    records: &[AttentionRecord],
    layout: &TokenLayout,
    layers: usize,
    source: usize,
    sample: usize,
) -> Result<SaliencyMap> {
    let total = layout.total();
    if source >= total {
        return Err(Error::invalid("attention_rollout", format!("source {source} outside {total} tokens")));
    }
    let r = rollout_matrix(records, total, layers, sample)?;
    Ok(SaliencyMap { source, masses: r.row(source).to_vec(), layout: layout.clone() })
}

/// Mass of `source` on rgb, bottleneck and spectrogram tokens after each layer.
pub fn rollout_curve(
    records: &[AttentionRecord],
    layout: &TokenLayout,
    layers: usize,
    source: usize,
    sample: usize,
) -> Result<Vec<[f64; 3]>> {
    let by = rollout_by_layer(records, layout.total(), layers, sample)?;
    Ok(by
        .iter()
        .map(|m| {
            let row = m.row(source);
            let mass = |r: &std::ops::Range<usize>| row[r.clone()].iter().sum::<f64>();
            [mass(&layout.rgb), mass(&layout.fsn), mass(&layout.spec)]
        })
        .collect())
}

pub fn rollout_curve_csv(curve: &[[f64; 3]]) -> String {
    let mut s = String::from("layer,rgb_mass,fsn_mass,spec_mass\n");
    for (l, c) in curve.iter().enumerate() {
        let _ = writeln!(s, "{l},{},{},{}", c[0], c[1], c[2]);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_record(tokens: Vec<usize>, layer: usize) -> AttentionRecord {
        let n = tokens.len();
        AttentionRecord {
            probs: Tensor::filled(&[1, 2, n, n], 1.0 / n as f64),
            queries: tokens.clone(),
            keys: tokens,
            layer,
            stage: 0,
        }
    }

    #[test]
    fn single_token_single_layer() {
        let layout = TokenLayout { rgb: 0..1, fsn: 1..1, spec: 1..1 };
        let s = attention_rollout(&[uniform_record(vec![0], 0)], &layout, 1, 0, 0).unwrap();
        assert_eq!(s.masses, vec![1.0]);
    }

    #[test]
    fn uniform_attention_has_the_closed_form() {
        // Each layer is 0.5·U + 0.5·I, so L layers give 2^-L·I + (1 − 2^-L)·U.
        let n = 5;
        let layout = TokenLayout { rgb: 0..n, fsn: n..n, spec: n..n };
        for layers in 1..5 {
            let recs: Vec<_> = (0..layers).map(|l| uniform_record((0..n).collect(), l)).collect();
            let m = rollout_matrix(&recs, n, layers, 0).unwrap();
            let a = 0.5f64.powi(layers as i32);
            for i in 0..n {
                for j in 0..n {
                    let want = (1.0 - a) / n as f64 + if i == j { a } else { 0.0 };
                    assert!((m.at(&[i, j]) - want).abs() < 1e-15);
                }
            }
            let s = attention_rollout(&recs, &layout, layers, 2, 0).unwrap();
            assert!((s.masses.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn unqueried_tokens_keep_identity_rows() {
        let m = stage_matrix(&[&uniform_record(vec![0, 1], 0)], 3, 0).unwrap();
        assert_eq!(m.row(2), &[0.0, 0.0, 1.0]);
        assert_eq!(m.row(0), &[0.75, 0.25, 0.0]);
    }

    #[test]
    fn shared_rows_average_their_records() {
        // Token 1 is queried by two records of the same stage.
        let a = AttentionRecord {
            probs: Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(),
            queries: vec![0, 1],
            keys: vec![0, 1],
            layer: 0,
            stage: 0,
        };
        let b = AttentionRecord {
            probs: Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
            queries: vec![2, 1],
            keys: vec![2, 1],
            layer: 0,
            stage: 0,
        };
        let m = stage_matrix(&[&a, &b], 3, 0).unwrap();
        // a sends token 1 to key 0 and b sends it to key 2.
        assert_eq!(m.row(1), &[0.25, 0.5, 0.25]);
        assert!(row_stochastic_error(&m) < 1e-15);
    }

    #[test]
    fn missing_layers_are_an_error() {
        let layout = TokenLayout { rgb: 0..2, fsn: 2..2, spec: 2..2 };
        assert!(attention_rollout(&[uniform_record(vec![0, 1], 0)], &layout, 2, 0, 0).is_err());
    }

    #[test]
    fn pgm_layout() {
        let g = Tensor::new(vec![2, 1, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        assert_eq!(to_pgm(&g).unwrap(), "P2\n4 1\n255\n0 255 128 64\n");
    }
}
