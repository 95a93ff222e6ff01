//! Batch mixup with shared or per-modality weights.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixupMode {
    #[default]
    Standard,
    /// Independent weights per modality.
    Modality,
}

/// Label weight under modality mixup.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelWeight {
    #[default]
    Mean,
    Rgb,
    Spec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixupDraw {
    /// Partner of sample `i` is `perm[i]`.
    pub perm: Vec<usize>,
    pub lambda_rgb: f64,
    pub lambda_spec: f64,
    pub lambda_label: f64,
}

/// Model inputs and soft targets of one minibatch; leading axis is the sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rgb: Option<Tensor>,
    pub spec: Option<Tensor>,
    pub targets: Vec<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.first().map_or(0, |t| t.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn draw_mixup<R: Rng + ?Sized>(
    n: usize,
    alpha: f64,
    mode: MixupMode,
    label_weight: LabelWeight,
    rng: &mut R,
) -> Result<MixupDraw> {
    if n < 2 {
        return Err(Error::invalid("mixup", "batch must hold at least two samples"));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid("mixup", e.to_string()))?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let (lr, ls, ll) = match mode {
        MixupMode::Standard => {
            let l = beta.sample(rng);
            (l, l, l)
        }
        MixupMode::Modality => {
            let (a, b) = (beta.sample(rng), beta.sample(rng));
            let ll = match label_weight {
                LabelWeight::Mean => 0.5 * (a + b),
                LabelWeight::Rgb => a,
                LabelWeight::Spec => b,
            };
            (a, b, ll)
        }
    };
    Ok(MixupDraw { perm, lambda_rgb: lr, lambda_spec: ls, lambda_label: ll })
}

fn mix(t: &Tensor, perm: &[usize], lambda: f64) -> Tensor {
    let w = t.len() / t.shape()[0];
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for (i, &j) in perm.iter().enumerate() {
        let (a, b) = (&src[i * w..(i + 1) * w], &src[j * w..(j + 1) * w]);
        out.extend(a.iter().zip(b).map(|(x, y)| lambda * x + (1.0 - lambda) * y));
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// `λ·x_i + (1 − λ)·x_perm[i]` per modality and for the targets.
pub fn apply_mixup(batch: &Batch, d: &MixupDraw) -> Batch {
    Batch {
        rgb: batch.rgb.as_ref().map(|t| mix(t, &d.perm, d.lambda_rgb)),
        spec: batch.spec.as_ref().map(|t| mix(t, &d.perm, d.lambda_spec)),
        targets: batch.targets.iter().map(|t| mix(t, &d.perm, d.lambda_label)).collect(),
    }
}

pub fn mixup<R: Rng + ?Sized>(
    batch: &Batch,
    alpha: f64,
    mode: MixupMode,
    label_weight: LabelWeight,
    rng: &mut R,
) -> Result<(Batch, MixupDraw)> {
    let d = draw_mixup(batch.len(), alpha, mode, label_weight, rng)?;
    Ok((apply_mixup(batch, &d), d))
}
