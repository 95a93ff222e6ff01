//! Spectrogram masking and frame crop/flip.

use rand::Rng;

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Masked rectangle bounds, `[start, end)` on each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpecMasks {
    pub time: (usize, usize),
    pub freq: (usize, usize),
}

/// One time and one frequency mask of uniform width, filled with the grid mean.
pub fn spec_augment<R: Rng + ?Sized>(
    s: &Spectrogram,
    max_time_mask: usize,
    max_freq_mask: usize,
    rng: &mut R,
) -> Result<(Spectrogram, SpecMasks)> {
    let (nm, nt) = (s.mels.shape()[0], s.mels.shape()[1]);
    if max_time_mask > nt || max_freq_mask > nm {
        return Err(Error::invalid(
            "spec_augment",
            format!("masks ({max_time_mask}, {max_freq_mask}) exceed the {nm}×{nt} grid"),
        ));
    }
    let mut band = |max: usize, extent: usize| {
        let w = rng.random_range(0..=max);
        let start = rng.random_range(0..=extent - w);
        (start, start + w)
    };
    let masks = SpecMasks { time: band(max_time_mask, nt), freq: band(max_freq_mask, nm) };
    Ok((apply_spec_masks(s, masks), masks))
}

pub fn apply_spec_masks(s: &Spectrogram, m: SpecMasks) -> Spectrogram {
    let nt = s.mels.shape()[1];
    let mean = s.mels.data().iter().sum::<f64>() / s.mels.len() as f64;
    let mut out = s.clone();
    for (i, v) in out.mels.data_mut().iter_mut().enumerate() {
        let (f, t) = (i / nt, i % nt);
        if (m.time.0..m.time.1).contains(&t) || (m.freq.0..m.freq.1).contains(&f) {
            *v = mean;
        }
    }
    out
}

/// Square crop window in pixels: `(top, left, size_h, size_w)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropFlip {
    pub top: f64,
    pub left: f64,
    pub height: f64,
    pub width: f64,
    pub flip: bool,
}

impl CropFlip {
    pub fn identity(h: usize, w: usize) -> Self {
        Self { top: 0.0, left: 0.0, height: h as f64, width: w as f64, flip: false }
    }
}

/// Crop covering a `U(0.7, 1.0)` fraction of the frame area at a uniform
/// position, then a horizontal flip with probability one half; shared by all
/// frames.
pub fn visual_augment<R: Rng + ?Sized>(frames: &Tensor, rng: &mut R) -> (Tensor, CropFlip) {
    let (h, w) = (frames.shape()[1] as f64, frames.shape()[2] as f64);
    let side = rng.random_range(0.7..=1.0f64).sqrt();
    let (ch, cw) = (h * side, w * side);
    let cf = CropFlip {
        top: rng.random_range(0.0..=h - ch),
        left: rng.random_range(0.0..=w - cw),
        height: ch,
        width: cw,
        flip: rng.random_bool(0.5),
    };
    (apply_crop_flip(frames, cf), cf)
}

/// Bilinear resample of the crop back to full size, corners aligned.
pub fn apply_crop_flip(frames: &Tensor, cf: CropFlip) -> Tensor {
    let s = frames.shape();
    let (nf, h, w, c) = (s[0], s[1], s[2], s[3]);
    let coord = |i: usize, n: usize, start: f64, size: f64| {
        if n == 1 {
            start
        } else {
            start + i as f64 * (size - 1.0) / (n - 1) as f64
        }
    };
    let src = frames.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        let sy = coord(y, h, cf.top, cf.height).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..w {
            let xo = if cf.flip { w - 1 - x } else { x };
            let sx = coord(x, w, cf.left, cf.width).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for f in 0..nf {
                let at = |yy: usize, xx: usize, ch: usize| src[((f * h + yy) * w + xx) * c + ch];
                for ch in 0..c {
                    let v = if fx == 0.0 && fy == 0.0 {
                        at(y0, x0, ch)
                    } else {
                        (1.0 - fy) * ((1.0 - fx) * at(y0, x0, ch) + fx * at(y0, x1, ch))
                            + fy * ((1.0 - fx) * at(y1, x0, ch) + fx * at(y1, x1, ch))
                    };
                    out[((f * h + y) * w + xo) * c + ch] = v;
                }
            }
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}
