//! Temporal window sampling for paired visual and audio streams.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::clip::Clip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleMode {
    /// One start offset for both modalities.
    #[default]
    Sync,
    /// Independent start offsets per modality.
    Async,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(SampleMode::Sync),
            "async" => Ok(SampleMode::Async),
            _ => Err(Error::Config(format!("unknown sample mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Window {
    /// `n_frames × H × W × C`.
    pub frames: Tensor,
    pub audio: Vec<f64>,
    pub visual_offset: f64,
    pub audio_offset: f64,
}

/// Deterministic window of `span_t` seconds at the given offsets.
pub fn window_at(
    clip: &Clip,
    span_t: f64,
    n_frames: usize,
    visual_offset: f64,
    audio_offset: f64,
) -> Result<Window> {
    let dur = clip.duration();
    if !(span_t > 0.0) || span_t > dur + 1e-9 {
        return Err(Error::invalid(
            "sample_windows",
            format!("span {span_t}s does not fit in a {dur}s clip"),
        ));
    }
    if n_frames == 0 {
        return Err(Error::invalid("sample_windows", "at least one frame is required"));
    }
    let total = clip.num_frames();
    let first = (visual_offset * clip.frame_rate).round() as usize;
    let stride = span_t * clip.frame_rate / n_frames as f64;
    let mut data = Vec::with_capacity(n_frames * clip.frames.row(0).len());
    for i in 0..n_frames {
        let idx = (first + (i as f64 * stride).floor() as usize).min(total - 1);
        data.extend_from_slice(clip.frame(idx));
    }
    let (h, w, c) = clip.frame_dims();
    let frames = Tensor::new(vec![n_frames, h, w, c], data)?;

    let len = (span_t * clip.sample_rate).round() as usize;
    let start = ((audio_offset * clip.sample_rate).round() as usize)
        .min(clip.waveform.len().saturating_sub(len));
    let end = (start + len).min(clip.waveform.len());
    Ok(Window {
        frames,
        audio: clip.waveform[start..end].to_vec(),
        visual_offset,
        audio_offset,
    })
}

/// Random window of `span_t` seconds with `n_frames` uniformly strided frames.
pub fn sample_windows<R: Rng + ?Sized>(
    clip: &Clip,
    span_t: f64,
    n_frames: usize,
    mode: SampleMode,
    rng: &mut R,
) -> Result<Window> {
    let slack = clip.duration() - span_t;
    if slack < -1e-9 {
        return Err(Error::invalid(
            "sample_windows",
            format!("span {span_t}s is longer than the {}s clip", clip.duration()),
        ));
    }
    let mut draw = || {
        if slack <= 1e-9 {
            0.0
        } else {
            rng.random_range(0.0..slack)
        }
    };
    let (v, a) = match mode {
        SampleMode::Sync => {
            let o = draw();
            (o, o)
        }
        SampleMode::Async => (draw(), draw()),
    };
    window_at(clip, span_t, n_frames, v, a)
}
