//! Synthetic audiovisual classification tasks.
//!
//! A visual symbol `v` is a bright block in grid cell `v` of every frame; an
//! audio symbol `a` is a pure tone at the center frequency of the mel band
//! `⌊(a + ½)·n_mels / K⌋`. Both are drawn independently and uniformly.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, LabelSpace};
use crate::dsp::spectrogram::MelFilterbank;
use crate::dsp::{Clip, Labels, TokenizerConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Label `(v + a) mod K`.
    PairSum,
    /// Label `v`.
    VisualOnly,
    /// Label `a`.
    AudioOnly,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pair-sum" => Ok(Task::PairSum),
            "visual-only" => Ok(Task::VisualOnly),
            "audio-only" => Ok(Task::AudioOnly),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

impl Task {
    pub fn label(self, v: usize, a: usize, k: usize) -> usize {
        match self {
            Task::PairSum => (v + a) % k,
            Task::VisualOnly => v,
            Task::AudioOnly => a,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub task: Task,
    pub duration_s: f64,
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    /// Side of one grid cell in pixels; the grid is centered in the frame.
    pub cell: usize,
    pub frame_rate: f64,
    pub sample_rate: f64,
    /// Mel layout used to place tones.
    pub n_mels: usize,
    pub window_s: f64,
    pub background: f64,
    pub block: f64,
    pub pixel_noise: f64,
    pub tone_amplitude: f64,
    pub audio_noise: f64,
}

impl SynthConfig {
    /// Clips sized for `tok`, lasting exactly one window.
    ///
    /// The cell pitch is 1.5 patches when the grid fits, so blocks in
    /// different cells cut the patch lattice differently and each symbol
    /// yields a distinct multiset of patch contents.
    pub fn for_tokenizer(tok: &TokenizerConfig, classes: usize, task: Task) -> Self {
        let (rows, cols) = grid(classes);
        let fit = (tok.frame_height / rows).min(tok.frame_width / cols);
        let pitch = tok.patch_rgb[0].max(tok.patch_rgb[1]) * 3 / 2;
        Self {
            classes,
            task,
            duration_s: tok.span_s,
            frame_height: tok.frame_height,
            frame_width: tok.frame_width,
            channels: tok.channels,
            cell: if pitch > 0 && pitch <= fit { pitch } else { fit },
            frame_rate: tok.frame_rate,
            sample_rate: tok.sample_rate,
            n_mels: tok.n_mels,
            window_s: tok.window_s,
            background: 0.2,
            block: 0.8,
            pixel_noise: 0.1,
            tone_amplitude: 0.5,
            audio_noise: 0.1,
        }
    }

    fn grid(&self) -> (usize, usize) {
        grid(self.classes)
    }

    /// Tone frequency for audio symbol `a`.
    pub fn tone_hz(&self, a: usize) -> Result<f64> {
        let n_fft = ((self.window_s * self.sample_rate).round() as usize).next_power_of_two();
        let bank = MelFilterbank::new(self.sample_rate, n_fft, self.n_mels)?;
        let band = ((a as f64 + 0.5) * self.n_mels as f64 / self.classes as f64) as usize;
        Ok(bank.center_hz(band.min(self.n_mels - 1)))
    }

    pub fn n_frames(&self) -> usize {
        (self.duration_s * self.frame_rate).round() as usize
    }

    pub fn n_samples(&self) -> usize {
        (self.n_frames() as f64 / self.frame_rate * self.sample_rate).round() as usize
    }
}

/// `(rows, cols)` of the near-square symbol grid.
fn grid(classes: usize) -> (usize, usize) {
    let cols = (classes as f64).sqrt().ceil() as usize;
    (classes.div_ceil(cols), cols)
}

/// Renders one clip for symbols `(v, a)`.
pub fn render_clip<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    id: String,
    v: usize,
    a: usize,
    rng: &mut R,
) -> Result<Clip> {
    let (rows, cols) = cfg.grid();
    let (h, w, c) = (cfg.frame_height, cfg.frame_width, cfg.channels);
    let cell = cfg.cell;
    if cell == 0 || rows * cell > h || cols * cell > w {
        return Err(Error::Config(format!("a {rows}x{cols} grid of {cell}px cells does not fit {h}x{w} frames")));
    }
    let (ch, cw) = (cell, cell);
    let (top, left) = ((h - rows * cell) / 2, (w - cols * cell) / 2);
    let (r0, c0) = (top + (v / cols) * ch, left + (v % cols) * cw);
    let nf = cfg.n_frames();
    let pix = Normal::new(0.0, cfg.pixel_noise).map_err(|e| Error::Config(e.to_string()))?;
    let frames = Tensor::from_fn(&[nf, h, w, c], |i| {
        let (y, x) = ((i / c / w) % h, (i / c) % w);
        let inside = (r0..r0 + ch).contains(&y) && (c0..c0 + cw).contains(&x);
        let base = if inside { cfg.block } else { cfg.background };
        (base + pix.sample(rng)).clamp(0.0, 1.0)
    });
    let hz = cfg.tone_hz(a)?;
    let phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, cfg.audio_noise).map_err(|e| Error::Config(e.to_string()))?;
    let wave = (0..cfg.n_samples())
        .map(|i| {
            let t = i as f64 / cfg.sample_rate;
            cfg.tone_amplitude * (2.0 * PI * hz * t + phase).sin() + noise.sample(rng)
        })
        .collect();
    Clip::new(
        id,
        frames,
        wave,
        cfg.sample_rate,
        cfg.frame_rate,
        Labels::Single(cfg.task.label(v, a, cfg.classes)),
    )
}

/// `n` clips with independent uniform symbols.
pub fn gen_synthetic_av<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    n: usize,
    split: &str,
    rng: &mut R,
) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::Config("synthetic tasks need at least two classes".into()));
    }
    let mut clips = Vec::with_capacity(n);
    let mut symbols = Vec::with_capacity(n);
    for i in 0..n {
        let v = rng.random_range(0..cfg.classes);
        let a = rng.random_range(0..cfg.classes);
        clips.push(render_clip(cfg, format!("{split}{i:06}"), v, a, rng)?);
        symbols.push((v, a));
    }
    Ok(Dataset {
        clips,
        labels: LabelSpace::Classes(cfg.classes),
        split: split.to_string(),
        symbols: Some(symbols),
    })
}
