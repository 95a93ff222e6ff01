//! Frame and waveform tokenization under one fixed configuration.

use serde::{Deserialize, Serialize};

use super::patches::{extract_patches, Modality, PatchSequence};
use super::spectrogram::{LogMelExtractor, Spectrogram};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    pub channels: usize,
    /// Frames sampled per window.
    pub n_frames: usize,
    pub patch_rgb: [usize; 2],
    pub sample_rate: f64,
    pub frame_rate: f64,
    pub window_s: f64,
    pub hop_s: f64,
    pub n_mels: usize,
    /// `[mel, time]` patch extents.
    pub patch_spec: [usize; 2],
    /// Window length in seconds for both streams.
    pub span_s: f64,
    /// Log-mel values are mapped to `(x - spec_mean) / spec_std`.
    pub spec_mean: f64,
    pub spec_std: f64,
    /// Pixels are mapped to `(x - pixel_mean) / pixel_std`.
    #[serde(default = "half")]
    pub pixel_mean: f64,
    #[serde(default = "half")]
    pub pixel_std: f64,
}

fn half() -> f64 {
    0.5
}

impl TokenizerConfig {
    pub fn paper() -> Self {
        Self {
            frame_height: 224,
            frame_width: 224,
            channels: 3,
            n_frames: 8,
            patch_rgb: [16, 16],
            sample_rate: 16_000.0,
            frame_rate: 25.0,
            window_s: 0.025,
            hop_s: 0.010,
            n_mels: 128,
            patch_spec: [16, 16],
            span_s: 8.0,
            spec_mean: 0.0,
            spec_std: 1.0,
            pixel_mean: 0.5,
            pixel_std: 0.5,
        }
    }

    pub fn desk() -> Self {
        Self {
            frame_height: 32,
            frame_width: 32,
            channels: 3,
            n_frames: 2,
            patch_rgb: [8, 8],
            sample_rate: 8000.0,
            frame_rate: 25.0,
            window_s: 0.025,
            hop_s: 0.010,
            n_mels: 16,
            patch_spec: [8, 8],
            span_s: 0.32,
            spec_mean: 1.8,
            spec_std: 0.8,
            pixel_mean: 0.5,
            pixel_std: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: usize, what: &str| {
            if v == 0 {
                Err(Error::Config(format!("tokenizer.{what} must be positive")))
            } else {
                Ok(())
            }
        };
        pos(self.frame_height, "frame_height")?;
        pos(self.frame_width, "frame_width")?;
        pos(self.channels, "channels")?;
        pos(self.n_frames, "n_frames")?;
        pos(self.n_mels, "n_mels")?;
        for v in self.patch_rgb.iter().chain(&self.patch_spec) {
            pos(*v, "patch extents")?;
        }
        if self.patch_rgb[0] > self.frame_height || self.patch_rgb[1] > self.frame_width {
            return Err(Error::Config("tokenizer.patch_rgb exceeds the frame".into()));
        }
        if self.patch_spec[0] > self.n_mels || self.patch_spec[1] > self.audio_frames() {
            return Err(Error::Config("tokenizer.patch_spec exceeds the spectrogram".into()));
        }
        for (v, what) in [
            (self.sample_rate, "sample_rate"),
            (self.frame_rate, "frame_rate"),
            (self.window_s, "window_s"),
            (self.hop_s, "hop_s"),
            (self.span_s, "span_s"),
            (self.spec_std, "spec_std"),
            (self.pixel_std, "pixel_std"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("tokenizer.{what} must be positive")));
            }
        }
        Ok(())
    }

    /// Spectrogram columns per window: `round(span / hop)`.
    pub fn audio_frames(&self) -> usize {
        (self.span_s / self.hop_s).round() as usize
    }

    pub fn rgb_grid(&self) -> [usize; 3] {
        [
            self.n_frames,
            self.frame_height / self.patch_rgb[0],
            self.frame_width / self.patch_rgb[1],
        ]
    }

    pub fn spec_grid(&self) -> [usize; 2] {
        [
            self.n_mels / self.patch_spec[0],
            self.audio_frames() / self.patch_spec[1],
        ]
    }

    pub fn n_rgb_tokens(&self) -> usize {
        self.rgb_grid().iter().product()
    }

    pub fn n_spec_tokens(&self) -> usize {
        self.spec_grid().iter().product()
    }

    pub fn rgb_patch_dim(&self) -> usize {
        self.patch_rgb[0] * self.patch_rgb[1] * self.channels
    }

    pub fn spec_patch_dim(&self) -> usize {
        self.patch_spec[0] * self.patch_spec[1]
    }

    pub fn n_tokens(&self, m: Modality) -> usize {
        match m {
            Modality::Rgb => self.n_rgb_tokens(),
            Modality::Spec => self.n_spec_tokens(),
        }
    }

    pub fn patch_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Rgb => self.rgb_patch_dim(),
            Modality::Spec => self.spec_patch_dim(),
        }
    }
}

/// Tokenizer holding a planned STFT for its configuration.
#[derive(Debug)]
pub struct Tokenizer {
    cfg: TokenizerConfig,
    stft: LogMelExtractor,
}

impl Tokenizer {
    pub fn new(cfg: TokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        let stft = LogMelExtractor::new(cfg.sample_rate, cfg.window_s, cfg.hop_s, cfg.n_mels)?;
        Ok(Self { cfg, stft })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.cfg
    }

    /// Log-mel grid of exactly `audio_frames()` columns.
    ///
    /// The segment is zero-padded (or truncated) at the end to the sample
    /// count that yields that many analysis frames.
    pub fn spectrogram(&self, audio: &[f64]) -> Result<Spectrogram> {
        let need = self.stft.samples_for(self.cfg.audio_frames());
        let mut buf = audio[..audio.len().min(need)].to_vec();
        buf.resize(need, 0.0);
        self.stft.compute(&buf)
    }

    pub fn audio_patches(&self, audio: &[f64]) -> Result<PatchSequence> {
        self.spectrogram_patches(self.spectrogram(audio)?)
    }

    /// Normalizes a grid from [`Tokenizer::spectrogram`] and cuts it into patches.
    pub fn spectrogram_patches(&self, mut s: Spectrogram) -> Result<PatchSequence> {
        let (m, sd) = (self.cfg.spec_mean, self.cfg.spec_std);
        s.mels.data_mut().iter_mut().for_each(|v| *v = (*v - m) / sd);
        let [ph, pw] = self.cfg.patch_spec;
        extract_patches(&s.mels, ph, pw, Modality::Spec)
    }

    /// Normalized patches from `[F, H, W, C]` frames.
    pub fn visual_patches(&self, frames: &Tensor) -> Result<PatchSequence> {
        let [ph, pw] = self.cfg.patch_rgb;
        let (m, sd) = (self.cfg.pixel_mean, self.cfg.pixel_std);
        let mut p = extract_patches(frames, ph, pw, Modality::Rgb)?;
        p.patches.data_mut().iter_mut().for_each(|v| *v = (*v - m) / sd);
        if p.len() != self.cfg.n_rgb_tokens() || p.patch_dim() != self.cfg.rgb_patch_dim() {
            return Err(Error::shape(
                "tokenize",
                &[p.len(), p.patch_dim()],
                &[self.cfg.n_rgb_tokens(), self.cfg.rgb_patch_dim()],
            ));
        }
        Ok(p)
    }
}
