//! Log-mel spectrograms.
//!
//! Convention: symmetric Hamming window, FFT size equal to the next power of
//! two at or above the window length, magnitude (not power) spectra, HTK mel
//! scale with triangular filters spanning 0 Hz to Nyquist, and
//! `ln(energy + 1e-10)` compression.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Log-mel energies, `n_mels × n_frames`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub mels: Tensor,
    pub n_mels: usize,
    pub hop_s: f64,
    pub window_s: f64,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.mels.shape()[1]
    }
}

/// Triangular HTK filters for one `(sample_rate, n_fft, n_mels)` triple.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    sample_rate: f64,
    n_fft: usize,
    /// Edge frequencies, `n_mels + 2` of them.
    edges_hz: Vec<f64>,
    /// `n_mels × (n_fft / 2 + 1)` weights.
    weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: f64, n_fft: usize, n_mels: usize) -> Result<Self> {
        let bins = n_fft / 2 + 1;
        if n_mels == 0 || n_mels > bins {
            return Err(Error::invalid(
                "log_mel_spectrogram",
                format!("{n_mels} mel bands requested but the FFT has {bins} bins"),
            ));
        }
        let top = hz_to_mel(sample_rate / 2.0);
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            for k in 0..bins {
                let f = k as f64 * sample_rate / n_fft as f64;
                weights[m * bins + k] = triangle(&edges_hz[m..m + 3], f);
            }
        }
        Ok(Self {
            sample_rate,
            n_fft,
            edges_hz,
            weights,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.edges_hz.len() - 2
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// Center frequency of band `m`.
    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges_hz[m + 1]
    }

    /// `(low, center, high)` edges of band `m`.
    pub fn band_edges(&self, m: usize) -> (f64, f64, f64) {
        (self.edges_hz[m], self.edges_hz[m + 1], self.edges_hz[m + 2])
    }

    fn apply(&self, magnitude: &[f64], out: &mut [f64]) {
        let bins = self.n_bins();
        for (m, o) in out.iter_mut().enumerate() {
            let w = &self.weights[m * bins..(m + 1) * bins];
            *o = w.iter().zip(magnitude).map(|(a, b)| a * b).sum();
        }
    }
}

fn triangle(edges: &[f64], f: f64) -> f64 {
    let (lo, c, hi) = (edges[0], edges[1], edges[2]);
    if f <= lo || f >= hi {
        0.0
    } else if f <= c {
        (f - lo) / (c - lo)
    } else {
        (hi - f) / (hi - c)
    }
}

/// Reusable STFT + filterbank for a fixed configuration.
pub struct LogMelExtractor {
    win_len: usize,
    hop_len: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bank: MelFilterbank,
    hop_s: f64,
    window_s: f64,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor")
            .field("win_len", &self.win_len)
            .field("hop_len", &self.hop_len)
            .field("n_mels", &self.bank.n_mels())
            .finish()
    }
}

impl LogMelExtractor {
    pub fn new(sample_rate: f64, window_s: f64, hop_s: f64, n_mels: usize) -> Result<Self> {
        let win_len = (window_s * sample_rate).round() as usize;
        let hop_len = (hop_s * sample_rate).round() as usize;
        if win_len < 2 || hop_len == 0 {
            return Err(Error::invalid(
                "log_mel_spectrogram",
                "window and hop must each span at least one sample",
            ));
        }
        let n_fft = win_len.next_power_of_two();
        let window = (0..win_len)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (win_len - 1) as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            win_len,
            hop_len,
            window,
            fft,
            bank: MelFilterbank::new(sample_rate, n_fft, n_mels)?,
            hop_s,
            window_s,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    pub fn window_len(&self) -> usize {
        self.win_len
    }

    pub fn hop_len(&self) -> usize {
        self.hop_len
    }

    /// `floor((n_samples - window) / hop) + 1`.
    pub fn frames_for(&self, n_samples: usize) -> usize {
        if n_samples < self.win_len {
            0
        } else {
            (n_samples - self.win_len) / self.hop_len + 1
        }
    }

    /// Samples needed for exactly `frames` analysis frames.
    pub fn samples_for(&self, frames: usize) -> usize {
        (frames.max(1) - 1) * self.hop_len + self.win_len
    }

    pub fn compute(&self, waveform: &[f64]) -> Result<Spectrogram> {
        if waveform.len() < self.win_len {
            return Err(Error::invalid(
                "log_mel_spectrogram",
                format!(
                    "waveform has {} samples, shorter than one {}-sample window",
                    waveform.len(),
                    self.win_len
                ),
            ));
        }
        if waveform.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "log_mel_spectrogram",
            });
        }
        let n_frames = self.frames_for(waveform.len());
        let n_mels = self.bank.n_mels();
        let n_fft = self.bank.n_fft;
        let mut out = vec![0.0; n_mels * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut mag = vec![0.0; self.bank.n_bins()];
        let mut col = vec![0.0; n_mels];
        for t in 0..n_frames {
            let start = t * self.hop_len;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < self.win_len {
                    Complex::new(waveform[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (m, b) in mag.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            self.bank.apply(&mag, &mut col);
            for (m, v) in col.iter().enumerate() {
                out[m * n_frames + t] = (v + LOG_FLOOR).ln();
            }
        }
        Ok(Spectrogram {
            mels: Tensor::new(vec![n_mels, n_frames], out)?,
            n_mels,
            hop_s: self.hop_s,
            window_s: self.window_s,
        })
    }
}

pub fn log_mel_spectrogram(
    waveform: &[f64],
    sample_rate: f64,
    window_s: f64,
    hop_s: f64,
    n_mels: usize,
) -> Result<Spectrogram> {
    LogMelExtractor::new(sample_rate, window_s, hop_s, n_mels)?.compute(waveform)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, sr: f64, secs: f64) -> Vec<f64> {
        let n = (sr * secs) as usize;
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / sr).sin()).collect()
    }

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 440.0, 1000.0, 7999.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(1000.0) - 999.985_6).abs() < 1e-3);
    }

    #[test]
    fn eight_seconds_gives_about_800_frames() {
        let wave = vec![0.0; 8 * 16_000];
        let s = log_mel_spectrogram(&wave, 16_000.0, 0.025, 0.010, 128).unwrap();
        assert_eq!(s.mels.shape(), &[128, 798]);
    }

    #[test]
    fn silence_is_the_log_floor() {
        let s = log_mel_spectrogram(&vec![0.0; 4000], 16_000.0, 0.025, 0.010, 40).unwrap();
        let floor = LOG_FLOOR.ln();
        assert!(s.mels.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn sine_peaks_in_the_band_covering_its_frequency() {
        let (sr, n_mels) = (16_000.0, 64);
        let ex = LogMelExtractor::new(sr, 0.025, 0.010, n_mels).unwrap();
        // Oracle: the band whose triangle is highest at 1 kHz.
        let bank = ex.filterbank();
        let expected = (0..n_mels)
            .max_by(|&a, &b| {
                let (la, ca, ha) = bank.band_edges(a);
                let (lb, cb, hb) = bank.band_edges(b);
                triangle(&[la, ca, ha], 1000.0).total_cmp(&triangle(&[lb, cb, hb], 1000.0))
            })
            .unwrap();
        let s = ex.compute(&sine(1000.0, sr, 0.5)).unwrap();
        for t in 0..s.n_frames() {
            let argmax = (0..n_mels)
                .max_by(|&a, &b| s.mels.at(&[a, t]).total_cmp(&s.mels.at(&[b, t])))
                .unwrap();
            assert_eq!(argmax, expected, "frame {t}");
        }
    }

    #[test]
    fn matches_a_naive_dft() {
        let ex = LogMelExtractor::new(8000.0, 0.025, 0.010, 16).unwrap();
        let wave: Vec<f64> = (0..600).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * 0.4).collect();
        let s = ex.compute(&wave).unwrap();
        let n_fft = ex.bank.n_fft;
        for t in [0, 3] {
            let start = t * ex.hop_len();
            let mag: Vec<f64> = (0..ex.bank.n_bins())
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for i in 0..ex.window_len() {
                        let x = wave[start + i] * ex.window[i];
                        let ang = -2.0 * PI * (k * i) as f64 / n_fft as f64;
                        re += x * ang.cos();
                        im += x * ang.sin();
                    }
                    re.hypot(im)
                })
                .collect();
            let mut col = vec![0.0; 16];
            ex.bank.apply(&mag, &mut col);
            for (m, v) in col.iter().enumerate() {
                assert!(((v + LOG_FLOOR).ln() - s.mels.at(&[m, t])).abs() < 1e-9, "frame {t} mel {m}");
            }
        }
    }

    #[test]
    fn errors() {
        assert!(log_mel_spectrogram(&[0.0; 100], 16_000.0, 0.025, 0.010, 8).is_err());
        // 400-sample window -> 512-point FFT -> 257 bins
        assert!(log_mel_spectrogram(&[0.0; 1000], 16_000.0, 0.025, 0.010, 258).is_err());
        assert!(log_mel_spectrogram(&[0.0; 1000], 16_000.0, 0.025, 0.010, 257).is_ok());
    }

    #[test]
    fn frame_count_formula() {
        let ex = LogMelExtractor::new(8000.0, 0.025, 0.010, 16).unwrap();
        for n in [200, 279, 280, 2400, 4800, 8001] {
            let want = (n - 200) / 80 + 1;
            assert_eq!(ex.compute(&vec![0.3; n]).unwrap().n_frames(), want, "{n}");
        }
    }
}
