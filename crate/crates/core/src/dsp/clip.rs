//! Clip records and the on-disk clip layout.
//!
//! A clip directory holds a `clips.manifest` text file plus two raw files per
//! clip:
//!
//! * `<id>.frames`: `f32` little-endian pixels, shape `frames × height × width × channels`
//! * `<id>.pcm`: signed 16-bit little-endian mono samples
//!
//! Manifest format (version 1): a `mbt-clips v1` header, then one
//! tab-separated record per clip:
//!
//! ```text
//! id  duration  frame_rate  sample_rate  frames  height  width  channels  labels
//! ```
//!
//! `labels` is one of `single:<k>`, `multi:<k1>,<k2>,...` (possibly empty) or
//! `verbnoun:<verb>/<noun>`. Lines starting with `#` are comments.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "clips.manifest";
pub const MANIFEST_HEADER: &str = "mbt-clips v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    Single(usize),
    /// Indices of active classes.
    Multi(Vec<usize>),
    VerbNoun(usize, usize),
}

impl Labels {
    fn encode(&self) -> String {
        match self {
            Labels::Single(k) => format!("single:{k}"),
            Labels::Multi(ks) => {
                let s: Vec<String> = ks.iter().map(usize::to_string).collect();
                format!("multi:{}", s.join(","))
            }
            Labels::VerbNoun(v, n) => format!("verbnoun:{v}/{n}"),
        }
    }

    fn decode(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad label field {s:?}"));
        let num = |x: &str| x.trim().parse::<usize>().map_err(|_| bad());
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "single" => Ok(Labels::Single(num(rest)?)),
            "multi" if rest.is_empty() => Ok(Labels::Multi(Vec::new())),
            "multi" => Ok(Labels::Multi(rest.split(',').map(num).collect::<Result<_>>()?)),
            "verbnoun" => {
                let (v, n) = rest.split_once('/').ok_or_else(bad)?;
                Ok(Labels::VerbNoun(num(v)?, num(n)?))
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Clip {
    pub id: String,
    /// `frames × height × width × channels`, values in `[0, 1]`.
    pub frames: Tensor,
    pub waveform: Vec<f64>,
    pub sample_rate: f64,
    pub frame_rate: f64,
    pub labels: Labels,
}

impl Clip {
    pub fn new(
        id: impl Into<String>,
        frames: Tensor,
        waveform: Vec<f64>,
        sample_rate: f64,
        frame_rate: f64,
        labels: Labels,
    ) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(Error::invalid("clip", format!("frames must be rank 4, got {:?}", frames.shape())));
        }
        if !(sample_rate > 0.0 && frame_rate > 0.0) {
            return Err(Error::invalid("clip", "sample and frame rates must be positive"));
        }
        let clip = Self {
            id: id.into(),
            frames,
            waveform,
            sample_rate,
            frame_rate,
            labels,
        };
        let gap = (clip.video_duration() - clip.audio_duration()).abs();
        if gap > 1.0 / frame_rate + 1e-9 {
            return Err(Error::invalid(
                "clip",
                format!(
                    "video lasts {:.4}s but audio lasts {:.4}s",
                    clip.video_duration(),
                    clip.audio_duration()
                ),
            ));
        }
        Ok(clip)
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// `(height, width, channels)`.
    pub fn frame_dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[1], s[2], s[3])
    }

    pub fn video_duration(&self) -> f64 {
        self.num_frames() as f64 / self.frame_rate
    }

    pub fn audio_duration(&self) -> f64 {
        self.waveform.len() as f64 / self.sample_rate
    }

    /// Duration covered by both streams.
    pub fn duration(&self) -> f64 {
        self.video_duration().min(self.audio_duration())
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        self.frames.row(i)
    }
}

/// Write clips in the documented directory layout.
pub fn write_clip_dir(dir: &Path, clips: &[Clip]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!(
        "{MANIFEST_HEADER}\n# id\tduration\tframe_rate\tsample_rate\tframes\theight\twidth\tchannels\tlabels\n"
    );
    for clip in clips {
        if clip.id.contains(['\t', '\n', '/']) {
            return Err(Error::invalid("clip", format!("unusable clip id {:?}", clip.id)));
        }
        let (h, w, c) = clip.frame_dims();
        manifest.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            clip.id,
            clip.duration(),
            clip.frame_rate,
            clip.sample_rate,
            clip.num_frames(),
            h,
            w,
            c,
            clip.labels.encode()
        ));
        let frames: Vec<u8> = clip
            .frames
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        fs::write(dir.join(format!("{}.frames", clip.id)), frames)?;
        let pcm: Vec<u8> = clip
            .waveform
            .iter()
            .flat_map(|&v| ((v.clamp(-1.0, 1.0) * 32767.0).round() as i16).to_le_bytes())
            .collect();
        fs::write(dir.join(format!("{}.pcm", clip.id)), pcm)?;
    }
    let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

/// Read every clip listed in `dir/clips.manifest`.
pub fn read_clip_dir(dir: &Path) -> Result<Vec<Clip>> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::Format(format!("missing '{MANIFEST_HEADER}' header")));
    }
    let mut clips = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(Error::Format(format!("manifest line {}: expected 9 fields", lineno + 2)));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| Error::Format(format!("manifest line {}: bad number {:?}", lineno + 2, f[i])))
        };
        let (frame_rate, sample_rate) = (num(2)?, num(3)?);
        let dims = [num(4)? as usize, num(5)? as usize, num(6)? as usize, num(7)? as usize];
        let raw = fs::read(dir.join(format!("{}.frames", f[0])))?;
        let pixels: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let frames = Tensor::new(dims.to_vec(), pixels)?;
        let raw = fs::read(dir.join(format!("{}.pcm", f[0])))?;
        let waveform = raw
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32767.0)
            .collect();
        clips.push(Clip::new(
            f[0],
            frames,
            waveform,
            sample_rate,
            frame_rate,
            Labels::decode(f[8])?,
        )?);
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(id: &str, labels: Labels) -> Clip {
        let frames = Tensor::from_fn(&[5, 4, 4, 3], |i| (i % 17) as f64 / 16.0);
        let wave = (0..1600).map(|i| (i as f64 * 0.01).sin() * 0.5).collect();
        Clip::new(id, frames, wave, 8000.0, 25.0, labels).unwrap()
    }

    #[test]
    fn label_codec_round_trips() {
        for l in [
            Labels::Single(3),
            Labels::Multi(vec![]),
            Labels::Multi(vec![1, 5, 9]),
            Labels::VerbNoun(2, 7),
        ] {
            assert_eq!(Labels::decode(&l.encode()).unwrap(), l);
        }
        assert!(Labels::decode("bogus:1").is_err());
    }

    #[test]
    fn mismatched_durations_are_rejected() {
        let frames = Tensor::zeros(&[25, 2, 2, 1]);
        let err = Clip::new("x", frames, vec![0.0; 4000], 8000.0, 25.0, Labels::Single(0));
        assert!(err.is_err());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clips = vec![clip("a", Labels::Single(1)), clip("b", Labels::Multi(vec![0, 2]))];
        write_clip_dir(dir.path(), &clips).unwrap();
        let back = read_clip_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].labels, Labels::Multi(vec![0, 2]));
        // frames survive f32 storage, audio survives 16-bit quantization
        assert!(back[0].frames.max_abs_diff(&clips[0].frames) < 1e-7);
        let worst = back[0]
            .waveform
            .iter()
            .zip(&clips[0].waveform)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1.0 / 32767.0);
    }
}
