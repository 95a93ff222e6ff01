use std::fs;
use std::path::Path;

use crate::dsp::{read_clip_dir, write_clip_dir, Clip, Labels};
use crate::error::{Error, Result};

pub const INFO_FILE: &str = "dataset.info";
const INFO_HEADER: &str = "mbt-dataset v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSpace {
    Classes(usize),
    Multilabel(usize),
    VerbNoun(usize, usize),
}

impl LabelSpace {
    fn encode(self) -> String {
        match self {
            LabelSpace::Classes(k) => format!("classes:{k}"),
            LabelSpace::Multilabel(c) => format!("multilabel:{c}"),
            LabelSpace::VerbNoun(v, n) => format!("verbnoun:{v}/{n}"),
        }
    }

    fn decode(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("bad label space {s:?}"));
        let num = |x: &str| x.parse::<usize>().map_err(|_| bad());
        match s.split_once(':').ok_or_else(bad)? {
            ("classes", k) => Ok(LabelSpace::Classes(num(k)?)),
            ("multilabel", c) => Ok(LabelSpace::Multilabel(num(c)?)),
            ("verbnoun", r) => {
                let (v, n) = r.split_once('/').ok_or_else(bad)?;
                Ok(LabelSpace::VerbNoun(num(v)?, num(n)?))
            }
            _ => Err(bad()),
        }
    }

    pub fn contains(self, l: &Labels) -> bool {
        match (self, l) {
            (LabelSpace::Classes(k), Labels::Single(c)) => *c < k,
            (LabelSpace::Multilabel(k), Labels::Multi(cs)) => cs.iter().all(|&c| c < k),
            (LabelSpace::VerbNoun(v, n), Labels::VerbNoun(a, b)) => *a < v && *b < n,
            _ => false,
        }
    }

    /// Target row per head: one-hot, multi-hot, or a verb and a noun one-hot.
    pub fn targets(self, l: &Labels) -> Vec<Vec<f64>> {
        let hot = |k: usize, idx: &[usize]| {
            let mut v = vec![0.0; k];
            for &i in idx {
                v[i] = 1.0;
            }
            v
        };
        match (self, l) {
            (LabelSpace::Classes(k), Labels::Single(c)) => vec![hot(k, &[*c])],
            (LabelSpace::Multilabel(k), Labels::Multi(cs)) => vec![hot(k, cs)],
            (LabelSpace::VerbNoun(v, n), Labels::VerbNoun(a, b)) => vec![hot(v, &[*a]), hot(n, &[*b])],
            _ => panic!("labels {l:?} outside {self:?}"),
        }
    }

    pub fn head_widths(self) -> Vec<usize> {
        match self {
            LabelSpace::Classes(k) | LabelSpace::Multilabel(k) => vec![k],
            LabelSpace::VerbNoun(v, n) => vec![v, n],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub clips: Vec<Clip>,
    pub labels: LabelSpace,
    pub split: String,
    /// Generating `(visual, audio)` symbols of synthetic clips; not persisted.
    pub symbols: Option<Vec<(usize, usize)>>,
}

impl Dataset {
    pub fn new(clips: Vec<Clip>, labels: LabelSpace, split: impl Into<String>) -> Result<Self> {
        let ds = Self { clips, labels, split: split.into(), symbols: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.clips {
            if !self.labels.contains(&c.labels) {
                return Err(Error::invalid(
                    "dataset",
                    format!("clip {} has labels {:?} outside {:?}", c.id, c.labels, self.labels),
                ));
            }
        }
        Ok(())
    }

    /// Rejects clips shorter than `span_s`.
    pub fn check_span(&self, span_s: f64) -> Result<()> {
        match self.clips.iter().find(|c| c.duration() + 1e-9 < span_s) {
            Some(c) => Err(Error::invalid(
                "dataset",
                format!("clip {} lasts {:.3}s, shorter than the {span_s}s window", c.id, c.duration()),
            )),
            None => Ok(()),
        }
    }

    /// Clip files plus a `dataset.info` sidecar.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_clip_dir(dir, &self.clips)?;
        let info = format!(
            "{INFO_HEADER}\nsplit\t{}\nlabels\t{}\n",
            self.split,
            self.labels.encode()
        );
        fs::write(dir.join(INFO_FILE), info)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(INFO_FILE))?;
        let mut lines = text.lines();
        if lines.next() != Some(INFO_HEADER) {
            return Err(Error::Format(format!("missing '{INFO_HEADER}' header")));
        }
        let (mut split, mut labels) = (None, None);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            match line.split_once('\t') {
                Some(("split", s)) => split = Some(s.to_string()),
                Some(("labels", s)) => labels = Some(LabelSpace::decode(s)?),
                _ => return Err(Error::Format(format!("bad dataset.info line {line:?}"))),
            }
        }
        let labels = labels.ok_or_else(|| Error::Format("dataset.info lacks labels".into()))?;
        Dataset::new(read_clip_dir(dir)?, labels, split.unwrap_or_default())
    }
}
