use serde::{Deserialize, Serialize};

use crate::dsp::{Modality, TokenizerConfig};
use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// One shared-weight layer over the concatenated sequence.
    VanillaShared,
    /// Per-modality cross layers against the concatenated sequence.
    VanillaCross,
    /// Cross-modal flow only through bottleneck tokens.
    Bottleneck,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateMode {
    #[default]
    Symmetric,
    RgbFirst,
    SpecFirst,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Inputs {
    #[default]
    Audiovisual,
    Rgb,
    Spec,
}

impl Inputs {
    pub fn uses(self, m: Modality) -> bool {
        matches!(
            (self, m),
            (Inputs::Audiovisual, _) | (Inputs::Rgb, Modality::Rgb) | (Inputs::Spec, Modality::Spec)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Head {
    Single { classes: usize },
    VerbNoun { verbs: usize, nouns: usize },
}

impl Head {
    /// Output width of each head.
    pub fn widths(self) -> Vec<usize> {
        match self {
            Head::Single { classes } => vec![classes],
            Head::VerbNoun { verbs, nouns } => vec![verbs, nouns],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub version: u32,
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub d_mlp: usize,
    pub bottleneck: usize,
    /// First layer at which modalities interact; equal to `layers` for late fusion.
    pub fusion_layer: usize,
    pub strategy: Strategy,
    #[serde(default)]
    pub update_mode: UpdateMode,
    pub share_weights: bool,
    #[serde(default)]
    pub inputs: Inputs,
    pub head: Head,
    pub tokenizer: TokenizerConfig,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            version: CONFIG_VERSION,
            layers: 2,
            heads: 2,
            d: 8,
            d_mlp: 16,
            bottleneck: 2,
            fusion_layer: 1,
            strategy: Strategy::Bottleneck,
            update_mode: UpdateMode::Symmetric,
            share_weights: false,
            inputs: Inputs::Audiovisual,
            head: Head::Single { classes: 3 },
            tokenizer: TokenizerConfig {
                frame_height: 8,
                frame_width: 8,
                channels: 1,
                n_frames: 1,
                patch_rgb: [4, 4],
                sample_rate: 1600.0,
                frame_rate: 25.0,
                window_s: 0.025,
                hop_s: 0.010,
                n_mels: 8,
                patch_spec: [4, 4],
                span_s: 0.08,
                spec_mean: 0.0,
                spec_std: 3.0,
                pixel_mean: 0.5,
                pixel_std: 0.5,
            },
        }
    }

    pub fn desk() -> Self {
        Self {
            version: CONFIG_VERSION,
            layers: 4,
            heads: 4,
            d: 64,
            d_mlp: 128,
            bottleneck: 4,
            fusion_layer: 2,
            strategy: Strategy::Bottleneck,
            update_mode: UpdateMode::Symmetric,
            share_weights: false,
            inputs: Inputs::Audiovisual,
            head: Head::Single { classes: 4 },
            tokenizer: TokenizerConfig::desk(),
        }
    }

    /// Full-size shapes; used for shape and cost accounting only.
    pub fn paper() -> Self {
        Self {
            version: CONFIG_VERSION,
            layers: 12,
            heads: 12,
            d: 768,
            d_mlp: 3072,
            bottleneck: 4,
            fusion_layer: 8,
            strategy: Strategy::Bottleneck,
            update_mode: UpdateMode::Symmetric,
            share_weights: false,
            inputs: Inputs::Audiovisual,
            head: Head::Single { classes: 527 },
            tokenizer: TokenizerConfig::paper(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown preset `{name}` (tiny, desk, paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return fail(format!("unsupported model config version {}", self.version));
        }
        if self.layers == 0 || self.d == 0 || self.d_mlp == 0 {
            return fail("layers, d and d_mlp must be positive".into());
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return fail(format!("d = {} is not divisible by {} heads", self.d, self.heads));
        }
        if self.fusion_layer > self.layers {
            return fail(format!(
                "fusion_layer {} exceeds layer count {}",
                self.fusion_layer, self.layers
            ));
        }
        if self.strategy == Strategy::VanillaShared && !self.share_weights {
            return fail("vanilla-shared fusion requires share_weights = true".into());
        }
        if self.head.widths().contains(&0) {
            return fail("classifier heads need at least one class".into());
        }
        self.tokenizer.validate()
    }

    /// Non-fatal notes about the configuration.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.strategy == Strategy::Bottleneck && self.inputs == Inputs::Audiovisual {
            let b = self.bottleneck;
            for m in [Modality::Rgb, Modality::Spec] {
                let n = self.tokenizer.n_tokens(m);
                if b * 4 > n {
                    w.push(format!("{b} bottleneck tokens is not much smaller than {n} {} tokens", m.name()));
                }
            }
        }
        w
    }

    pub fn has_bottleneck(&self) -> bool {
        self.strategy == Strategy::Bottleneck
            && self.inputs == Inputs::Audiovisual
            && self.fusion_layer < self.layers
            && self.bottleneck > 0
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}
