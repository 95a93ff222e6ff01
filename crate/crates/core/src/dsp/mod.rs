//! Audio and visual tokenization.

pub mod clip;
pub mod embed;
pub mod patches;
pub mod sampling;
pub mod spectrogram;
pub mod tokenizer;

pub use clip::{read_clip_dir, write_clip_dir, Clip, Labels};
pub use embed::{embed, embed_tokens, EmbeddingParams, TokenSequence};
pub use patches::{extract_patches, Modality, PatchSequence};
pub use sampling::{sample_windows, window_at, SampleMode, Window};
pub use spectrogram::{log_mel_spectrogram, LogMelExtractor, MelFilterbank, Spectrogram};
pub use tokenizer::{Tokenizer, TokenizerConfig};
