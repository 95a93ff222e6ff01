//! Datasets, synthetic tasks, augmentation, mixup and class balancing.

pub mod augment;
pub mod balance;
pub mod dataset;
pub mod mixup;
pub mod synth;

pub use augment::{apply_crop_flip, apply_spec_masks, spec_augment, visual_augment, CropFlip, SpecMasks};
pub use balance::{greedy_cap_indices, greedy_class_cap};
pub use dataset::{Dataset, LabelSpace};
pub use mixup::{apply_mixup, draw_mixup, mixup, Batch, LabelWeight, MixupDraw, MixupMode};
pub use synth::{gen_synthetic_av, render_clip, SynthConfig, Task};
