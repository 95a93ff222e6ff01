//! Multimodal bottleneck transformer for audiovisual classification.
pub mod analysis;
pub mod attention;
pub mod data;
pub mod dsp;
pub mod error;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
