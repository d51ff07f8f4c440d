//! Cross-modal audio-visual alignment for visual speech recognition.
//!
//! Video frames attend to a bank of quantized audio units, and a frame-level
//! alignment loss pulls each frame's attention toward the units of its
//! temporally corresponding audio frames. The loss is combined with a hybrid
//! CTC/attention recognition objective and trained end to end on a small f64
//! autodiff engine.

pub mod alignment;
mod binio;
pub mod data;
pub mod error;
pub mod model;
pub mod quantizer;
pub mod scoring;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
