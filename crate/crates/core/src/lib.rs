//! Audio-to-visual scene reconstruction through a quantized manifold.

pub mod atnet;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod image;
pub mod metrics;
pub mod train;
pub mod vq;

pub use error::{CoreError, Result};
