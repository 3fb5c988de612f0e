//! Perception-aware foveated image reconstruction.

pub mod datasets;
pub mod error;
pub mod calibration;
pub mod features;
pub mod gan;
pub mod imaging;
pub mod nn;
pub mod pipeline;
pub mod sampling;
pub mod synthesis;
pub mod util;

pub use error::{Error, Result};
