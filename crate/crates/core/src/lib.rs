//! Detection-guided dehazing: synthetic fog, a small trainable dehazer with
//! ROI attention, toy detectors, image and detection metrics, and an
//! evaluation harness.

pub mod dehaze;
pub mod detect;
pub mod error;
pub mod harness;
pub mod imaging;
pub mod metrics;
pub mod pipeline;
pub mod scatter;

pub use error::{Error, Result};
