//! Two-branch convolutional classifier that fuses a panchromatic image and
//! a multispectral image at their native resolutions, together with the
//! data pipeline, training loop, random-forest baselines and metrics used
//! to evaluate it.

pub mod data;
pub mod error;
pub mod forest;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
