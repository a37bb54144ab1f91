//! Models, data, training and evaluation for dual-module ROI / extra-ROI
//! image classification.

pub mod backbone;
pub mod data;
pub mod model;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod perturb;
pub mod train;

pub use error::{Error, Result};
