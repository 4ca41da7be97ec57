//! Prototypical-part image classification with two non-expert supervision
//! channels: lesion-mask penalties and user-validated prototype feedback.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod losses;
pub mod model;
pub mod optim;
pub mod projection;
pub mod render;
pub mod review;
pub mod trainer;

pub use error::{Error, Result};
