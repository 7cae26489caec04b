//! Visual keyword spotting with a joint video–phoneme transformer.
//!
//! Given a keyword as a phoneme sequence and a clip as per-frame visual
//! feature vectors, the model predicts whether the keyword is spoken in the
//! clip and, frame by frame, where.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{GradientRecord, Scalar, Tensor};
pub mod data;
pub mod phonetics;
pub mod model;
pub mod training;
pub mod evaluation;
