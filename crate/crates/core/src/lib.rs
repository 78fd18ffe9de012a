//! Training and evaluation of compact intelligibility-prediction heads over
//! cached frame-level features from two frozen speech encoders running at
//! different frame rates.
//!
//! [`seqcore`] provides masked sequences and a small reverse-mode engine;
//! [`fusion`] and [`head`] assemble the model variants; [`model`] ties them
//! to a parameter store; [`training`], [`data`] and [`eval`] cover the
//! experimental protocol.

pub mod data;
pub mod eval;
pub mod error;
pub mod fusion;
pub mod head;
pub mod model;
pub mod seqcore;
pub mod training;

pub use error::{Error, ErrorClass, Result};
