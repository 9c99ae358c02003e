//! Streaming cascaded-encoder transducer ASR with joint semi-supervised
//! training: text injection, synthetic-speech augmentation and masked
//! audio prediction, plus the evaluation metrics used to compare them.

pub mod config;
pub mod data;
pub mod decode;
pub mod encoders;
pub mod eval;
mod error;
pub mod frontends;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod seed;
pub mod selftest;
pub mod ssl;
pub mod trainer;
pub mod transducer;

pub use error::{Error, Result};
