//! Gaze-intent recognition for screen-magnifier users: session data,
//! a seeded session simulator, the dual-stream model, training, LOSO
//! evaluation and a streaming classifier.

pub mod dataio;
pub mod error;
pub mod eval;
pub mod model;
pub mod seed;
pub mod stream;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

