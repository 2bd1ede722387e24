//! Audio captioning with an auxiliary sentence-embedding regression loss,
//! built on a small reverse-mode autodiff engine.

pub mod decoding;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod util;

pub use error::{Error, Result};
