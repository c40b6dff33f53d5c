//! Long-form video-to-audio generation with a latent diffusion transformer.

pub mod config;
pub mod error;
pub mod eval;
pub mod inference;
pub mod nn;
pub mod cli;
pub mod conditioning;
pub mod dit;
pub mod sampler;
pub mod schedule;
pub mod synth;
pub mod training;
pub mod vae;
pub mod wav;

pub use error::{Error, Result};
