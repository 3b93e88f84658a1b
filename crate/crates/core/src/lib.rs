//! Training-free attention guidance for multi-subject text-to-video latent
//! diffusion: bounding-box spatial constraints and noun-verb contrastive
//! constraints on cross-attention maps, driven against a toy denoiser.

pub mod config;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod prior;
pub mod syntax;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
