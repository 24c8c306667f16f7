pub mod config;
pub mod decomp;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod memory;
pub mod pca;
pub mod pfg;
pub mod pipeline;
pub mod registration;
pub mod rpca;
mod svd;
pub mod synth;

pub use error::{Error, Result};
