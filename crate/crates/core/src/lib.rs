pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod label_filter;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod stats;
pub mod toy;
pub mod types;

pub use error::{Error, Result};
