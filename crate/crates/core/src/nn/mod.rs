//! Small neural-network building blocks on top of candle.

pub mod conv;
pub mod layers;
pub mod params;

pub use conv::conv2d;
pub use layers::{pixel_shuffle, pixel_unshuffle, timestep_embedding, Conv2d, CrossAttention, ResBlock};
pub use params::ParamStore;
