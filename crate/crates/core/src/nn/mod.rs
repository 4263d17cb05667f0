//! Minimal neural-network building blocks over candle tensors.

pub mod layers;
pub mod ops;
pub mod params;

pub use layers::{BatchNorm2d, Conv2d, LayerNorm, Linear};
pub use params::{Init, ParamBuilder, ParamStore};
