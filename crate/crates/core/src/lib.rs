//! Joint detection and localization of manipulations in identity-document images.
//!
//! A windowed-attention backbone feeds an image-level detection head and, through a feature
//! pyramid and a CBAM-gated decoder, a pixel-level segmentation head. The crate also carries
//! the training objective and loop, a synthetic document generator, metrics, and an
//! inference wrapper used by the HTTP service.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod losses;
pub mod model;
pub mod nn;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
pub use losses::{LossConfig, UncertaintyWeights};
pub use model::{FeaturePyramid, ModelConfig, ModelState, PredictionPair, Profile, TaskHead, TwoHeadSwinFpn};
pub use data::{Dataset, ImageSample, Label};
pub use inference::{Prediction, Predictor};
pub use training::{train, TrainConfig};
