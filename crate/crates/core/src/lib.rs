//! Physics-based underwater image synthesis, a three-head restoration
//! network trained by bi-level meta-learning, and image quality metrics.

pub mod dataio;
pub mod error;
pub mod estimator;
pub mod image;
pub mod io;
pub mod metatrain;
pub mod metrics;
pub mod rng;
pub mod scene;
pub mod synthgen;
pub mod uwmodel;

pub use error::{Error, Result};
pub use estimator::{ArchConfig, ModelParams, Prediction, TrainExample};
pub use image::{clamp01, DepthMap, Field3, ImageRGB, ScalarField3};
pub use metatrain::loss::{LossTerms, LossWeights};
pub use metatrain::MetaConfig;
pub use rng::Rng;
pub use synthgen::{SynthParams, SynthSample, WaterType};
