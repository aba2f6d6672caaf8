pub mod coder;
pub mod config;
pub mod entropy;
pub mod error;
pub mod evaluation;
pub mod image_io;
pub mod layers;
pub mod model;
pub mod params;
pub mod scale;
pub mod synthetic;
pub mod training;
pub mod transforms;

pub use candle_core::{DType, Tensor};
pub use config::{ModelConfig, SwinStageConfig};
pub use error::{Error, Result};
pub use model::{AictModel, LAMBDAS};
