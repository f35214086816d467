pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoders;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod model;
pub mod optim;
pub mod render;
pub mod sampler;
pub mod train;
pub mod verify;

pub use config::{EncoderConfig, ModelConfig, Task, TrainConfig};
pub use error::{Error, Result};
pub use sampler::{AffineParams, GlimpsePatch, SamplerGraph};
