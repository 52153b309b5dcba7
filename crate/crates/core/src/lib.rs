pub mod backbone;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod layerpack;
pub mod lora;
pub mod metrics;
pub mod synthdata;
pub mod tensor;
pub mod textcond;
pub mod trainer;

pub use error::{Error, Result};
