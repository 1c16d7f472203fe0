pub mod error;
pub mod gan;
pub mod image_store;
pub mod memprof;
pub mod sampler;
pub mod tensor;
pub mod tiler;
pub mod trainer;

pub use error::{Error, Result};
