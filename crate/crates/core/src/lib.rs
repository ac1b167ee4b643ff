pub mod datasets;
pub mod encoders;
pub mod entity;
pub mod error;
pub mod hypernet;
pub mod metrics;
pub mod molgraph;
pub mod synergy;
pub mod tensor;

pub use error::{Error, Result};
