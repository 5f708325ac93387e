//! RGB + thermal Siamese tracking with temporal aggregation and
//! decision-level fusion, plus a synthetic two-modality benchmark.

pub mod bench;
pub mod blocks;
pub mod config;
pub mod dfm;
pub mod error;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod siamese;
pub mod tensor;
pub mod tiam;
pub mod weights;

pub use error::{Error, Result};
