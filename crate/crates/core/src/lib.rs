pub mod archive;
pub mod batch;
pub mod cli;
pub mod composition;
pub mod config;
pub mod datasets;
pub mod evaluation;
pub mod error;
pub mod losses;
pub mod networks;
pub mod selection;
pub mod trainer;

pub use batch::{ImageBatch, MaskBatch};
pub use error::{Error, Result};
