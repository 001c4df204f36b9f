//! patchlab: a desk-scale laboratory for patchification scaling in plain
//! vision encoders.

pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod harness;
pub mod mixers;
pub mod model;
pub mod train;
pub mod patchify;
pub mod tensor;

pub use error::{Error, Result};
