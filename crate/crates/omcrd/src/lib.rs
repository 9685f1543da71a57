//! File formats, reports and the command-line driver for OMCRD.
//!
//! The algorithms live in [`omcrd_core`]; this crate adds everything that
//! touches the file system.

mod bytes;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod embeddings;
pub mod error;
mod framed;
pub mod model_file;
pub mod report;
pub mod text;

pub use error::{Error, Result};
pub use omcrd_core as core;
