//! Dataset and checkpoint formats, training pipelines and the `bmmae`
//! command-line tool built on `bmmae-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod images;
pub mod pipeline;

pub use error::{Error, Result};
