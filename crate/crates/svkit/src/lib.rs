//! File formats, pipeline orchestration and the command-line frontend
//! for the speaker verification toolkit. The numerics live in
//! `svkit-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod pipeline;
pub mod util;
pub mod wav;

pub use error::{Error, Result};
