//! File formats, experiment pipeline and command-line front end for
//! `varinv-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod exec;
pub mod fstk;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use error::{AppError, Result};
