//! File formats, the fixture generator, the experiment pipeline and the CLI
//! on top of `bninvert-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod fixture;
pub mod formats;
pub mod pipeline;

pub use error::{Error, Result};
