//! Configuration parsing and persistence.

mod binary;
mod config;

pub use binary::*;
pub use config::*;
