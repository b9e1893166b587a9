pub mod analysis;
pub mod cli;
pub mod config;
pub mod emitter;
pub mod forecast;
pub mod error;
pub mod harness;
pub mod protocol;
pub mod qmath;
pub mod quad;

pub use error::{Error, Result};
