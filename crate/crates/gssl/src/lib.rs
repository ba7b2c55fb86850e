//! File formats, run configuration and the command line around
//! [`gssl_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod run;
pub mod tensor_io;

pub use error::{IoError, Result};
