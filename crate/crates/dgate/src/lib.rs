//! Experiment runners, file formats and the command-line front end for
//! gated group-sparse training built on `dgate-core`.

pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod fit;
pub mod gradcheck;
pub mod output;
pub mod parallel;

pub use error::{Error, Result};
