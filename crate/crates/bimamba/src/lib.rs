//! File formats, dataset manifests, experiment runs and the `bimamba`
//! command-line tool built on `bimamba-core`.

pub mod checkpoint;
pub mod cli;
pub mod edf;
pub mod error;
pub mod exec;
pub mod manifest;
pub mod runs;
pub mod tensor_io;

pub use error::{Error, Result};
