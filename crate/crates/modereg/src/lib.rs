//! File formats, the `modereg` command line and the attention benchmark on
//! top of `modereg-core`.

pub mod alloc_meter;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod nifti;
pub mod raw;

pub use error::{Error, Result};
