//! Numerical core of a pyramid deformable-registration engine built around
//! multi-head neighborhood attention.
//!
//! Every operation here is a pure function over dense 3D grids. The crate is
//! `no_std` and only needs an allocator; file formats, timing and the command
//! line live in the companion `modereg` crate.
//!
//! The pipeline, coarse to fine:
//!
//! 1. [`encoder`] builds a five-level feature pyramid for both images with
//!    shared weights.
//! 2. At each level [`attention`] projects the features to queries and keys,
//!    runs neighborhood attention and turns the attention weights into one
//!    displacement subfield per head.
//! 3. [`reghead`] fuses the subfields with a single 3x3x3 convolution and can
//!    integrate the result as a stationary velocity field.
//! 4. [`field`] upsamples, warps and composes the per-level residuals into the
//!    total deformation.
//!
//! Training and pairwise optimization run through the reverse-mode [`tape`].

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod conv;
pub mod engine;
pub mod encoder;
mod error;
pub mod field;
pub mod gradcheck;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
mod real;
mod vecops;
pub mod reghead;
pub mod sample;
pub mod synth;
pub mod tape;

pub use error::{Error, Result};
pub use grid::{Dims, DisplacementField, FeatureMap, Volume};
pub use real::Real;
