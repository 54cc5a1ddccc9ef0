//! Core engine for superposing two toy transformer experts in one parameter
//! space: a deterministic reverse-mode autodiff tape, B-spline-blended weight
//! merging, per-layer autoencoders that reconstruct hidden states toward the
//! expert matching the input domain, the joint training loops, and the
//! evaluation metric suite (perplexity, JSD, neuron statistics, PCA).
//!
//! The crate is `no_std` + `alloc`; all IO, file formats and the CLI live in
//! the companion `sptx` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adam;
pub mod analysis;
pub mod autoencoder;
pub mod bspline;
pub mod checkpoint;
pub mod error;
pub mod losses;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

/// Which expert's domain an input belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Domain {
    Base,
    Fine,
}

impl Domain {
    pub fn other(self) -> Self {
        match self {
            Domain::Base => Domain::Fine,
            Domain::Fine => Domain::Base,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Base => "base",
            Domain::Fine => "fine",
        }
    }
}
