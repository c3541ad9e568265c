//! Masked-diffusion decoding laboratory.

pub mod analysis;
pub mod container;
pub mod decode;
pub mod error;
pub mod model;
pub mod numkit;
pub mod oracle;
pub mod prior;
pub mod rope;
pub mod trainer;

pub use error::{Error, Result};

// Chapters of the guide, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/rope.md")]
    mod rope {}
    #[doc = include_str!("../../../book/src/prior.md")]
    mod prior {}
    #[doc = include_str!("../../../book/src/decoding.md")]
    mod decoding {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
