//! Numerical core for unpaired translation between image and text embedding
//! spaces.
//!
//! Everything here is pure computation over `alloc` containers: a small
//! reverse-mode autodiff engine, the layers built on it, the image and text
//! autoencoders, the adversarial and MMD-based embedding mappers, evaluation
//! metrics, and the synthetic ColorShapes corpus renderer. File formats and the
//! command line live in the companion `xmodal` crate.
#![no_std]
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod colorshapes;
mod error;
pub mod eval;

pub use error::{Error, Result};
pub mod image_ae;
pub mod mapper;
pub mod nn;
pub mod optim;
pub mod text_ae;
