//! Structured reordering over separable permutations.
//!
//! A bracketing transduction grammar assigns a distribution over binary
//! permutation trees of a sentence. This crate provides exact inference over
//! that distribution (marginal permutation matrices, MAP derivations,
//! ancestral and Gumbel sampling), reverse-mode gradients through the whole
//! pipeline, and a small reorder-then-tag model trained on an
//! infix-to-postfix arithmetic task.

pub mod btg;
pub mod error;
pub mod grad;
pub mod inference;
pub mod matrix;
pub mod model;
pub mod params;
pub mod perm;
mod rnn;
pub mod scoring;
pub mod tasks;

pub use error::{Error, Result};
pub use matrix::Matrix;
