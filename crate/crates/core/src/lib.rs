//! Mixture-of-Experts routing with default vectors.
//!
//! Sparse Top-K routing gives the router a gradient only through the experts a
//! token was actually sent to. This crate keeps an exponential moving average
//! of every expert's output and substitutes it for the experts that did not
//! run, so the router sees a dense gradient while expert compute stays sparse.
//!
//! Layout:
//! - [`tensor`]: tensors and the reverse-mode autodiff graph.
//! - [`moe`]: router, Top-K selection, experts, the default-vector bank and
//!   the three routing modes.
//! - [`grad`]: finite-difference checking and router-gradient error analysis.
//! - [`train`]: a small character-level language model and its training loop.
//! - [`analysis`]: routing statistics (entropy, load, coactivation).

pub mod analysis;
pub mod grad;
pub mod moe;
pub mod params;
pub mod tensor;
pub mod train;
