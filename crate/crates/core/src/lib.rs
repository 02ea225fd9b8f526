//! Unsupervised content/style disentangling autoencoder for speech-like
//! feature sequences.
//!
//! A VQ-bottleneck content encoder produces per-frame discrete codes, a
//! Gaussian style encoder produces one vector per utterance, and a decoder
//! conditioned on both reconstructs the input. An InfoNCE estimator between
//! the two latents is maximized by a scorer network while the autoencoder
//! minimizes it, with the adversarial gradient rescaled to never exceed the
//! reconstruction gradient.
//!
//! Everything runs on a small tape-based autodiff engine ([`autodiff`]) over
//! `f64` tensors.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod model;
pub mod optim;
pub mod par;
pub mod params;
pub mod seed;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, FormatError, Result};
pub use tensor::Tensor;
