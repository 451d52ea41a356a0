//! P300 decoding with convolutional, temporal-convolutional, recurrent and
//! fuzzy neural networks.
//!
//! The crate covers the whole pipeline: a synthetic oddball-session
//! generator ([`sim`]), signal conditioning ([`dsp`]), a small reverse-mode
//! autodiff engine ([`autodiff`]), the layer library ([`layers`],
//! [`sequence`], [`fnb`]), the six network topologies ([`arch`]), training
//! ([`train`]) and evaluation/statistics ([`eval`]).

pub mod arch;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fnb;
pub mod layers;
pub mod sequence;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
