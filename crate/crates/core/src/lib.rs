//! Weakly supervised shadow removal with a spherical shared/private feature
//! space.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]), sphere geometry ([`sphere`]), a windowed-attention
//! encoder/decoder ([`model`]), the training losses ([`losses`]), data
//! plumbing ([`data`]), evaluation metrics ([`metrics`]) and the training and
//! evaluation drivers ([`train`], [`eval`]).

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod selftest;
pub mod sphere;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
