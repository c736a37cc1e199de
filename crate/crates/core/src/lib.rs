//! Neural instruction follower for the SHRDLURN blocks game.
//!
//! A sequence model is pre-trained offline on grammar-generated examples
//! ([`datagen`], [`offline`]) and then adapted online to a new speaker from a
//! stream of (utterance, start, target) examples ([`online`]).

pub mod blockworld;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod neural;
pub mod offline;
pub mod online;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision model used for training and serving.
pub type Model = neural::ModelBundle<f32>;
/// Double-precision model used for gradient checks.
pub type Model64 = neural::ModelBundle<f64>;
/// Online session over [`Model`].
pub type AdaptSession = online::AdaptSession<f32>;
