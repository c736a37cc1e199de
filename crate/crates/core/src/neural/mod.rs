//! Differentiable building blocks and the encoder-decoder models.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod params;
pub mod tape;
pub mod vocab;

pub use model::{
    attend, pair_name, parse_pair_name, Architecture, DecoderKind, Dropout, EncodedExample, EncoderKind, Encoding,
    ModelBundle, Prediction,
};
pub use optim::{Adam, Optimizer, OptimizerKind};
pub use params::{GradSet, ParamId, ParamRole, ParamSet, TrainMask};
pub use tape::{Tape, Var};
pub use vocab::{state_ids, state_tokens, Vocabulary, STATE_VOCAB};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `u . v / (|u| |v|)`.
pub fn cosine<T: Scalar>(u: ndarray::ArrayView1<T>, v: ndarray::ArrayView1<T>) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::InvalidInput("cosine of vectors with different lengths".into()));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == T::zero() || nv == T::zero() {
        return Err(Error::InvalidInput("cosine of a zero vector".into()));
    }
    let c = u.dot(&v) / (nu * nv);
    Ok(c.max(-T::one()).min(T::one()))
}
