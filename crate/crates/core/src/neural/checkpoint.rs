//! JSON checkpoint container. Tensor data is stored as base64 of the
//! little-endian bytes, so reloading is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{Architecture, ModelBundle};
use super::params::{ParamRole, ParamSet};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FORMAT: &str = "shrdlurn-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub role: ParamRole,
    pub shape: [usize; 2],
    pub data: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub dtype: String,
    pub architecture: Architecture,
    pub vocabulary: Vocabulary,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &ModelBundle<T>) -> Self {
        let tensors = model
            .params()
            .iter()
            .map(|(_, p)| {
                let mut bytes = Vec::with_capacity(p.value.len() * T::BYTES);
                for &v in p.value.iter() {
                    v.write_le(&mut bytes);
                }
                let (r, c) = p.value.dim();
                TensorRecord {
                    name: p.name.clone(),
                    role: p.role,
                    shape: [r, c],
                    data: STANDARD.encode(bytes),
                }
            })
            .collect();
        Checkpoint {
            format: FORMAT.to_string(),
            dtype: T::DTYPE.to_string(),
            architecture: *model.architecture(),
            vocabulary: model.vocabulary().clone(),
            tensors,
        }
    }

    pub fn into_model<T: Scalar>(self) -> Result<ModelBundle<T>> {
        if self.format != FORMAT {
            return Err(Error::Format(format!(
                "unsupported checkpoint format '{}'",
                self.format
            )));
        }
        if self.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, requested {}",
                self.dtype,
                T::DTYPE
            )));
        }
        let mut vocab = self.vocabulary;
        vocab.reindex();
        let mut params = ParamSet::new();
        for t in self.tensors {
            let bytes = STANDARD
                .decode(&t.data)
                .map_err(|e| Error::Format(format!("tensor '{}': {e}", t.name)))?;
            let [r, c] = t.shape;
            if bytes.len() != r * c * T::BYTES {
                return Err(Error::Format(format!(
                    "tensor '{}' has {} bytes, expected {}",
                    t.name,
                    bytes.len(),
                    r * c * T::BYTES
                )));
            }
            let values: Vec<T> = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
            let value = Array2::from_shape_vec((r, c), values).expect("length checked");
            params.push(t.name, t.role, value);
        }
        ModelBundle::from_parts(self.architecture, vocab, params)
    }
}

pub fn save<T: Scalar>(model: &ModelBundle<T>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(file, &Checkpoint::from_model(model))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelBundle<T>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let ckpt: Checkpoint = serde_json::from_reader(file)?;
    ckpt.into_model()
}
