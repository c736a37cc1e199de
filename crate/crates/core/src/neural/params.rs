use ndarray::{s, Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the network a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    WordEmbedding,
    Encoder,
    Decoder,
}

impl ParamRole {
    pub fn is_encoder_side(self) -> bool {
        matches!(self, ParamRole::WordEmbedding | ParamRole::Encoder)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub value: Array2<T>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, role: ParamRole, value: Array2<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            role,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds a tensor filled from uniform(-scale, scale).
    pub fn push_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        role: ParamRole,
        shape: (usize, usize),
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let value = uniform(shape, scale, rng);
        self.push(name, role, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn uniform<T: Scalar, R: Rng>(shape: (usize, usize), scale: f64, rng: &mut R) -> Array2<T> {
    let lo = T::lit(-scale);
    let hi = T::lit(scale);
    Array2::from_shape_simple_fn(shape, || rng.gen_range(lo..hi))
}

/// Which tensors (and, for embedding tables, which rows) may change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainMask {
    trainable: Vec<bool>,
    first_row: Vec<usize>,
}

impl TrainMask {
    pub fn all<T: Scalar>(params: &ParamSet<T>) -> Self {
        TrainMask {
            trainable: vec![true; params.len()],
            first_row: vec![0; params.len()],
        }
    }

    pub fn none<T: Scalar>(params: &ParamSet<T>) -> Self {
        TrainMask {
            trainable: vec![false; params.len()],
            first_row: vec![0; params.len()],
        }
    }

    pub fn set(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Restricts a tensor's updates to rows `first..`.
    pub fn restrict_rows(&mut self, id: ParamId, first: usize) {
        self.first_row[id.0] = first;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn first_row(&self, id: ParamId) -> usize {
        self.first_row[id.0]
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub(crate) fn flags(&self) -> &[bool] {
        &self.trainable
    }

    /// Grows to cover tensors appended after the mask was built.
    pub fn extend_to(&mut self, len: usize, trainable: bool) {
        while self.trainable.len() < len {
            self.trainable.push(trainable);
            self.first_row.push(0);
        }
    }
}

/// Accumulated gradients, one optional buffer per parameter.
#[derive(Debug, Clone)]
pub struct GradSet<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> GradSet<T> {
    pub fn new(len: usize) -> Self {
        GradSet { grads: vec![None; len] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.grads[id.0].as_ref()
    }

    pub(crate) fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Array2<T> {
        self.grads[id.0].get_or_insert_with(|| Array2::zeros(shape))
    }

    pub fn accumulate(&mut self, id: ParamId, delta: &Array2<T>) {
        match &mut self.grads[id.0] {
            Some(g) => *g += delta,
            None => self.grads[id.0] = Some(delta.clone()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    /// Merges another gradient set into this one.
    pub fn add(&mut self, other: &GradSet<T>) {
        for (id, g) in other.iter() {
            self.accumulate(id, g);
        }
    }

    /// Drops gradients the mask does not allow and zeroes restricted rows.
    pub fn apply_mask(&mut self, mask: &TrainMask) {
        for (i, slot) in self.grads.iter_mut().enumerate() {
            let id = ParamId(i);
            if i >= mask.len() || !mask.is_trainable(id) {
                *slot = None;
                continue;
            }
            let first = mask.first_row(id);
            if let Some(g) = slot {
                if first > 0 {
                    let first = first.min(g.nrows());
                    g.slice_mut(s![..first, ..]).fill(T::zero());
                }
            }
        }
    }

    /// Adds `2 * weight * theta` for every masked-in entry and returns `weight * |theta|^2`.
    pub fn add_l2(&mut self, params: &ParamSet<T>, mask: &TrainMask, weight: T) -> T {
        if weight == T::zero() {
            return T::zero();
        }
        let two = T::lit(2.0);
        let mut penalty = T::zero();
        for (id, p) in params.iter() {
            if id.0 >= mask.len() || !mask.is_trainable(id) {
                continue;
            }
            let first = mask.first_row(id).min(p.value.nrows());
            let rows = p.value.slice(s![first.., ..]);
            penalty += rows.iter().fold(T::zero(), |acc, &v| acc + v * v) * weight;
            let g = self.slot(id, p.value.dim());
            Zip::from(g.slice_mut(s![first.., ..]))
                .and(&rows)
                .for_each(|g, &v| *g += two * weight * v);
        }
        penalty
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
