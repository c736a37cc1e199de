//! Gradient-descent updates.

use ndarray::{s, Array2, Zip};
use serde::{Deserialize, Serialize};

use super::params::{GradSet, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(crate::error::Error::InvalidConfig(format!(
                "unknown optimizer '{other}'"
            ))),
        }
    }
}

/// `theta <- theta - lr * g`.
pub fn step_sgd<T: Scalar>(params: &mut ParamSet<T>, grads: &GradSet<T>, lr: T) {
    for (id, g) in grads.iter() {
        params.get_mut(id).value.scaled_add(-lr, g);
    }
}

/// Adam with bias correction. Moment buffers are created lazily and grow
/// with embedding tables that gain rows.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    first: Vec<Option<Array2<T>>>,
    second: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Adam::with_betas(lr, T::lit(0.9), T::lit(0.999), T::lit(1e-8))
    }

    pub fn with_betas(lr: T, beta1: T, beta2: T, eps: T) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradSet<T>) {
        self.step += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.step);
        let c2 = one - self.beta2.powi(self.step);
        if self.first.len() < params.len() {
            self.first.resize(params.len(), None);
            self.second.resize(params.len(), None);
        }
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for (id, g) in grads.iter() {
            let i = id.index();
            let m = grow(&mut self.first[i], g.dim());
            Zip::from(&mut *m)
                .and(g)
                .for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
            let v = grow(&mut self.second[i], g.dim());
            Zip::from(&mut *v)
                .and(g)
                .for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
            let (m, v) = (self.first[i].as_ref().unwrap(), self.second[i].as_ref().unwrap());
            Zip::from(&mut params.get_mut(id).value)
                .and(m)
                .and(v)
                .for_each(|p, &m, &v| {
                    let update = lr * (m / c1) / ((v / c2).sqrt() + eps);
                    *p -= update;
                });
        }
    }
}

fn grow<T: Scalar>(slot: &mut Option<Array2<T>>, shape: (usize, usize)) -> &mut Array2<T> {
    match slot {
        Some(a) if a.dim() == shape => {}
        Some(a) => {
            let mut bigger = Array2::zeros(shape);
            let (r, c) = a.dim();
            bigger
                .slice_mut(s![..r.min(shape.0), ..c.min(shape.1)])
                .assign(&a.slice(s![..r.min(shape.0), ..c.min(shape.1)]));
            *a = bigger;
        }
        None => *slot = Some(Array2::zeros(shape)),
    }
    slot.as_mut().unwrap()
}

/// Either update rule behind one interface.
#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Sgd { lr: T },
    Adam(Adam<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr: T::lit(lr) },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(T::lit(lr))),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradSet<T>) {
        match self {
            Optimizer::Sgd { lr } => step_sgd(params, grads, *lr),
            Optimizer::Adam(adam) => adam.step(params, grads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::params::{ParamRole, TrainMask};
    use ndarray::array;

    fn single(theta: f64) -> (ParamSet<f64>, crate::neural::params::ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.push("theta", ParamRole::Encoder, array![[theta]]);
        (ps, id)
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let (mut ps, id) = single(0.37);
        let mut g = GradSet::new(1);
        g.accumulate(id, &array![[5.0]]);
        step_sgd(&mut ps, &g, 0.0);
        assert_eq!(ps.value(id)[[0, 0]], 0.37);
    }

    #[test]
    fn sgd_on_square() {
        // f = theta^2, grad 2 theta; from 1 with lr 0.1 -> 0.8.
        let (mut ps, id) = single(1.0);
        let mut g = GradSet::new(1);
        g.accumulate(id, &array![[2.0 * ps.value(id)[[0, 0]]]]);
        step_sgd(&mut ps, &g, 0.1);
        assert!((ps.value(id)[[0, 0]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_is_lr_regardless_of_scale() {
        // Holds while |g| >> eps.
        for scale in [1e-3, 1e-2, 1.0, 1e3, 1e6] {
            let (mut ps, id) = single(0.0);
            let mut g = GradSet::new(1);
            g.accumulate(id, &array![[scale]]);
            let mut adam = Adam::new(0.01);
            adam.step(&mut ps, &g);
            let moved = ps.value(id)[[0, 0]].abs();
            assert!((moved - 0.01).abs() < 1e-4 * 0.01 + 1e-9, "scale {scale}: {moved}");
        }
    }

    #[test]
    fn adam_handles_growing_tables() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.push("emb", ParamRole::WordEmbedding, array![[1.0, 1.0]]);
        let mut adam = Adam::new(0.1);
        let mut g = GradSet::new(1);
        g.accumulate(id, &array![[1.0, 1.0]]);
        adam.step(&mut ps, &g);
        ps.get_mut(id).value = array![[1.0, 1.0], [2.0, 2.0]];
        let mut g = GradSet::new(1);
        g.accumulate(id, &array![[0.0, 0.0], [1.0, -1.0]]);
        adam.step(&mut ps, &g);
        assert!(ps.value(id)[[1, 0]] < 2.0 && ps.value(id)[[1, 1]] > 2.0);
    }

    #[test]
    fn l2_gradient_is_two_lambda_theta() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.push("w", ParamRole::Encoder, array![[0.5, -2.0]]);
        let mask = TrainMask::all(&ps);
        let mut g = GradSet::new(1);
        let penalty = g.add_l2(&ps, &mask, 0.01);
        assert!((penalty - 0.01 * (0.25 + 4.0)).abs() < 1e-15);
        let grad = g.get(id).unwrap();
        assert!((grad[[0, 0]] - 2.0 * 0.01 * 0.5).abs() < 1e-15);
        assert!((grad[[0, 1]] - 2.0 * 0.01 * -2.0).abs() < 1e-15);
    }
}
