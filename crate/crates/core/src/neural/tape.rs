//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamSet`] rather than copied; [`Tape::backward`] adds
//! the gradients of trainable parameters into a [`GradSet`].
//!
//! Sequences are laid out batch-major: row `b * len + t` holds step `t` of
//! batch element `b`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::{GradSet, ParamId, ParamSet, TrainMask};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Gather {
        param: ParamId,
        rows: Vec<usize>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Slice {
        src: Var,
        start: usize,
    },
    Shift {
        src: Var,
        len: usize,
        offset: isize,
    },
    Mask {
        src: Var,
        mask: Array2<T>,
    },
    StackSteps {
        steps: Vec<Var>,
    },
    BatchScores {
        q: Var,
        k: Var,
        batch: usize,
    },
    BatchMix {
        w: Var,
        v: Var,
        batch: usize,
    },
    SoftmaxRows(Var),
    GroupMean {
        src: Var,
        group: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<T>,
    },
}

struct Node<T> {
    value: Option<Array2<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    trainable: Option<&'p [bool]>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// Inference-only tape: nothing requires gradients.
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Tape {
            params,
            trainable: None,
            nodes: Vec::new(),
        }
    }

    /// Tape whose backward pass reaches the parameters selected by `mask`.
    pub fn with_grad(params: &'p ParamSet<T>, mask: &'p TrainMask) -> Self {
        Tape {
            params,
            trainable: Some(mask.flags()),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(value), _) => value.view(),
            (None, Op::Param(id)) => self.params.value(*id).view(),
            (None, _) => unreachable!("only parameter nodes are stored by reference"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[[0, 0]]
    }

    fn param_trainable(&self, id: ParamId) -> bool {
        self.trainable
            .map(|flags| flags.get(id.index()).copied().unwrap_or(false))
            .unwrap_or(false)
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Input, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.param_trainable(id);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Rows of a parameter table (embedding lookup).
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Var {
        let table = self.params.value(id);
        let value = table.select(Axis(0), rows);
        let needs_grad = self.param_trainable(id);
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Gather {
                param: id,
                rows: rows.to_vec(),
            },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.value(a) + &self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// `a + b` with the single row `b` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(b).nrows(), 1);
        let value = &self.value(a) + &self.value(b);
        self.push(value, Op::AddRow(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.value(a) * &self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).mapv(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.tanh());
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(T::zero()));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat rows must agree");
        self.push(value, Op::Concat(parts.to_vec()), parts)
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, src: Var, start: usize, width: usize) -> Var {
        let value = self.value(src).slice(s![.., start..start + width]).to_owned();
        self.push(value, Op::Slice { src, start }, &[src])
    }

    /// Within each length-`len` sequence, row `t` takes row `t + offset`;
    /// rows that fall off either end are zero.
    pub fn shift_rows(&mut self, src: Var, len: usize, offset: isize) -> Var {
        let input = self.value(src);
        let (rows, cols) = input.dim();
        debug_assert_eq!(rows % len, 0);
        let mut value = Array2::zeros((rows, cols));
        for r in 0..rows {
            let t = (r % len) as isize + offset;
            if t >= 0 && (t as usize) < len {
                let from = (r as isize + offset) as usize;
                value.row_mut(r).assign(&input.row(from));
            }
        }
        self.push(value, Op::Shift { src, len, offset }, &[src])
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, src: Var, mask: Array2<T>) -> Var {
        let value = &self.value(src) * &mask;
        self.push(value, Op::Mask { src, mask }, &[src])
    }

    /// Interleaves per-step `[batch x d]` blocks into a batch-major sequence.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Var {
        let len = steps.len();
        let (batch, cols) = self.shape(steps[0]);
        let mut value = Array2::zeros((batch * len, cols));
        for (t, &step) in steps.iter().enumerate() {
            let block = self.value(step);
            for b in 0..batch {
                value.row_mut(b * len + t).assign(&block.row(b));
            }
        }
        self.push(value, Op::StackSteps { steps: steps.to_vec() }, steps)
    }

    /// Per batch element, `q_b * k_b^T`: `[batch*n x d] x [batch*m x d] -> [batch*n x m]`.
    pub fn batch_scores(&mut self, q: Var, k: Var, batch: usize) -> Var {
        let (qv, kv) = (self.value(q), self.value(k));
        let n = qv.nrows() / batch;
        let m = kv.nrows() / batch;
        let mut value = Array2::zeros((batch * n, m));
        for b in 0..batch {
            let qb = qv.slice(s![b * n..(b + 1) * n, ..]);
            let kb = kv.slice(s![b * m..(b + 1) * m, ..]);
            let mut out = value.slice_mut(s![b * n..(b + 1) * n, ..]);
            general_mat_mul(T::one(), &qb, &kb.t(), T::zero(), &mut out);
        }
        self.push(value, Op::BatchScores { q, k, batch }, &[q, k])
    }

    /// Per batch element, `w_b * v_b`: `[batch*n x m] x [batch*m x d] -> [batch*n x d]`.
    pub fn batch_mix(&mut self, w: Var, v: Var, batch: usize) -> Var {
        let (wv, vv) = (self.value(w), self.value(v));
        let n = wv.nrows() / batch;
        let m = vv.nrows() / batch;
        let d = vv.ncols();
        let mut value = Array2::zeros((batch * n, d));
        for b in 0..batch {
            let wb = wv.slice(s![b * n..(b + 1) * n, ..]);
            let vb = vv.slice(s![b * m..(b + 1) * m, ..]);
            let mut out = value.slice_mut(s![b * n..(b + 1) * n, ..]);
            general_mat_mul(T::one(), &wb, &vb, T::zero(), &mut out);
        }
        self.push(value, Op::BatchMix { w, v, batch }, &[w, v])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Mean of each consecutive group of `group` rows.
    pub fn group_mean(&mut self, src: Var, group: usize) -> Var {
        let input = self.value(src);
        let (rows, cols) = input.dim();
        let inv = T::one() / T::from_usize(group).unwrap();
        let mut value = Array2::zeros((rows / group, cols));
        for (i, mut out) in value.rows_mut().into_iter().enumerate() {
            for r in i * group..(i + 1) * group {
                out += &input.row(r);
            }
            out.mapv_inplace(|x| x * inv);
        }
        self.push(value, Op::GroupMean { src, group }, &[src])
    }

    /// Mean over rows of `-log softmax(logits)[target]`, as a 1x1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let probs = softmax_rows(self.value(logits));
        debug_assert_eq!(probs.nrows(), targets.len());
        let tiny = T::min_positive_value();
        let total = targets
            .iter()
            .enumerate()
            .fold(T::zero(), |acc, (r, &t)| acc - probs[[r, t]].max(tiny).ln());
        let mean = total / T::from_usize(targets.len()).unwrap();
        self.push(
            Array2::from_elem((1, 1), mean),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Propagates from the 1x1 node `root` and accumulates parameter gradients.
    pub fn backward(&self, root: Var, grads: &mut GradSet<T>) {
        let mut adj: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Array2::from_elem(self.shape(root), T::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::Gather { param, rows } => {
                    let shape = self.params.value(*param).dim();
                    let slot = grads.slot(*param, shape);
                    for (r, &row) in rows.iter().enumerate() {
                        let mut dst = slot.row_mut(row);
                        dst += &g.row(r);
                    }
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let bv = self.value(*b);
                        self.acc_product(&mut adj, *a, g.view(), bv.t());
                    }
                    if self.needs(*b) {
                        let av = self.value(*a);
                        self.acc_product(&mut adj, *b, av.t(), g.view());
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut adj, *a, g.view());
                    self.acc(&mut adj, *b, g.view());
                }
                Op::AddRow(a, b) => {
                    if self.needs(*b) {
                        let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut adj, *b, summed.view());
                    }
                    self.acc_owned(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let d = &g * &self.value(*b);
                        self.acc_owned(&mut adj, *a, d);
                    }
                    if self.needs(*b) {
                        let d = &g * &self.value(*a);
                        self.acc_owned(&mut adj, *b, d);
                    }
                }
                Op::Scale(a, factor) => {
                    let f = *factor;
                    self.acc_owned(&mut adj, *a, g.mapv(|x| x * f));
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(node.value.as_ref().unwrap())
                        .for_each(|d, &y| *d = *d * y * (T::one() - y));
                    self.acc_owned(&mut adj, *a, d);
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(node.value.as_ref().unwrap())
                        .for_each(|d, &y| *d *= T::one() - y * y);
                    self.acc_owned(&mut adj, *a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    Zip::from(&mut d).and(node.value.as_ref().unwrap()).for_each(|d, &y| {
                        if y <= T::zero() {
                            *d = T::zero();
                        }
                    });
                    self.acc_owned(&mut adj, *a, d);
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let width = self.shape(p).1;
                        if self.needs(p) {
                            self.acc(&mut adj, p, g.slice(s![.., col..col + width]));
                        }
                        col += width;
                    }
                }
                Op::Slice { src, start } => {
                    let shape = self.shape(*src);
                    let width = g.ncols();
                    let slot = adj[src.0].get_or_insert_with(|| Array2::zeros(shape));
                    let mut dst = slot.slice_mut(s![.., *start..*start + width]);
                    dst += &g;
                }
                Op::Shift { src, len, offset } => {
                    let shape = self.shape(*src);
                    let slot = adj[src.0].get_or_insert_with(|| Array2::zeros(shape));
                    for r in 0..g.nrows() {
                        let t = (r % len) as isize + offset;
                        if t >= 0 && (t as usize) < *len {
                            let to = (r as isize + offset) as usize;
                            let mut dst = slot.row_mut(to);
                            dst += &g.row(r);
                        }
                    }
                }
                Op::Mask { src, mask } => {
                    self.acc_owned(&mut adj, *src, &g * mask);
                }
                Op::StackSteps { steps } => {
                    let len = steps.len();
                    for (t, &step) in steps.iter().enumerate() {
                        if !self.needs(step) {
                            continue;
                        }
                        let block = g.slice(s![t..;len, ..]);
                        self.acc(&mut adj, step, block);
                    }
                }
                Op::BatchScores { q, k, batch } => {
                    let (qv, kv) = (self.value(*q), self.value(*k));
                    let n = qv.nrows() / batch;
                    let m = kv.nrows() / batch;
                    if self.needs(*q) {
                        let slot = adj[q.0].get_or_insert_with(|| Array2::zeros(qv.dim()));
                        for b in 0..*batch {
                            let gb = g.slice(s![b * n..(b + 1) * n, ..]);
                            let kb = kv.slice(s![b * m..(b + 1) * m, ..]);
                            let mut dst = slot.slice_mut(s![b * n..(b + 1) * n, ..]);
                            general_mat_mul(T::one(), &gb, &kb, T::one(), &mut dst);
                        }
                    }
                    if self.needs(*k) {
                        let slot = adj[k.0].get_or_insert_with(|| Array2::zeros(kv.dim()));
                        for b in 0..*batch {
                            let gb = g.slice(s![b * n..(b + 1) * n, ..]);
                            let qb = qv.slice(s![b * n..(b + 1) * n, ..]);
                            let mut dst = slot.slice_mut(s![b * m..(b + 1) * m, ..]);
                            general_mat_mul(T::one(), &gb.t(), &qb, T::one(), &mut dst);
                        }
                    }
                }
                Op::BatchMix { w, v, batch } => {
                    let (wv, vv) = (self.value(*w), self.value(*v));
                    let n = wv.nrows() / batch;
                    let m = vv.nrows() / batch;
                    if self.needs(*w) {
                        let slot = adj[w.0].get_or_insert_with(|| Array2::zeros(wv.dim()));
                        for b in 0..*batch {
                            let gb = g.slice(s![b * n..(b + 1) * n, ..]);
                            let vb = vv.slice(s![b * m..(b + 1) * m, ..]);
                            let mut dst = slot.slice_mut(s![b * n..(b + 1) * n, ..]);
                            general_mat_mul(T::one(), &gb, &vb.t(), T::one(), &mut dst);
                        }
                    }
                    if self.needs(*v) {
                        let slot = adj[v.0].get_or_insert_with(|| Array2::zeros(vv.dim()));
                        for b in 0..*batch {
                            let gb = g.slice(s![b * n..(b + 1) * n, ..]);
                            let wb = wv.slice(s![b * n..(b + 1) * n, ..]);
                            let mut dst = slot.slice_mut(s![b * m..(b + 1) * m, ..]);
                            general_mat_mul(T::one(), &wb.t(), &gb, T::one(), &mut dst);
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let mut d = g;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let dot = drow
                            .iter()
                            .zip(yrow.iter())
                            .fold(T::zero(), |acc, (&gi, &yi)| acc + gi * yi);
                        Zip::from(&mut drow)
                            .and(&yrow)
                            .for_each(|gi, &yi| *gi = yi * (*gi - dot));
                    }
                    self.acc_owned(&mut adj, *a, d);
                }
                Op::GroupMean { src, group } => {
                    let shape = self.shape(*src);
                    let inv = T::one() / T::from_usize(*group).unwrap();
                    let slot = adj[src.0].get_or_insert_with(|| Array2::zeros(shape));
                    for r in 0..shape.0 {
                        let mut dst = slot.row_mut(r);
                        dst.scaled_add(inv, &g.row(r / group));
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g[[0, 0]] / T::from_usize(targets.len()).unwrap();
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        d[[r, t]] -= T::one();
                    }
                    d.mapv_inplace(|x| x * scale);
                    self.acc_owned(&mut adj, *logits, d);
                }
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, adj: &mut [Option<Array2<T>>], v: Var, delta: ArrayView2<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta.to_owned()),
        }
    }

    fn acc_owned(&self, adj: &mut [Option<Array2<T>>], v: Var, delta: Array2<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn acc_product(&self, adj: &mut [Option<Array2<T>>], v: Var, lhs: ArrayView2<T>, rhs: ArrayView2<T>) {
        match &mut adj[v.0] {
            Some(g) => general_mat_mul(T::one(), &lhs, &rhs, T::one(), g),
            slot => *slot = Some(lhs.dot(&rhs)),
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax_rows<T: Scalar>(x: ArrayView2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::params::ParamRole;
    use ndarray::array;

    /// Central differences of `f` with respect to every entry of parameter `id`.
    fn numeric_grad(params: &mut ParamSet<f64>, id: ParamId, f: &dyn Fn(&ParamSet<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let shape = params.value(id).dim();
        let mut out = Array2::zeros(shape);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = params.value(id)[[r, c]];
                params.get_mut(id).value[[r, c]] = orig + h;
                let up = f(params);
                params.get_mut(id).value[[r, c]] = orig - h;
                let down = f(params);
                params.get_mut(id).value[[r, c]] = orig;
                out[[r, c]] = (up - down) / (2.0 * h);
            }
        }
        out
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>) {
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            assert!((x - y).abs() / denom < 1e-5 || (x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut params = ParamSet::<f64>::new();
        let a = params.push(
            "a",
            ParamRole::Encoder,
            array![[0.3, -0.2], [0.1, 0.5], [-0.4, 0.2], [0.7, -0.1]],
        );
        let b = params.push("b", ParamRole::Encoder, array![[0.2, -0.6, 0.3], [0.4, 0.1, -0.2]]);
        let row = params.push("row", ParamRole::Decoder, array![[0.05, -0.1, 0.2]]);
        let emb = params.push(
            "emb",
            ParamRole::WordEmbedding,
            array![[0.1, 0.2], [-0.3, 0.4], [0.5, -0.6]],
        );

        let f = |ps: &ParamSet<f64>, grads: Option<&mut GradSet<f64>>| -> f64 {
            let mask = TrainMask::all(ps);
            let mut t = Tape::with_grad(ps, &mask);
            let av = t.param(a);
            let bv = t.param(b);
            let rv = t.param(row);
            let x = t.matmul(av, bv); // 4x3
            let x = t.add_row(x, rv);
            let s1 = t.sigmoid(x);
            let t1 = t.tanh(x);
            let m = t.mul(s1, t1);
            let r = t.relu(x);
            let sum = t.add(m, r);
            let sh = t.shift_rows(sum, 2, 1);
            let sh2 = t.shift_rows(sum, 2, -1);
            let cat = t.concat(&[sh, sh2, sum]); // 4x9
            let sl = t.slice_cols(cat, 2, 4); // 4x4
            let sc = t.scale(sl, 0.7);
            let masked = t.mask(sc, Array2::from_shape_fn((4, 4), |(i, j)| ((i + j) % 3) as f64));
            let e = t.gather(emb, &[2, 0, 2, 1]); // 4x2
            let keys = t.group_mean(e, 2); // 2x2
            let q = t.slice_cols(masked, 0, 2); // 4x2, batch 2 x n 2
            let scores = t.batch_scores(q, e, 2); // 4x2
            let w = t.softmax_rows(scores);
            let mixed = t.batch_mix(w, e, 2); // 4x2
            let steps = t.stack_steps(&[keys, keys]); // 4x2
            let total = t.add(mixed, steps);
            let logits = t.concat(&[total, masked]);
            let loss = t.cross_entropy(logits, &[0, 3, 5, 1]);
            if let Some(g) = grads {
                t.backward(loss, g);
            }
            t.scalar(loss)
        };

        let mut grads = GradSet::new(params.len());
        f(&params, Some(&mut grads));
        for id in [a, b, row, emb] {
            let numeric = numeric_grad(&mut params, id, &|ps| f(ps, None));
            assert_close(grads.get(id).unwrap(), &numeric);
        }
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut params = ParamSet::<f64>::new();
        let a = params.push("a", ParamRole::Encoder, array![[1.0, 2.0]]);
        let b = params.push("b", ParamRole::Decoder, array![[0.5], [0.25]]);
        let mut mask = TrainMask::all(&params);
        mask.set(a, false);
        let mut t = Tape::with_grad(&params, &mask);
        let av = t.param(a);
        let bv = t.param(b);
        let y = t.matmul(av, bv);
        let loss = t.cross_entropy(y, &[0]);
        let mut grads = GradSet::new(params.len());
        t.backward(loss, &mut grads);
        assert!(grads.get(a).is_none());
        assert!(grads.get(b).is_some());
    }

    #[test]
    fn softmax_is_normalized_and_stable() {
        let x = array![[1000.0f32, 1001.0, 999.0], [-5.0, 0.0, 5.0]];
        let p = softmax_rows(x.view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}
