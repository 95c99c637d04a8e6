//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records primitive applications during the forward pass; calling
//! [`Tape::backward`] walks the recording in reverse and accumulates
//! adjoints. Sparse operator application is a first-class primitive so graph
//! propagation stays sparse in both directions.
//!
//! Scalars are 1x1 matrices. Broadcasting is deliberately limited to the two
//! cases the model needs: multiplying a matrix by a 1x1 scalar node and by an
//! n x 1 column node.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::graph::NormalizedOperator;
use crate::matrix::Matrix;
use crate::{Error, Result};

/// Optimizer grouping for a parameter: filter coefficients get their own
/// learning rate and weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamTag {
    FilterCoeff,
    NetworkWeight,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub tag: ParamTag,
}

/// Owns every trainable parameter of a model, in registration order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, tag: ParamTag) -> usize {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            tag,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Matrix::zeros(p.value.rows(), p.value.cols());
        }
    }

    pub fn values_snapshot(&self) -> Vec<Matrix> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Matrix]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = v.clone();
        }
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    MatMul(VarId, VarId),
    SparseApply(NormalizedOperator, VarId),
    Add(VarId, VarId),
    /// Adds a 1 x c bias row to every row of an n x c matrix.
    AddRowBroadcast(VarId, VarId),
    Scale(VarId, f64),
    Relu(VarId),
    Abs(VarId),
    RowSoftmax(VarId),
    /// Softmax over the k largest logits per row; other entries stay zero and
    /// receive no gradient (hard selection). Survivor indices are recorded at
    /// forward time.
    RowTopkSoftmax(VarId, Vec<Vec<usize>>),
    /// Mean cross-entropy of row-softmaxed logits over the masked rows.
    CrossEntropy {
        logits: VarId,
        labels: Arc<Vec<usize>>,
        mask: Arc<Vec<usize>>,
    },
    ElementwiseMul(VarId, VarId),
    ReduceSum(VarId),
    ConcatColumns(Vec<VarId>),
    Row(VarId, usize),
    Col(VarId, usize),
}

struct TapeNode {
    op: Op,
    value: Matrix,
}

/// One forward recording. Build leaves with [`Tape::constant`] /
/// [`Tape::param`], compose primitives, then call [`Tape::backward`] once.
pub struct Tape {
    nodes: Vec<TapeNode>,
    adjoints: Vec<Option<Matrix>>,
    param_leaves: Vec<(usize, VarId)>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            adjoints: Vec::new(),
            param_leaves: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, op: Op, value: Matrix) -> VarId {
        self.nodes.push(TapeNode { op, value });
        self.adjoints.push(None);
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Adjoint of a node after backward; zero-filled if the node did not
    /// influence the loss.
    pub fn adjoint(&self, id: VarId) -> Matrix {
        let v = &self.nodes[id.0].value;
        self.adjoints[id.0]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(v.rows(), v.cols()))
    }

    pub fn scalar_value(&self, id: VarId) -> f64 {
        self.nodes[id.0].value.get(0, 0)
    }

    pub fn constant(&mut self, value: Matrix) -> VarId {
        self.push(Op::Leaf, value)
    }

    /// Leaf bound to a parameter slot; its adjoint flows back into the
    /// store's grad on [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, idx: usize) -> VarId {
        let id = self.push(Op::Leaf, store.get(idx).value.clone());
        self.param_leaves.push((idx, id));
        id
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn sparse_apply(&mut self, op: &NormalizedOperator, x: VarId) -> Result<VarId> {
        let value = op.apply(self.value(x))?;
        Ok(self.push(Op::SparseApply(op.clone(), x), value))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn add_row_broadcast(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (m, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != m.cols() {
            return Err(Error::shape(format!(
                "bias must be 1x{}, got {}x{}",
                m.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let mut value = m.clone();
        for i in 0..value.rows() {
            for (v, &bj) in value.row_mut(i).iter_mut().zip(b.row(0)) {
                *v += bj;
            }
        }
        Ok(self.push(Op::AddRowBroadcast(a, bias), value))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        let value = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), value)
    }

    pub fn row_softmax(&mut self, a: VarId) -> Result<VarId> {
        let m = self.value(a);
        if m.cols() == 0 {
            return Err(Error::invalid("softmax over an empty row"));
        }
        let mut value = m.clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        Ok(self.push(Op::RowSoftmax(a), value))
    }

    pub fn row_topk_softmax(&mut self, a: VarId, k: usize) -> Result<VarId> {
        let m = self.value(a);
        if m.cols() == 0 {
            return Err(Error::invalid("softmax over an empty row"));
        }
        if k == 0 || k > m.cols() {
            return Err(Error::invalid(format!(
                "top-k needs 1 <= k <= {}, got {k}",
                m.cols()
            )));
        }
        let mut value = Matrix::zeros(m.rows(), m.cols());
        let mut selected = Vec::with_capacity(m.rows());
        for i in 0..m.rows() {
            let row = m.row(i);
            // Largest logits first; index order breaks exact ties.
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&x, &y| {
                row[y]
                    .partial_cmp(&row[x])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(x.cmp(&y))
            });
            let mut chosen: Vec<usize> = order[..k].to_vec();
            chosen.sort_unstable();
            let max = chosen.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &j in &chosen {
                denom += (row[j] - max).exp();
            }
            for &j in &chosen {
                value.set(i, j, (row[j] - max).exp() / denom);
            }
            selected.push(chosen);
        }
        Ok(self.push(Op::RowTopkSoftmax(a, selected), value))
    }

    /// Mean cross-entropy over the masked rows of an n x c logit matrix.
    pub fn cross_entropy_masked(
        &mut self,
        logits: VarId,
        labels: Arc<Vec<usize>>,
        mask: Arc<Vec<usize>>,
    ) -> Result<VarId> {
        let m = self.value(logits);
        if m.cols() == 0 {
            return Err(Error::invalid("softmax over an empty row"));
        }
        if labels.len() != m.rows() {
            return Err(Error::shape(format!(
                "{} labels for {} rows",
                labels.len(),
                m.rows()
            )));
        }
        if mask.is_empty() {
            return Err(Error::invalid("cross-entropy over an empty mask"));
        }
        let mut acc = 0.0;
        for &i in mask.iter() {
            if i >= m.rows() {
                return Err(Error::invalid(format!("mask index {i} out of range")));
            }
            let y = labels[i];
            if y >= m.cols() {
                return Err(Error::invalid(format!("label {y} out of range")));
            }
            let row = m.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            acc += lse - row[y];
        }
        let value = Matrix::scalar(acc / mask.len() as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels,
                mask,
            },
            value,
        ))
    }

    /// Hadamard product; one operand may be a 1x1 scalar or an n x 1 column
    /// that broadcasts across the other.
    pub fn elementwise_mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ma, mb) = (self.value(a), self.value(b));
        let value = broadcast_mul(ma, mb)?;
        Ok(self.push(Op::ElementwiseMul(a, b), value))
    }

    pub fn reduce_sum(&mut self, a: VarId) -> VarId {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(Op::ReduceSum(a), value)
    }

    pub fn concat_columns(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero blocks"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::shape("concat blocks disagree on row count"));
            }
            cols += self.value(p).cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            for i in 0..rows {
                let src = m.row(i);
                let dst = &mut value.row_mut(i)[offset..offset + src.len()];
                dst.copy_from_slice(src);
            }
            offset += m.cols();
        }
        let ids = parts.to_vec();
        Ok(self.push(Op::ConcatColumns(ids), value))
    }

    pub fn row(&mut self, a: VarId, i: usize) -> Result<VarId> {
        let m = self.value(a);
        if i >= m.rows() {
            return Err(Error::invalid(format!("row {i} out of range")));
        }
        let value = Matrix::from_vec(1, m.cols(), m.row(i).to_vec())?;
        Ok(self.push(Op::Row(a, i), value))
    }

    pub fn col(&mut self, a: VarId, j: usize) -> Result<VarId> {
        let m = self.value(a);
        if j >= m.cols() {
            return Err(Error::invalid(format!("column {j} out of range")));
        }
        let mut value = Matrix::zeros(m.rows(), 1);
        for i in 0..m.rows() {
            value.set(i, 0, m.get(i, j));
        }
        Ok(self.push(Op::Col(a, j), value))
    }

    /// Reverse sweep from a scalar loss node. May be called once per tape.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid(
                "backward called twice on the same tape without reset",
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid("backward needs a scalar loss node"));
        }
        self.backward_done = true;
        self.adjoints[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let dy = match &self.adjoints[idx] {
                Some(m) => m.clone(),
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = dy.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&dy)?;
                    let (a, b) = (*a, *b);
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::SparseApply(op, x) => {
                    let dx = op.apply_transpose(&dy)?;
                    let x = *x;
                    self.accumulate(x, dx);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(a, dy.clone());
                    self.accumulate(b, dy);
                }
                Op::AddRowBroadcast(a, bias) => {
                    let (a, bias) = (*a, *bias);
                    let dbias = dy.col_sums();
                    self.accumulate(a, dy);
                    self.accumulate(bias, dbias);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    self.accumulate(a, dy.scale(c));
                }
                Op::Relu(a) => {
                    let a = *a;
                    let x = self.value(a);
                    let mut dx = dy;
                    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                        if v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    self.accumulate(a, dx);
                }
                Op::Abs(a) => {
                    // Subgradient at 0 is 0.
                    let a = *a;
                    let x = self.value(a);
                    let mut dx = dy;
                    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                        *g *= if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                    self.accumulate(a, dx);
                }
                Op::RowSoftmax(a) => {
                    let a = *a;
                    let y = &self.nodes[idx].value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yrow = y.row(i);
                        let grow = dy.row(i);
                        let dot: f64 = yrow.iter().zip(grow).map(|(&p, &g)| p * g).sum();
                        for (o, (&p, &g)) in dx.row_mut(i).iter_mut().zip(yrow.iter().zip(grow)) {
                            *o = p * (g - dot);
                        }
                    }
                    self.accumulate(a, dx);
                }
                Op::RowTopkSoftmax(a, selected) => {
                    let a = *a;
                    let y = &self.nodes[idx].value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for (i, chosen) in selected.iter().enumerate() {
                        let mut dot = 0.0;
                        for &j in chosen {
                            dot += y.get(i, j) * dy.get(i, j);
                        }
                        for &j in chosen {
                            dx.set(i, j, y.get(i, j) * (dy.get(i, j) - dot));
                        }
                    }
                    self.accumulate(a, dx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    mask,
                } => {
                    let logits = *logits;
                    let g = dy.get(0, 0) / mask.len() as f64;
                    let z = self.value(logits);
                    let mut dx = Matrix::zeros(z.rows(), z.cols());
                    for &i in mask.iter() {
                        let row = z.row(i);
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            let p = (z.get(i, j) - max).exp() / denom;
                            let target = if labels[i] == j { 1.0 } else { 0.0 };
                            *o = g * (p - target);
                        }
                    }
                    self.accumulate(logits, dx);
                }
                Op::ElementwiseMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (da, db) = broadcast_mul_backward(self.value(a), self.value(b), &dy)?;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::ReduceSum(a) => {
                    let a = *a;
                    let x = self.value(a);
                    let g = dy.get(0, 0);
                    let dx = Matrix::zeros(x.rows(), x.cols()).map(|_| g);
                    self.accumulate(a, dx);
                }
                Op::ConcatColumns(parts) => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let m = self.value(p);
                        let (rows, cols) = (m.rows(), m.cols());
                        let mut dp = Matrix::zeros(rows, cols);
                        for i in 0..rows {
                            let src = &dy.row(i)[offset..offset + cols];
                            dp.row_mut(i).copy_from_slice(src);
                        }
                        offset += cols;
                        self.accumulate(p, dp);
                    }
                }
                Op::Row(a, i) => {
                    let (a, i) = (*a, *i);
                    let x = self.value(a);
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    dx.row_mut(i).copy_from_slice(dy.row(0));
                    self.accumulate(a, dx);
                }
                Op::Col(a, j) => {
                    let (a, j) = (*a, *j);
                    let x = self.value(a);
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        dx.set(i, j, dy.get(i, 0));
                    }
                    self.accumulate(a, dx);
                }
            }
        }
        Ok(())
    }

    /// Add the adjoints of every bound parameter leaf into the store's grads.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(idx, id) in &self.param_leaves {
            let adj = self.adjoint(id);
            store.get_mut(idx).grad.add_assign(&adj);
        }
    }

    fn accumulate(&mut self, id: VarId, delta: Matrix) {
        match &mut self.adjoints[id.0] {
            Some(m) => m.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn broadcast_mul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.same_shape(b) {
        let mut out = a.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
            *o *= v;
        }
        return Ok(out);
    }
    if b.is_scalar() {
        return Ok(a.scale(b.get(0, 0)));
    }
    if a.is_scalar() {
        return Ok(b.scale(a.get(0, 0)));
    }
    if b.cols() == 1 && b.rows() == a.rows() {
        let mut out = a.clone();
        for i in 0..a.rows() {
            let w = b.get(i, 0);
            for o in out.row_mut(i) {
                *o *= w;
            }
        }
        return Ok(out);
    }
    if a.cols() == 1 && a.rows() == b.rows() {
        return broadcast_mul(b, a);
    }
    Err(Error::shape(format!(
        "elementwise_mul: {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    )))
}

fn broadcast_mul_backward(a: &Matrix, b: &Matrix, dy: &Matrix) -> Result<(Matrix, Matrix)> {
    if a.same_shape(b) {
        return Ok((broadcast_mul(dy, b)?, broadcast_mul(dy, a)?));
    }
    if b.is_scalar() {
        let da = dy.scale(b.get(0, 0));
        let db = Matrix::scalar(broadcast_mul(dy, a)?.sum());
        return Ok((da, db));
    }
    if a.is_scalar() {
        let (db, da) = broadcast_mul_backward(b, a, dy)?;
        return Ok((da, db));
    }
    if b.cols() == 1 && b.rows() == a.rows() {
        let da = broadcast_mul(dy, b)?;
        let mut db = Matrix::zeros(b.rows(), 1);
        for i in 0..a.rows() {
            let mut acc = 0.0;
            for (&x, &g) in a.row(i).iter().zip(dy.row(i)) {
                acc += x * g;
            }
            db.set(i, 0, acc);
        }
        return Ok((da, db));
    }
    if a.cols() == 1 && a.rows() == b.rows() {
        let (db, da) = broadcast_mul_backward(b, a, dy)?;
        return Ok((da, db));
    }
    unreachable!("forward would have rejected these shapes")
}

/// Central finite differences of a scalar loss with respect to every entry of
/// every parameter. The loss closure must be a pure function of the store.
pub fn finite_difference_grads<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    step: f64,
) -> Result<Vec<Matrix>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut grads = Vec::with_capacity(store.len());
    for idx in 0..store.len() {
        let (rows, cols) = {
            let v = &store.get(idx).value;
            (v.rows(), v.cols())
        };
        let mut g = Matrix::zeros(rows, cols);
        for entry in 0..rows * cols {
            let original = store.get(idx).value.data()[entry];
            store.get_mut(idx).value.data_mut()[entry] = original + step;
            let up = loss_fn(store)?;
            store.get_mut(idx).value.data_mut()[entry] = original - step;
            let down = loss_fn(store)?;
            store.get_mut(idx).value.data_mut()[entry] = original;
            g.data_mut()[entry] = (up - down) / (2.0 * step);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Worst relative error between analytic and numeric gradients. The
/// denominator is floored at 1e-3 so entries that are genuinely (near) zero
/// on both sides do not blow up on finite-difference noise.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Graph, OperatorKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = rng.random::<f64>() * 2.0 - 1.0;
        }
        m
    }

    #[test]
    fn relu_subgradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::from_vec(1, 2, vec![-1.0, 2.0]).unwrap(), ParamTag::NetworkWeight);
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let r = tape.relu(xv);
        let loss = tape.reduce_sum(r);
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut store);
        assert_eq!(store.get(x).grad.data(), &[0.0, 1.0]);
    }

    #[test]
    fn abs_sign_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::from_vec(1, 2, vec![-3.0, 5.0]).unwrap(), ParamTag::NetworkWeight);
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let r = tape.abs(xv);
        let loss = tape.reduce_sum(r);
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut store);
        assert_eq!(store.get(x).grad.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_values() {
        // Uniform logits over c classes: loss = ln c.
        let mut tape = Tape::new();
        let logits = tape.constant(Matrix::zeros(2, 4));
        let loss = tape
            .cross_entropy_masked(logits, Arc::new(vec![1, 2]), Arc::new(vec![0, 1]))
            .unwrap();
        assert!((tape.scalar_value(loss) - 4.0f64.ln()).abs() < 1e-12);

        // Confident correct logits push the loss toward zero.
        let mut tape = Tape::new();
        let logits = tape.constant(Matrix::from_vec(1, 2, vec![30.0, 0.0]).unwrap());
        let loss = tape
            .cross_entropy_masked(logits, Arc::new(vec![0]), Arc::new(vec![0]))
            .unwrap();
        assert!(tape.scalar_value(loss) < 1e-12);
    }

    #[test]
    fn quadratic_gradient() {
        // f(w) = w^T w has gradient 2w.
        let mut store = ParamStore::new();
        let w = store.add(
            "w",
            Matrix::from_vec(3, 1, vec![1.5, -2.0, 0.5]).unwrap(),
            ParamTag::NetworkWeight,
        );
        let mut tape = Tape::new();
        let wv = tape.param(&store, w);
        let sq = tape.elementwise_mul(wv, wv).unwrap();
        let loss = tape.reduce_sum(sq);
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut store);
        assert_eq!(store.get(w).grad.data(), &[3.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::scalar(2.0));
        let loss = tape.reduce_sum(x);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn softmax_empty_row_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(2, 0));
        assert!(tape.row_softmax(x).is_err());
    }

    #[test]
    fn topk_rejects_bad_k() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(2, 3));
        assert!(tape.row_topk_softmax(x, 0).is_err());
        assert!(tape.row_topk_softmax(x, 4).is_err());
    }

    /// Finite-difference check for a loss built by `build` over the given
    /// parameter shapes.
    fn gradient_check<F>(shapes: &[(usize, usize)], seed: u64, build: F)
    where
        F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (i, &(r, c)) in shapes.iter().enumerate() {
            let m = rand_matrix(&mut rng, r, c);
            store.add(format!("p{i}"), m, ParamTag::NetworkWeight);
        }
        let run = |store: &ParamStore| -> Result<f64> {
            let mut tape = Tape::new();
            let ids: Vec<VarId> = (0..store.len()).map(|i| tape.param(store, i)).collect();
            let loss = build(&mut tape, &ids)?;
            Ok(tape.scalar_value(loss))
        };
        // Analytic pass.
        let mut tape = Tape::new();
        let ids: Vec<VarId> = (0..store.len()).map(|i| tape.param(&store, i)).collect();
        let loss = build(&mut tape, &ids).unwrap();
        tape.backward(loss).unwrap();
        store.zero_grads();
        tape.accumulate_param_grads(&mut store);
        let analytic: Vec<Matrix> = store.iter().map(|p| p.grad.clone()).collect();
        let numeric = finite_difference_grads(&mut store, run, 1e-5).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            let err = max_relative_error(a, n);
            assert!(err <= 1e-4, "gradient mismatch: {err}");
        }
    }

    #[test]
    fn gradcheck_matmul_chain() {
        gradient_check(&[(3, 4), (4, 2)], 1, |tape, p| {
            let prod = tape.matmul(p[0], p[1])?;
            let sq = tape.elementwise_mul(prod, prod)?;
            Ok(tape.reduce_sum(sq))
        });
    }

    #[test]
    fn gradcheck_bias_relu_softmax_ce() {
        gradient_check(&[(4, 3), (1, 3)], 2, |tape, p| {
            let biased = tape.add_row_broadcast(p[0], p[1])?;
            let act = tape.relu(biased);
            tape.cross_entropy_masked(act, Arc::new(vec![0, 2, 1, 0]), Arc::new(vec![0, 1, 3]))
        });
    }

    #[test]
    fn gradcheck_row_softmax() {
        gradient_check(&[(3, 4), (3, 4)], 3, |tape, p| {
            let sm = tape.row_softmax(p[0])?;
            let weighted = tape.elementwise_mul(sm, p[1])?;
            Ok(tape.reduce_sum(weighted))
        });
    }

    #[test]
    fn gradcheck_topk_softmax() {
        gradient_check(&[(5, 4), (5, 4)], 4, |tape, p| {
            let sm = tape.row_topk_softmax(p[0], 2)?;
            let weighted = tape.elementwise_mul(sm, p[1])?;
            Ok(tape.reduce_sum(weighted))
        });
    }

    #[test]
    fn gradcheck_abs_scale_concat() {
        gradient_check(&[(3, 2), (3, 3)], 5, |tape, p| {
            let a = tape.abs(p[0]);
            let s = tape.scale(p[1], -1.7);
            let cat = tape.concat_columns(&[a, s])?;
            let sq = tape.elementwise_mul(cat, cat)?;
            Ok(tape.reduce_sum(sq))
        });
    }

    #[test]
    fn gradcheck_row_col_broadcasts() {
        gradient_check(&[(4, 3), (5, 1), (4, 1)], 6, |tape, p| {
            let theta = tape.row(p[1], 2)?; // 1x1 scalar from a column param
            let scaled = tape.elementwise_mul(p[0], theta)?;
            let gated = tape.elementwise_mul(scaled, p[2])?; // column broadcast
            let c = tape.col(gated, 1)?;
            let sq = tape.elementwise_mul(c, c)?;
            Ok(tape.reduce_sum(sq))
        });
    }

    #[test]
    fn gradcheck_sparse_apply() {
        let g = Graph::build(&[(0, 1), (1, 2), (2, 3), (0, 3), (1, 3)], 5).unwrap();
        let g = std::sync::Arc::new(g);
        for kind in [
            OperatorKind::SymAdj,
            OperatorKind::RowAdj,
            OperatorKind::SymLaplacian,
            OperatorKind::ShiftedLaplacian,
            OperatorKind::RawAdj,
        ] {
            let op = NormalizedOperator::new(g.clone(), kind);
            gradient_check(&[(5, 2), (5, 2)], 7, |tape, p| {
                let y = tape.sparse_apply(&op, p[0])?;
                let w = tape.elementwise_mul(y, p[1])?;
                Ok(tape.reduce_sum(w))
            });
        }
    }

    #[test]
    fn sparse_backward_matches_dense_transpose() {
        // Gradient of sum(c . op(x)) w.r.t. x equals op^T c; check against
        // the dense transpose product.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut edges = Vec::new();
        let n = 15;
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.random::<f64>() < 0.25 {
                    edges.push((i, j));
                }
            }
        }
        let g = std::sync::Arc::new(Graph::build(&edges, n).unwrap());
        for kind in [OperatorKind::RowAdj, OperatorKind::SymAdj] {
            let op = NormalizedOperator::new(g.clone(), kind);
            // Dense operator matrix via unit vectors.
            let mut dense = Matrix::zeros(n, n);
            for j in 0..n {
                let mut e = Matrix::zeros(n, 1);
                e.set(j, 0, 1.0);
                let col = op.apply(&e).unwrap();
                for i in 0..n {
                    dense.set(i, j, col.get(i, 0));
                }
            }
            let c = rand_matrix(&mut rng, n, 2);
            let x = rand_matrix(&mut rng, n, 2);
            let mut store = ParamStore::new();
            let xi = store.add("x", x, ParamTag::NetworkWeight);
            let mut tape = Tape::new();
            let xv = tape.param(&store, xi);
            let cv = tape.constant(c.clone());
            let y = tape.sparse_apply(&op, xv).unwrap();
            let w = tape.elementwise_mul(y, cv).unwrap();
            let loss = tape.reduce_sum(w);
            tape.backward(loss).unwrap();
            tape.accumulate_param_grads(&mut store);
            let expect = dense.transpose().matmul(&c).unwrap();
            assert!(store.get(xi).grad.max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn sym_operators_are_self_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = std::sync::Arc::new(Graph::build(&[(0, 1), (1, 2), (2, 0), (2, 3)], 5).unwrap());
        let x = rand_matrix(&mut rng, 5, 1);
        let y = rand_matrix(&mut rng, 5, 1);
        for kind in [
            OperatorKind::SymAdj,
            OperatorKind::SymLaplacian,
            OperatorKind::ShiftedLaplacian,
            OperatorKind::RawAdj,
        ] {
            let op = NormalizedOperator::new(g.clone(), kind);
            let ax = op.apply(&x).unwrap();
            let ay = op.apply(&y).unwrap();
            let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(ay.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{kind:?} not self-adjoint");
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_are_stochastic(
            rows in 1usize..6,
            cols in 1usize..5,
            values in proptest::collection::vec(-20.0f64..20.0, 30),
            k in 1usize..5,
        ) {
            let data: Vec<f64> = values[..rows * cols].to_vec();
            let logits = Matrix::from_vec(rows, cols, data).unwrap();
            let k = k.min(cols);
            let mut tape = Tape::new();
            let l = tape.constant(logits);
            let soft = tape.row_softmax(l).unwrap();
            let topk = tape.row_topk_softmax(l, k).unwrap();
            for id in [soft, topk] {
                let m = tape.value(id);
                for i in 0..rows {
                    let row = m.row(i);
                    let sum: f64 = row.iter().sum();
                    proptest::prop_assert!((sum - 1.0).abs() < 1e-9);
                    proptest::prop_assert!(row.iter().all(|&w| w >= 0.0));
                }
            }
            let tk = tape.value(topk);
            for i in 0..rows {
                let nonzeros = tk.row(i).iter().filter(|&&w| w != 0.0).count();
                proptest::prop_assert!(nonzeros <= k);
            }
        }
    }

    #[test]
    fn topk_equals_soft_when_k_is_full_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let logits = rand_matrix(&mut rng, 6, 2);
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let soft = tape.row_softmax(l).unwrap();
        let topk = tape.row_topk_softmax(l, 2).unwrap();
        let diff = tape.value(soft).max_abs_diff(tape.value(topk));
        assert!(diff < 1e-12);
    }
}
