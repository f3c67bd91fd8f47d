//! Tape-based reverse-mode differentiation over the handful of dense
//! primitives the model needs.
//!
//! A [`GradTape`] owns every intermediate value of one forward pass.
//! Replaying the op records backward visits each exactly once and
//! accumulates gradients additively. Leaves registered via
//! [`GradTape::constant`] (inputs, frozen parameters) still propagate
//! gradients *through* themselves to upstream ops but never accumulate
//! a gradient of their own — their reported gradient stays exactly zero.

use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VarId(usize);

enum Op {
    MatMul { a: VarId, b: VarId, out: VarId },
    Add { a: VarId, b: VarId, out: VarId },
    AddRowBroadcast { a: VarId, bias: VarId, out: VarId },
    Tanh { a: VarId, out: VarId },
    Scale { a: VarId, c: f64, out: VarId },
    SoftmaxRow { out: VarId, a: VarId },
    GatherScalars { picks: Vec<(VarId, usize)>, out: VarId },
    WeightedSum { weights: VarId, items: Vec<VarId>, out: VarId },
    MeanRows { a: VarId, out: VarId },
    SliceRow { a: VarId, row: usize, out: VarId },
    ConcatCols { a: VarId, b: VarId, out: VarId },
    StackRows { items: Vec<VarId>, out: VarId },
    SortRowBlocks { a: VarId, perm: Vec<usize>, out: VarId },
    Pinball { pred: VarId, target: Vec<f64>, levels: Vec<f64>, out: VarId },
    MeanScalars { items: Vec<VarId>, out: VarId },
}

/// Record of one forward pass, replayable backward for exact gradients.
#[derive(Default)]
pub struct GradTape {
    values: Vec<Matrix>,
    grads: Vec<Option<Matrix>>,
    is_leaf: Vec<bool>,
    trainable: Vec<bool>,
    ops: Vec<Op>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    fn push_node(&mut self, value: Matrix, is_leaf: bool, trainable: bool) -> VarId {
        let id = VarId(self.values.len());
        self.values.push(value);
        self.grads.push(None);
        self.is_leaf.push(is_leaf);
        self.trainable.push(trainable);
        id
    }

    /// Trainable leaf: accumulates a gradient during backward.
    pub fn leaf(&mut self, value: Matrix) -> VarId {
        self.push_node(value, true, true)
    }

    /// Frozen leaf or plain input: gradient stays exactly zero.
    pub fn constant(&mut self, value: Matrix) -> VarId {
        self.push_node(value, true, false)
    }

    pub fn value(&self, v: VarId) -> &Matrix {
        &self.values[v.0]
    }

    /// Gradient accumulated for `v`; zero matrix if backward never touched it.
    pub fn grad(&self, v: VarId) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Matrix::zeros(self.values[v.0].rows(), self.values[v.0].cols()),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.values[a.0].matmul(&self.values[b.0])?;
        let out = self.push_node(v, false, false);
        self.ops.push(Op::MatMul { a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = self.values[a.0].add(&self.values[b.0])?;
        let out = self.push_node(v, false, false);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn add_row_broadcast(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let v = self.values[a.0].add_row_broadcast(&self.values[bias.0])?;
        let out = self.push_node(v, false, false);
        self.ops.push(Op::AddRowBroadcast { a, bias, out });
        Ok(out)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let v = self.values[a.0].tanh();
        let out = self.push_node(v, false, false);
        self.ops.push(Op::Tanh { a, out });
        out
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.values[a.0].scale(c);
        let out = self.push_node(v, false, false);
        self.ops.push(Op::Scale { a, c, out });
        out
    }

    /// Stable softmax over a 1xN row.
    pub fn softmax_row(&mut self, a: VarId) -> Result<VarId> {
        let row = &self.values[a.0];
        if row.rows() != 1 {
            return Err(Error::shape("softmax_row", "expected a 1xN row"));
        }
        let w = super::softmax(row.as_slice())?;
        let out = self.push_node(Matrix::row_vector(w), false, false);
        self.ops.push(Op::SoftmaxRow { a, out });
        Ok(out)
    }

    /// Build a 1xN row by picking one scalar (flat index) from each source.
    pub fn gather_scalars(&mut self, picks: &[(VarId, usize)]) -> Result<VarId> {
        if picks.is_empty() {
            return Err(Error::shape("gather_scalars", "empty pick list"));
        }
        let mut data = Vec::with_capacity(picks.len());
        for &(src, idx) in picks {
            let m = &self.values[src.0];
            if idx >= m.len() {
                return Err(Error::shape(
                    "gather_scalars",
                    format!("flat index {idx} out of {}", m.len()),
                ));
            }
            data.push(m.as_slice()[idx]);
        }
        let out = self.push_node(Matrix::row_vector(data), false, false);
        self.ops.push(Op::GatherScalars {
            picks: picks.to_vec(),
            out,
        });
        Ok(out)
    }

    /// `out = sum_i weights[i] * items[i]` with 1xH items and 1xN weights.
    pub fn weighted_sum(&mut self, weights: VarId, items: &[VarId]) -> Result<VarId> {
        let w = &self.values[weights.0];
        if w.rows() != 1 || w.cols() != items.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("1x{} weights vs {} items", w.cols(), items.len()),
            ));
        }
        let (rows, cols) = {
            let first = &self.values[items[0].0];
            (first.rows(), first.cols())
        };
        let mut acc = Matrix::zeros(rows, cols);
        for (i, item) in items.iter().enumerate() {
            let m = &self.values[item.0];
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::shape("weighted_sum", "item shape mismatch"));
            }
            let wi = w.as_slice()[i];
            for (a, b) in acc.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *a += wi * b;
            }
        }
        let out = self.push_node(acc, false, false);
        self.ops.push(Op::WeightedSum {
            weights,
            items: items.to_vec(),
            out,
        });
        Ok(out)
    }

    pub fn mean_rows(&mut self, a: VarId) -> VarId {
        let v = self.values[a.0].mean_rows();
        let out = self.push_node(v, false, false);
        self.ops.push(Op::MeanRows { a, out });
        out
    }

    pub fn slice_row(&mut self, a: VarId, row: usize) -> Result<VarId> {
        let m = &self.values[a.0];
        if row >= m.rows() {
            return Err(Error::shape(
                "slice_row",
                format!("row {row} out of {}", m.rows()),
            ));
        }
        let v = m.row_matrix(row);
        let out = self.push_node(v, false, false);
        self.ops.push(Op::SliceRow { a, row, out });
        Ok(out)
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ma, mb) = (&self.values[a.0], &self.values[b.0]);
        if ma.rows() != 1 || mb.rows() != 1 {
            return Err(Error::shape("concat_cols", "expected 1xN rows"));
        }
        let mut data = ma.as_slice().to_vec();
        data.extend_from_slice(mb.as_slice());
        let out = self.push_node(Matrix::row_vector(data), false, false);
        self.ops.push(Op::ConcatCols { a, b, out });
        Ok(out)
    }

    /// Stack 1xC rows into an NxC matrix.
    pub fn stack_rows(&mut self, items: &[VarId]) -> Result<VarId> {
        if items.is_empty() {
            return Err(Error::shape("stack_rows", "no rows"));
        }
        let cols = self.values[items[0].0].cols();
        let mut data = Vec::with_capacity(items.len() * cols);
        for item in items {
            let m = &self.values[item.0];
            if m.rows() != 1 || m.cols() != cols {
                return Err(Error::shape("stack_rows", "row shape mismatch"));
            }
            data.extend_from_slice(m.as_slice());
        }
        let out = self.push_node(
            Matrix::from_vec(items.len(), cols, data)?,
            false,
            false,
        );
        self.ops.push(Op::StackRows {
            items: items.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Sort each consecutive block of `block` entries of a 1xN row into
    /// ascending order. The permutation is recorded at forward time, so the
    /// backward pass is the exact transpose permutation.
    pub fn sort_row_blocks(&mut self, a: VarId, block: usize) -> Result<VarId> {
        let m = &self.values[a.0];
        if m.rows() != 1 || block == 0 || m.cols() % block != 0 {
            return Err(Error::shape(
                "sort_row_blocks",
                format!("1x{} row with block {block}", m.cols()),
            ));
        }
        let src = m.as_slice();
        let mut perm: Vec<usize> = Vec::with_capacity(src.len());
        for blk in 0..src.len() / block {
            let base = blk * block;
            let mut idx: Vec<usize> = (0..block).collect();
            // Stable by construction: ties keep the lower source index first.
            idx.sort_by(|&x, &y| src[base + x].partial_cmp(&src[base + y]).unwrap());
            perm.extend(idx.into_iter().map(|i| base + i));
        }
        let data: Vec<f64> = perm.iter().map(|&i| src[i]).collect();
        let out = self.push_node(Matrix::row_vector(data), false, false);
        self.ops.push(Op::SortRowBlocks { a, perm, out });
        Ok(out)
    }

    /// Mean pinball loss over an H*Q prediction row against an H-step target.
    ///
    /// The subgradient at each kink is the right-derivative in the
    /// prediction: `1 - q` when `pred >= y`, `-q` otherwise.
    pub fn pinball(&mut self, pred: VarId, target: &[f64], levels: &[f64]) -> Result<VarId> {
        let p = &self.values[pred.0];
        let (h, q) = (target.len(), levels.len());
        if p.rows() != 1 || p.cols() != h * q {
            return Err(Error::shape(
                "pinball",
                format!("1x{} pred vs H={h} Q={q}", p.cols()),
            ));
        }
        if target.iter().any(|v| v.is_nan()) || p.as_slice().iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("pinball", "NaN input"));
        }
        let mut total = 0.0;
        for (t, &y) in target.iter().enumerate() {
            for (j, &level) in levels.iter().enumerate() {
                let yhat = p.as_slice()[t * q + j];
                let diff = y - yhat;
                total += if diff > 0.0 {
                    level * diff
                } else {
                    (1.0 - level) * (-diff)
                };
            }
        }
        let loss = total / (h * q) as f64;
        let out = self.push_node(Matrix::scalar(loss), false, false);
        self.ops.push(Op::Pinball {
            pred,
            target: target.to_vec(),
            levels: levels.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Mean of scalar (1x1) nodes.
    pub fn mean_scalars(&mut self, items: &[VarId]) -> Result<VarId> {
        if items.is_empty() {
            return Err(Error::shape("mean_scalars", "no items"));
        }
        let mut s = 0.0;
        for item in items {
            let m = &self.values[item.0];
            if m.len() != 1 {
                return Err(Error::shape("mean_scalars", "non-scalar item"));
            }
            s += m.scalar_value();
        }
        let out = self.push_node(Matrix::scalar(s / items.len() as f64), false, false);
        self.ops.push(Op::MeanScalars {
            items: items.to_vec(),
            out,
        });
        Ok(out)
    }

    fn accumulate(&mut self, v: VarId, delta: &Matrix) {
        // Frozen leaves keep an exactly-zero gradient.
        if self.is_leaf[v.0] && !self.trainable[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                    *a += b;
                }
            }
            None => self.grads[v.0] = Some(delta.clone()),
        }
    }

    fn out_grad(&self, out: VarId) -> Option<Matrix> {
        self.grads[out.0].clone()
    }

    /// Run the backward pass from a scalar loss node.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::shape("backward", "loss must be scalar"));
        }
        self.grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..self.ops.len()).rev() {
            // Ops are moved out one at a time to appease the borrow checker;
            // each record is visited exactly once.
            let op = std::mem::replace(
                &mut self.ops[i],
                Op::Tanh {
                    a: VarId(0),
                    out: VarId(0),
                },
            );
            self.backward_op(&op);
            self.ops[i] = op;
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::MatMul { a, b, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let bt = self.values[b.0].transpose();
                let da = g.matmul(&bt).expect("shapes fixed at forward");
                let at = self.values[a.0].transpose();
                let db = at.matmul(&g).expect("shapes fixed at forward");
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Add { a, b, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                self.accumulate(*a, &g);
                self.accumulate(*b, &g);
            }
            Op::AddRowBroadcast { a, bias, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                self.accumulate(*a, &g);
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        db.as_mut_slice()[c] += g.get(r, c);
                    }
                }
                self.accumulate(*bias, &db);
            }
            Op::Tanh { a, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let y = &self.values[out.0];
                let mut da = g.clone();
                for (d, yv) in da.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *d *= 1.0 - yv * yv;
                }
                self.accumulate(*a, &da);
            }
            Op::Scale { a, c, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                self.accumulate(*a, &g.scale(*c));
            }
            Op::SoftmaxRow { a, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let y = self.values[out.0].as_slice().to_vec();
                let dot: f64 = g.as_slice().iter().zip(&y).map(|(gi, yi)| gi * yi).sum();
                let data: Vec<f64> = g
                    .as_slice()
                    .iter()
                    .zip(&y)
                    .map(|(gi, yi)| yi * (gi - dot))
                    .collect();
                self.accumulate(*a, &Matrix::row_vector(data));
            }
            Op::GatherScalars { picks, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                for (i, &(src, idx)) in picks.iter().enumerate() {
                    let m = &self.values[src.0];
                    let mut delta = Matrix::zeros(m.rows(), m.cols());
                    delta.as_mut_slice()[idx] = g.as_slice()[i];
                    self.accumulate(src, &delta);
                }
            }
            Op::WeightedSum { weights, items, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let w = self.values[weights.0].as_slice().to_vec();
                let mut dw = Matrix::zeros(1, items.len());
                for (i, item) in items.iter().enumerate() {
                    let m = self.values[item.0].clone();
                    let dot: f64 = g
                        .as_slice()
                        .iter()
                        .zip(m.as_slice())
                        .map(|(gi, mi)| gi * mi)
                        .sum();
                    dw.as_mut_slice()[i] = dot;
                    self.accumulate(*item, &g.scale(w[i]));
                }
                self.accumulate(*weights, &dw);
            }
            Op::MeanRows { a, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let rows = self.values[a.0].rows();
                let inv = 1.0 / rows as f64;
                let mut da = Matrix::zeros(rows, g.cols());
                for r in 0..rows {
                    for c in 0..g.cols() {
                        da.set(r, c, g.as_slice()[c] * inv);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::SliceRow { a, row, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let m = &self.values[a.0];
                let mut da = Matrix::zeros(m.rows(), m.cols());
                da.row_mut(*row).copy_from_slice(g.as_slice());
                self.accumulate(*a, &da);
            }
            Op::ConcatCols { a, b, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let na = self.values[a.0].cols();
                let ga = Matrix::row_vector(g.as_slice()[..na].to_vec());
                let gb = Matrix::row_vector(g.as_slice()[na..].to_vec());
                self.accumulate(*a, &ga);
                self.accumulate(*b, &gb);
            }
            Op::StackRows { items, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                for (r, item) in items.iter().enumerate() {
                    self.accumulate(*item, &g.row_matrix(r));
                }
            }
            Op::SortRowBlocks { a, perm, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let m = &self.values[a.0];
                let mut da = Matrix::zeros(m.rows(), m.cols());
                for (i, &src) in perm.iter().enumerate() {
                    da.as_mut_slice()[src] += g.as_slice()[i];
                }
                self.accumulate(*a, &da);
            }
            Op::Pinball {
                pred,
                target,
                levels,
                out,
            } => {
                let Some(g) = self.out_grad(*out) else { return };
                let gscale = g.scalar_value() / (target.len() * levels.len()) as f64;
                let p = self.values[pred.0].as_slice().to_vec();
                let q = levels.len();
                let mut dp = Matrix::zeros(1, p.len());
                for (t, &y) in target.iter().enumerate() {
                    for (j, &level) in levels.iter().enumerate() {
                        let yhat = p[t * q + j];
                        let d = if yhat >= y { 1.0 - level } else { -level };
                        dp.as_mut_slice()[t * q + j] = gscale * d;
                    }
                }
                self.accumulate(*pred, &dp);
            }
            Op::MeanScalars { items, out } => {
                let Some(g) = self.out_grad(*out) else { return };
                let share = Matrix::scalar(g.scalar_value() / items.len() as f64);
                for item in items {
                    self.accumulate(*item, &share);
                }
            }
        }
    }
}

/// Two-layer perceptron forward on the tape: `tanh(x W1 + b1) W2 + b2`.
pub fn mlp_forward(
    tape: &mut GradTape,
    x: VarId,
    w1: VarId,
    b1: VarId,
    w2: VarId,
    b2: VarId,
) -> Result<VarId> {
    let z1 = tape.matmul(x, w1)?;
    let z1 = tape.add_row_broadcast(z1, b1)?;
    let a1 = tape.tanh(z1);
    let z2 = tape.matmul(a1, w2)?;
    tape.add_row_broadcast(z2, b2)
}

/// Same computation without a tape, for inference paths.
pub fn mlp_forward_plain(
    x: &Matrix,
    w1: &Matrix,
    b1: &Matrix,
    w2: &Matrix,
    b2: &Matrix,
) -> Result<Matrix> {
    let a1 = x.matmul(w1)?.add_row_broadcast(b1)?.tanh();
    a1.matmul(w2)?.add_row_broadcast(b2)
}
