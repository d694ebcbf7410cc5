//! Reverse-mode autodiff on a per-forward-pass tape.
//!
//! One tape records one forward pass. `backward` replays the recorded
//! operations in reverse and accumulates gradients; afterwards the tape
//! is spent and only gradient reads are allowed. A tape is confined to
//! a single thread.

use crate::error::{Error, Result};
use crate::tensor::{matmul_value, transpose_value, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: NodeId, b: NodeId },
    /// mat + row broadcast over every row (bias addition).
    AddRow { mat: NodeId, row: NodeId },
    /// Elementwise product with an untracked constant (dropout masks).
    MulConst { x: NodeId, mask: Tensor },
    Scale { x: NodeId, factor: f64 },
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    /// Row-wise softmax over columns; masked columns are exactly zero.
    MaskedSoftmax { x: NodeId, mask: Vec<bool> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, epsilon: f64 },
    Gelu { x: NodeId },
    /// -log(p[gold]) over a single probability row.
    CrossEntropy { probs: NodeId, gold: usize },
    /// Cosine similarity of two equal-shape vectors, scalar output.
    Cosine { a: NodeId, b: NodeId },
    /// Row gather from a table (embedding lookup).
    Gather { table: NodeId, ids: Vec<u32> },
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { a: NodeId, b: NodeId },
    /// Column-wise mean over rows, producing a single row.
    MeanRows { x: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    spent: bool,
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
            grads: Vec::new(),
            spent: false,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        assert!(!self.spent, "tape already consumed by backward");
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        id
    }

    /// Record an input value. Gradients accumulate into every leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the loss w.r.t. a node; `None` if no gradient flowed there.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient with unreached nodes reported as zeros.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.nodes[id.0].value.shape();
                Tensor::zeros(r, c)
            }
        }
    }

    // ── ops ──────────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if (ar, ac) != (br, bc) {
            return Err(shape_err("add", (ar, ac), (br, bc)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_vec(ar, ac, data)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    /// mat (r x c) + row (1 x c) added to every row.
    pub fn add_row(&mut self, mat: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(mat).shape();
        let (rr, rc) = self.value(row).shape();
        if rr != 1 || rc != c {
            return Err(shape_err("add_row", (r, c), (rr, rc)));
        }
        let mut data = self.value(mat).data().to_vec();
        let row_data = self.value(row).data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (v, b) in chunk.iter_mut().zip(&row_data) {
                *v += b;
            }
        }
        let value = Tensor::from_vec(r, c, data)?;
        Ok(self.push(Op::AddRow { mat, row }, value))
    }

    /// Elementwise product with a constant of identical shape.
    pub fn mul_const(&mut self, x: NodeId, mask: Tensor) -> Result<NodeId> {
        let (r, c) = self.value(x).shape();
        if mask.shape() != (r, c) {
            return Err(shape_err("mul_const", (r, c), mask.shape()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(a, m)| a * m)
            .collect();
        let value = Tensor::from_vec(r, c, data)?;
        Ok(self.push(Op::MulConst { x, mask }, value))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let (r, c) = self.value(x).shape();
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_vec(r, c, data).expect("same shape");
        self.push(Op::Scale { x, factor }, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).shape();
        let (k2, n) = self.value(b).shape();
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let value = matmul_value(self.value(a), self.value(b));
        Ok(self.push(Op::Matmul { a, b }, value))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = transpose_value(self.value(x));
        self.push(Op::Transpose { x }, value)
    }

    /// Row-wise softmax over the last axis. `mask[j] == false` columns are
    /// excluded and come out exactly zero; stabilized by max subtraction.
    pub fn masked_softmax(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (r, c) = self.value(x).shape();
        if mask.len() != c {
            return Err(shape_err("masked_softmax", (r, c), (1, mask.len())));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::FullyMaskedRow { row: 0 });
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = self.value(x).row_slice(i);
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let out = &mut data[i * c..(i + 1) * c];
            for j in 0..c {
                if mask[j] {
                    let e = (row[j] - max).exp();
                    out[j] = e;
                    sum += e;
                }
            }
            for (j, v) in out.iter_mut().enumerate() {
                if mask[j] {
                    *v /= sum;
                }
            }
        }
        let value = Tensor::from_vec(r, c, data)?;
        Ok(self.push(
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
            value,
        ))
    }

    /// Row-wise layer normalization with affine gain/bias (both 1 x cols).
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        epsilon: f64,
    ) -> Result<NodeId> {
        let (r, c) = self.value(x).shape();
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let (gr, gc) = self.value(id).shape();
            if gr != 1 || gc != c {
                let _ = name;
                return Err(shape_err("layer_norm", (r, c), (gr, gc)));
            }
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = self.value(x).row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + epsilon).sqrt();
            let gain_row = self.value(gain).data();
            let bias_row = self.value(bias).data();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv_std * gain_row[j] + bias_row[j];
            }
        }
        let value = Tensor::from_vec(r, c, data)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                epsilon,
            },
            value,
        ))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.value(x).shape();
        let data = self.value(x).data().iter().map(|&v| gelu_fwd(v)).collect();
        let value = Tensor::from_vec(r, c, data).expect("same shape");
        self.push(Op::Gelu { x }, value)
    }

    /// -log(p[gold]) for a single probability row coming out of
    /// `masked_softmax`. A zero probability means the index was masked.
    pub fn cross_entropy(&mut self, probs: NodeId, gold: usize) -> Result<NodeId> {
        let (r, c) = self.value(probs).shape();
        if r != 1 {
            return Err(shape_err("cross_entropy", (r, c), (1, c)));
        }
        if gold >= c {
            return Err(Error::IndexOutOfRange {
                index: gold,
                len: c,
            });
        }
        let p = self.value(probs).data()[gold];
        if p == 0.0 {
            return Err(Error::MaskedGoldIndex { index: gold });
        }
        let value = Tensor::scalar(-p.ln());
        Ok(self.push(Op::CrossEntropy { probs, gold }, value))
    }

    /// Cosine similarity of two vectors of identical shape; scalar in [-1, 1].
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb || (sa.0 != 1 && sa.1 != 1) {
            return Err(shape_err("cosine", sa, sb));
        }
        let value = Tensor::scalar(cosine_value(self.value(a), self.value(b))?);
        Ok(self.push(Op::Cosine { a, b }, value))
    }

    /// Gather rows of `table` by id (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let (vocab, width) = self.value(table).shape();
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenIdOutOfRange {
                    id,
                    vocab_size: vocab,
                });
            }
            data.extend_from_slice(self.value(table).row_slice(id as usize));
        }
        let value = Tensor::from_vec(ids.len(), width, data)?;
        Ok(self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).shape();
        if start + len > r || len == 0 {
            return Err(Error::InvalidSpan {
                start,
                end: start + len.saturating_sub(1),
                len: r,
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::from_vec(len, c, data)?;
        Ok(self.push(Op::SliceRows { x, start, len }, value))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).shape();
        if start + len > c || len == 0 {
            return Err(Error::InvalidSpan {
                start,
                end: start + len.saturating_sub(1),
                len: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            let row = self.value(x).row_slice(i);
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::from_vec(r, len, data)?;
        Ok(self.push(Op::SliceCols { x, start, len }, value))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ar != br {
            return Err(shape_err("concat_cols", (ar, ac), (br, bc)));
        }
        let mut data = Vec::with_capacity(ar * (ac + bc));
        for i in 0..ar {
            data.extend_from_slice(self.value(a).row_slice(i));
            data.extend_from_slice(self.value(b).row_slice(i));
        }
        let value = Tensor::from_vec(ar, ac + bc, data)?;
        Ok(self.push(Op::ConcatCols { a, b }, value))
    }

    /// Column-wise mean over rows: (r x c) -> (1 x c).
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.value(x).shape();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (j, v) in self.value(x).row_slice(i).iter().enumerate() {
                data[j] += v;
            }
        }
        for v in &mut data {
            *v /= r as f64;
        }
        let value = Tensor::from_vec(1, c, data).expect("mean shape");
        self.push(Op::MeanRows { x }, value)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Run the backward pass from a scalar loss. Consumes the tape's
    /// recording capability: only value/grad reads are allowed afterwards.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        assert!(!self.spent, "backward called twice on one tape");
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::Config(format!(
                "backward needs a scalar loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        self.spent = true;
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let grad_out = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(idx, &grad_out);
            // Leaves keep their accumulated gradient for the caller.
            self.grads[idx] = Some(grad_out);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, grad: Tensor) {
        match &mut self.grads[id.0] {
            Some(existing) => {
                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                    *e += g;
                }
            }
            None => self.grads[id.0] = Some(grad),
        }
    }

    fn backward_op(&mut self, idx: usize, grad_out: &Tensor) {
        // Ops are immutable once recorded; clone the small metadata we need.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad_out.clone());
                self.accumulate(b, grad_out.clone());
            }
            Op::AddRow { mat, row } => {
                let (mat, row) = (*mat, *row);
                let (r, c) = grad_out.shape();
                let mut row_grad = vec![0.0; c];
                for i in 0..r {
                    for (j, g) in grad_out.row_slice(i).iter().enumerate() {
                        row_grad[j] += g;
                    }
                }
                self.accumulate(mat, grad_out.clone());
                self.accumulate(row, Tensor::from_vec(1, c, row_grad).expect("row grad"));
            }
            Op::MulConst { x, mask } => {
                let x = *x;
                let (r, c) = grad_out.shape();
                let data = grad_out
                    .data()
                    .iter()
                    .zip(mask.data())
                    .map(|(g, m)| g * m)
                    .collect();
                self.accumulate(x, Tensor::from_vec(r, c, data).expect("mask grad"));
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                let (r, c) = grad_out.shape();
                let data = grad_out.data().iter().map(|g| g * factor).collect();
                self.accumulate(x, Tensor::from_vec(r, c, data).expect("scale grad"));
            }
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let bt = transpose_value(self.value(b));
                let at = transpose_value(self.value(a));
                let da = matmul_value(grad_out, &bt);
                let db = matmul_value(&at, grad_out);
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Transpose { x } => {
                let x = *x;
                self.accumulate(x, transpose_value(grad_out));
            }
            Op::MaskedSoftmax { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                let y = &self.nodes[idx].value;
                let (r, c) = y.shape();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let y_row = y.row_slice(i);
                    let g_row = grad_out.row_slice(i);
                    let dot: f64 = (0..c)
                        .filter(|&j| mask[j])
                        .map(|j| g_row[j] * y_row[j])
                        .sum();
                    for j in 0..c {
                        if mask[j] {
                            dx[i * c + j] = y_row[j] * (g_row[j] - dot);
                        }
                    }
                }
                self.accumulate(x, Tensor::from_vec(r, c, dx).expect("softmax grad"));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                epsilon,
            } => {
                let (x, gain, bias, epsilon) = (*x, *gain, *bias, *epsilon);
                let xv = self.value(x).clone();
                let gv = self.value(gain).clone();
                let (r, c) = xv.shape();
                let n = c as f64;
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    let row = xv.row_slice(i);
                    let g_row = grad_out.row_slice(i);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv_std = 1.0 / (var + epsilon).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = g_row
                        .iter()
                        .zip(gv.data())
                        .map(|(g, gn)| g * gn)
                        .collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / n;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..c {
                        dx[i * c + j] =
                            inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[j] += g_row[j] * xhat[j];
                        dbias[j] += g_row[j];
                    }
                }
                self.accumulate(x, Tensor::from_vec(r, c, dx).expect("ln dx"));
                self.accumulate(gain, Tensor::from_vec(1, c, dgain).expect("ln dgain"));
                self.accumulate(bias, Tensor::from_vec(1, c, dbias).expect("ln dbias"));
            }
            Op::Gelu { x } => {
                let x = *x;
                let xv = self.value(x).clone();
                let (r, c) = xv.shape();
                let data = grad_out
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &v)| g * gelu_bwd(v))
                    .collect();
                self.accumulate(x, Tensor::from_vec(r, c, data).expect("gelu grad"));
            }
            Op::CrossEntropy { probs, gold } => {
                let (probs, gold) = (*probs, *gold);
                let p = self.value(probs).data()[gold];
                let c = self.value(probs).cols();
                let mut dp = vec![0.0; c];
                dp[gold] = -grad_out.item() / p;
                self.accumulate(probs, Tensor::from_vec(1, c, dp).expect("ce grad"));
            }
            Op::Cosine { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.value(a).clone();
                let bv = self.value(b).clone();
                let g = grad_out.item();
                let dot: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
                let na = av.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = bv.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = dot / (na * nb);
                let (r, c) = av.shape();
                let da: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| g * (y / (na * nb) - cos * x / (na * na)))
                    .collect();
                let db: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| g * (x / (na * nb) - cos * y / (nb * nb)))
                    .collect();
                self.accumulate(a, Tensor::from_vec(r, c, da).expect("cos da"));
                self.accumulate(b, Tensor::from_vec(r, c, db).expect("cos db"));
            }
            Op::Gather { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let (vocab, width) = self.value(table).shape();
                let mut dt = vec![0.0; vocab * width];
                for (t, &id) in ids.iter().enumerate() {
                    let g_row = grad_out.row_slice(t);
                    let dst = &mut dt[id as usize * width..(id as usize + 1) * width];
                    for (d, g) in dst.iter_mut().zip(g_row) {
                        *d += g;
                    }
                }
                self.accumulate(
                    table,
                    Tensor::from_vec(vocab, width, dt).expect("gather grad"),
                );
            }
            Op::SliceRows { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let (r, c) = self.value(x).shape();
                let mut dx = vec![0.0; r * c];
                dx[start * c..(start + len) * c].copy_from_slice(grad_out.data());
                self.accumulate(x, Tensor::from_vec(r, c, dx).expect("slice rows grad"));
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let (r, c) = self.value(x).shape();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let g_row = grad_out.row_slice(i);
                    dx[i * c + start..i * c + start + len].copy_from_slice(g_row);
                }
                self.accumulate(x, Tensor::from_vec(r, c, dx).expect("slice cols grad"));
            }
            Op::ConcatCols { a, b } => {
                let (a, b) = (*a, *b);
                let (r, ac) = self.value(a).shape();
                let bc = self.value(b).cols();
                let mut da = vec![0.0; r * ac];
                let mut db = vec![0.0; r * bc];
                for i in 0..r {
                    let g_row = grad_out.row_slice(i);
                    da[i * ac..(i + 1) * ac].copy_from_slice(&g_row[..ac]);
                    db[i * bc..(i + 1) * bc].copy_from_slice(&g_row[ac..]);
                }
                self.accumulate(a, Tensor::from_vec(r, ac, da).expect("concat da"));
                self.accumulate(b, Tensor::from_vec(r, bc, db).expect("concat db"));
            }
            Op::MeanRows { x } => {
                let x = *x;
                let (r, c) = self.value(x).shape();
                let mut dx = vec![0.0; r * c];
                let g_row = grad_out.row_slice(0);
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g_row[j] / r as f64;
                    }
                }
                self.accumulate(x, Tensor::from_vec(r, c, dx).expect("mean grad"));
            }
        }
    }
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::ShapeMismatch {
        op,
        left_rows: left.0,
        left_cols: left.1,
        right_rows: right.0,
        right_cols: right.1,
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Cosine similarity of two plain vectors (no gradients).
pub fn cosine_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err("cosine", a.shape(), b.shape()));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 2, &[3.0, -1.0, 2.5, 7.0]));
        let eye = tape.leaf(t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let prod = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(prod), tape.value(a));

        let zero = tape.leaf(Tensor::zeros(2, 2));
        let prod = tape.matmul(zero, a).unwrap();
        assert_eq!(tape.value(prod), &Tensor::zeros(2, 2));
    }

    #[test]
    fn matmul_derived_case() {
        // Independent triple-loop oracle value: [[1,2],[3,4]].[[5],[6]] = [[17],[39]]
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(2, 1, &[5.0, 6.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3"), "{err}");
    }

    #[test]
    fn matmul_gradients() {
        // loss = sum(A.B) via ones weights; dA = 1.B^T, dB = A^T.1
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 2, &[1.0, 2.0]));
        let b = tape.leaf(t(2, 1, &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        tape.backward(c).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn softmax_equal_logits_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 4, &[0.7, 0.7, 0.7, 0.7]));
        let y = tape.masked_softmax(x, &[true; 4]).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_single_unmasked() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 3, &[5.0, -2.0, 9.0]));
        let y = tape.masked_softmax(x, &[false, true, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_derived_two_thirds() {
        // logits [0, ln 2] -> [1/3, 2/3]
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[0.0, 2.0f64.ln()]));
        let y = tape.masked_softmax(x, &[true, true]).unwrap();
        assert!((tape.value(y).data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[0.0, 1.0]));
        assert!(matches!(
            tape.masked_softmax(x, &[false, false]),
            Err(Error::FullyMaskedRow { .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one_masked_exactly_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(3, 5, &[0.3, -4.0, 2.0, 11.0, 0.0,
                                    1.0, 1.0, 1.0, 1.0, 1.0,
                                    -3.0, -2.0, -1.0, 0.0, 1.0]));
        let mask = [true, true, false, true, true];
        let y = tape.masked_softmax(x, &mask).unwrap();
        for i in 0..3 {
            let row = tape.value(y).row_slice(i);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert_eq!(row[2], 0.0);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 4, &[2.0, 2.0, 2.0, 2.0]));
        let gain = tape.leaf(Tensor::filled(1, 4, 1.0));
        let bias = tape.leaf(Tensor::zeros(1, 4));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_hand_case() {
        // Row [1,-1]: mean 0, var 1, so output ~ [1,-1] as eps -> 0.
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[1.0, -1.0]));
        let gain = tape.leaf(Tensor::filled(1, 2, 1.0));
        let bias = tape.leaf(Tensor::zeros(1, 2));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-10);
        assert!((tape.value(y).data()[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn layer_norm_shift_invariance() {
        let base = [0.3, -1.2, 4.0, 0.9];
        let shifted: Vec<f64> = base.iter().map(|v| v + 17.5).collect();
        let mut tape = Tape::new();
        let a = tape.leaf(t(1, 4, &base));
        let b = tape.leaf(t(1, 4, &shifted));
        let gain = tape.leaf(Tensor::filled(1, 4, 1.0));
        let bias = tape.leaf(Tensor::zeros(1, 4));
        let ya = tape.layer_norm(a, gain, bias, 1e-12).unwrap();
        let yb = tape.layer_norm(b, gain, bias, 1e-12).unwrap();
        let diff = tape.value(ya).max_abs_diff(tape.value(yb));
        assert!(diff < 1e-9, "shift changed layer_norm by {diff}");
    }

    #[test]
    fn cross_entropy_cases() {
        // p[gold]=1 -> 0; uniform over n -> ln n; p[gold]=0.5 -> ln 2.
        let mut tape = Tape::new();
        let one_hot = tape.leaf(t(1, 3, &[0.0, 1.0, 0.0]));
        let loss = tape.cross_entropy(one_hot, 1).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        let uniform = tape.leaf(t(1, 4, &[0.25; 4]));
        let loss = tape.cross_entropy(uniform, 2).unwrap();
        assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);

        let half = tape.leaf(t(1, 2, &[0.5, 0.5]));
        let loss = tape.cross_entropy(half, 0).unwrap();
        assert!((tape.value(loss).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_masked_or_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 3, &[1.0, 2.0, 3.0]));
        let p = tape.masked_softmax(x, &[true, false, true]).unwrap();
        assert!(matches!(
            tape.cross_entropy(p, 1),
            Err(Error::MaskedGoldIndex { index: 1 })
        ));
        assert!(matches!(
            tape.cross_entropy(p, 3),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cosine_identity_orthogonal_opposite() {
        let mut tape = Tape::new();
        let u = tape.leaf(t(1, 3, &[1.0, 2.0, 2.0]));
        let v = tape.leaf(t(1, 3, &[1.0, 2.0, 2.0]));
        let c = tape.cosine(u, v).unwrap();
        assert!((tape.value(c).item() - 1.0).abs() < 1e-12);

        let w = tape.leaf(t(1, 3, &[2.0, -1.0, 0.0]));
        let c = tape.cosine(u, w).unwrap();
        assert!(tape.value(c).item().abs() < 1e-12);

        let neg = tape.leaf(t(1, 3, &[-1.0, -2.0, -2.0]));
        let c = tape.cosine(u, neg).unwrap();
        assert!((tape.value(c).item() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_degenerate() {
        let a = Tensor::row(&[0.0, 0.0]);
        let b = Tensor::row(&[1.0, 2.0]);
        assert!(matches!(cosine_value(&a, &b), Err(Error::DegenerateVector)));
    }

    #[test]
    fn gradient_accumulates_over_multiple_uses() {
        // loss = sum over both uses of x: d/dx (x + x) = 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let s = tape.add(x, x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    #[should_panic(expected = "already consumed")]
    fn tape_is_single_use() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        tape.backward(x).unwrap();
        let _ = tape.leaf(Tensor::scalar(2.0));
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 4, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let left = tape.slice_cols(x, 0, 2).unwrap();
        let right = tape.slice_cols(x, 2, 2).unwrap();
        let back = tape.concat_cols(left, right).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn gather_out_of_range_errors() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::zeros(4, 2));
        assert!(matches!(
            tape.gather(table, &[0, 4]),
            Err(Error::TokenIdOutOfRange { id: 4, .. })
        ));
    }
}
