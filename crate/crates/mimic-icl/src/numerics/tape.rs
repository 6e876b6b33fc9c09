//! Tape-based reverse-mode differentiation.
//!
//! Operations are recorded eagerly into a linear tape; `backward` replays
//! their adjoints in reverse order. One tape per training step, single
//! threaded; gradients accumulate (sum) when a node feeds several consumers.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{
    log_sum_exp, matmul_into, matmul_ta_into, matmul_tb_into, softmax_row_in_place, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Attention mask, row-major `r×c`, `true` = position may be attended.
pub type Mask = Rc<Vec<bool>>;

/// Causal mask for `rows×cols` scores: row `i` sees columns `0..=i`.
/// When `banned_prefix_from_row` is `Some((r0, p))`, rows `>= r0` additionally
/// may not see columns `< p` (used to silence demonstration keys).
pub fn causal_mask(rows: usize, cols: usize, banned_prefix_from_row: Option<(usize, usize)>) -> Mask {
    let mut m = vec![false; rows * cols];
    for i in 0..rows {
        for j in 0..cols.min(i + 1) {
            m[i * cols + j] = true;
        }
    }
    if let Some((r0, p)) = banned_prefix_from_row {
        for i in r0..rows {
            for j in 0..p.min(cols) {
                m[i * cols + j] = false;
            }
        }
    }
    Rc::new(m)
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    /// `a·bᵀ` with `a: m×k`, `b: n×k`.
    MatMulTb { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    MulElem { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddConst { a: Var },
    /// Broadcast-add a scalar node over every element.
    AddScalar { a: Var, s: Var },
    /// Add a length-`c` vector to every row of an `r×c` tensor.
    AddRowBroadcast { a: Var, v: Var },
    /// Multiply row `i` by scalar `s_i` (`s` is `r×1` or length `r`).
    RowScale { a: Var, s: Var },
    Sigmoid { a: Var },
    Silu { a: Var },
    RmsNorm { a: Var, gain: Var, eps: f64 },
    Rope { a: Var, positions: Rc<Vec<usize>> },
    MaskedSoftmaxRows { a: Var, mask: Mask },
    /// Row-wise log-sum-exp over unmasked entries, output `r×1`.
    MaskedLogSumExpRows { a: Var, mask: Mask },
    EmbedLookup { table: Var, tokens: Rc<Vec<usize>> },
    SliceCols { a: Var, start: usize, len: usize },
    SliceRows { a: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    /// Add vector `v` to a single row of `a`.
    AddToRow { a: Var, v: Var, row: usize },
    /// Pick entries `(row, col)` into a vector.
    PickEntries { a: Var, idx: Rc<Vec<(usize, usize)>> },
    LogSoftmaxRows { a: Var },
    SumAll { a: Var },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Ordered record of primitive operations with the saved inputs their
/// adjoints need.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    /// Accumulated gradient of a node after `backward`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    fn push(&mut self, mut tensor: Tensor, op: Op, requires_grad: bool) -> Var {
        tensor.requires_grad = requires_grad;
        tensor.grad = None;
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    /// Record a leaf, keeping the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        let rg = true;
        self.push(t, Op::Leaf, rg)
    }

    /// Record a frozen leaf.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(Error::shape("tape matmul", &ta.shape, &tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&ta.data, &tb.data, m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    /// `a·bᵀ` — scores without materializing a transpose.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(Error::shape("tape matmul_tb", &ta.shape, &tb.shape));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
        let mut out = vec![0.0; m * n];
        matmul_tb_into(&ta.data, &tb.data, m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulTb { a, b }, rg))
    }

    fn zip_elementwise(
        &mut self,
        a: Var,
        b: Var,
        ctx: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape(ctx, &ta.shape, &tb.shape));
        }
        let data: Vec<f64> = ta
            .data
            .iter()
            .zip(tb.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "tape add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "tape sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise(a, b, "tape mul_elem", |x, y| x * y, Op::MulElem { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| x * c).collect(),
            grad: None,
            requires_grad: false,
        };
        let rg = self.rg(a);
        self.push(t, Op::Scale { a, c }, rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| x + c).collect(),
            grad: None,
            requires_grad: false,
        };
        let rg = self.rg(a);
        self.push(t, Op::AddConst { a }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("tape add_scalar", &self.value(s).shape, &[1]));
        }
        let sv = self.value(s).item();
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| x + sv).collect(),
            grad: None,
            requires_grad: false,
        };
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::AddScalar { a, s }, rg))
    }

    pub fn add_row_broadcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (self.value(a), self.value(v));
        let c = ta.cols();
        if tv.numel() != c {
            return Err(Error::shape("tape add_row_broadcast", &ta.shape, &tv.shape));
        }
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(tv.data.iter()) {
                *x += b;
            }
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRowBroadcast { a, v }, rg))
    }

    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        let r = ta.rows();
        if ts.numel() != r {
            return Err(Error::shape("tape row_scale", &ta.shape, &ts.shape));
        }
        let c = ta.cols();
        let mut data = ta.data.clone();
        for (i, row) in data.chunks_mut(c).enumerate() {
            let sv = ts.data[i];
            for x in row.iter_mut() {
                *x *= sv;
            }
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(Tensor::new(shape, data)?, Op::RowScale { a, s }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| sigmoid(x)).collect(),
            grad: None,
            requires_grad: false,
        };
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid { a }, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|&x| x * sigmoid(x)).collect(),
            grad: None,
            requires_grad: false,
        };
        let rg = self.rg(a);
        self.push(t, Op::Silu { a }, rg)
    }

    /// RMS normalization with learned gain: `y_ij = gain_j · x_ij / rms(x_i)`.
    pub fn rms_norm(&mut self, a: Var, gain: Var, eps: f64) -> Result<Var> {
        let (ta, tg) = (self.value(a), self.value(gain));
        let c = ta.cols();
        if tg.numel() != c {
            return Err(Error::shape("tape rms_norm", &ta.shape, &tg.shape));
        }
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c) {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / c as f64;
            let r = (ms + eps).sqrt();
            for (x, &g) in row.iter_mut().zip(tg.data.iter()) {
                *x = g * *x / r;
            }
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(gain);
        Ok(self.push(Tensor::new(shape, data)?, Op::RmsNorm { a, gain, eps }, rg))
    }

    /// Rotary position encoding: rotate consecutive dimension pairs of each
    /// row by position-dependent angles. `a` is `l×d` with even `d`.
    pub fn rope(&mut self, a: Var, positions: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (l, d) = (ta.rows(), ta.cols());
        if d % 2 != 0 || positions.len() != l {
            return Err(Error::shape("tape rope", &ta.shape, &[positions.len()]));
        }
        let mut data = ta.data.clone();
        for (i, row) in data.chunks_mut(d).enumerate() {
            rope_row(row, positions[i], false);
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Rope {
                a,
                positions: Rc::new(positions.to_vec()),
            },
            rg,
        ))
    }

    /// Softmax over unmasked entries of each row; masked entries become 0.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if mask.len() != r * c {
            return Err(Error::shape("tape masked_softmax_rows", &ta.shape, &[mask.len()]));
        }
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            masked_softmax_row(&ta.data[i * c..(i + 1) * c], &mask[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c])?;
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::MaskedSoftmaxRows { a, mask: Rc::clone(mask) },
            rg,
        ))
    }

    /// Softmax over every entry of each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.cols() == 0 {
            return Err(Error::EmptyInput("softmax_rows"));
        }
        let mask: Mask = Rc::new(vec![true; ta.numel()]);
        self.masked_softmax_rows(a, &mask)
    }

    /// Row-wise log-sum-exp over unmasked entries; output is `r×1`.
    pub fn masked_logsumexp_rows(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if mask.len() != r * c {
            return Err(Error::shape("tape masked_logsumexp_rows", &ta.shape, &[mask.len()]));
        }
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let vals: Vec<f64> = (0..c)
                .filter(|&j| mask[i * c + j])
                .map(|j| ta.data[i * c + j])
                .collect();
            out.push(log_sum_exp(&vals)?);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![r, 1], out)?,
            Op::MaskedLogSumExpRows { a, mask: Rc::clone(mask) },
            rg,
        ))
    }

    /// Gather embedding rows for a token sequence: `table: vocab×d`.
    pub fn embed_lookup(&mut self, table: Var, tokens: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            if tok >= vocab {
                return Err(Error::config(format!("token id {tok} out of vocab {vocab}")));
            }
            data.extend_from_slice(tt.row(tok));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![tokens.len(), d], data)?,
            Op::EmbedLookup {
                table,
                tokens: Rc::new(tokens.to_vec()),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if start + len > c {
            return Err(Error::shape("tape slice_cols", &ta.shape, &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ta.data[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { a, start, len }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if start + len > r {
            return Err(Error::shape("tape slice_rows", &ta.shape, &[start, len]));
        }
        let data = ta.data[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows { a, start, len }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols"));
        }
        let r = self.value(parts[0]).rows();
        let total_c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for &p in parts {
                let tp = self.value(p);
                if tp.rows() != r {
                    return Err(Error::shape("tape concat_cols", &[r], &tp.shape));
                }
                data.extend_from_slice(tp.row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![r, total_c], data)?,
            Op::ConcatCols { parts: parts.to_vec() },
            rg,
        ))
    }

    /// Add vector `v` to one row of `a`.
    pub fn add_to_row(&mut self, a: Var, v: Var, row: usize) -> Result<Var> {
        let (ta, tv) = (self.value(a), self.value(v));
        let c = ta.cols();
        if tv.numel() != c || row >= ta.rows() {
            return Err(Error::shape("tape add_to_row", &ta.shape, &tv.shape));
        }
        let mut data = ta.data.clone();
        for (x, &b) in data[row * c..(row + 1) * c].iter_mut().zip(tv.data.iter()) {
            *x += b;
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddToRow { a, v, row }, rg))
    }

    pub fn pick_entries(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(idx.len());
        for &(i, j) in idx {
            if i >= r || j >= c {
                return Err(Error::shape("tape pick_entries", &ta.shape, &[i, j]));
            }
            data.push(ta.at(i, j));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::vector(data),
            Op::PickEntries { a, idx: Rc::new(idx.to_vec()) },
            rg,
        ))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if c == 0 {
            return Err(Error::EmptyInput("log_softmax_rows"));
        }
        let mut data = ta.data.clone();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row)?;
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let shape = ta.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::LogSoftmaxRows { a }, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Accumulate gradients of `loss` into every reachable `requires_grad`
    /// node. `loss` must be scalar.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape("backward: loss must be scalar", &self.value(loss).shape, &[1]));
        }
        if !self.value(loss).item().is_finite() {
            return Err(Error::NonFinite("backward loss"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].tensor.requires_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.adjoint(id, &g, &mut grads)?;
            // Commit into the node's own accumulator.
            let node = &mut self.nodes[id];
            match &mut node.tensor.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].tensor.requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].tensor.numel()]);
        }
        add(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn adjoint(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                self.accum(grads, a, |da| matmul_tb_into(g, &tb.data, m, n, k, da));
                self.accum(grads, b, |db| matmul_ta_into(&ta.data, g, k, m, n, db));
            }
            Op::MatMulTb { a, b } => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                self.accum(grads, a, |da| matmul_into(g, &tb.data, m, n, k, da));
                self.accum(grads, b, |db| matmul_ta_into(g, &ta.data, n, m, k, db));
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(grads, a, |da| axpy(da, g, 1.0));
                self.accum(grads, b, |db| axpy(db, g, 1.0));
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                self.accum(grads, a, |da| axpy(da, g, 1.0));
                self.accum(grads, b, |db| axpy(db, g, -1.0));
            }
            Op::MulElem { a, b } => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (self.value(a), self.value(b));
                self.accum(grads, a, |da| {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(tb.data.iter()) {
                        *d += gv * bv;
                    }
                });
                self.accum(grads, b, |db| {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ta.data.iter()) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                self.accum(grads, a, |da| axpy(da, g, c));
            }
            Op::AddConst { a } => {
                let a = *a;
                self.accum(grads, a, |da| axpy(da, g, 1.0));
            }
            Op::AddScalar { a, s } => {
                let (a, s) = (*a, *s);
                self.accum(grads, a, |da| axpy(da, g, 1.0));
                self.accum(grads, s, |ds| ds[0] += g.iter().sum::<f64>());
            }
            Op::AddRowBroadcast { a, v } => {
                let (a, v) = (*a, *v);
                let c = self.value(v).numel();
                self.accum(grads, a, |da| axpy(da, g, 1.0));
                self.accum(grads, v, |dv| {
                    for row in g.chunks(c) {
                        for (d, &gv) in dv.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::RowScale { a, s } => {
                let (a, s) = (*a, *s);
                let (ta, ts) = (self.value(a), self.value(s));
                let c = ta.cols();
                self.accum(grads, a, |da| {
                    for (i, (drow, grow)) in da.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let sv = ts.data[i];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d += gv * sv;
                        }
                    }
                });
                self.accum(grads, s, |ds| {
                    for (i, (arow, grow)) in ta.data.chunks(c).zip(g.chunks(c)).enumerate() {
                        ds[i] += arow.iter().zip(grow).map(|(&x, &gv)| x * gv).sum::<f64>();
                    }
                });
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let ty = &self.nodes[id].tensor;
                self.accum(grads, a, |da| {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(ty.data.iter()) {
                        *d += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Silu { a } => {
                let a = *a;
                let ta = self.value(a);
                self.accum(grads, a, |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(g).zip(ta.data.iter()) {
                        let s = sigmoid(x);
                        *d += gv * s * (1.0 + x * (1.0 - s));
                    }
                });
            }
            Op::RmsNorm { a, gain, eps } => {
                let (a, gain, eps) = (*a, *gain, *eps);
                let ta = self.value(a);
                let tg = self.value(gain);
                let c = ta.cols();
                self.accum(grads, a, |da| {
                    for ((xrow, grow), drow) in
                        ta.data.chunks(c).zip(g.chunks(c)).zip(da.chunks_mut(c))
                    {
                        let ms = xrow.iter().map(|x| x * x).sum::<f64>() / c as f64;
                        let r = (ms + eps).sqrt();
                        let dot: f64 = (0..c).map(|j| grow[j] * tg.data[j] * xrow[j]).sum();
                        for j in 0..c {
                            drow[j] +=
                                grow[j] * tg.data[j] / r - xrow[j] * dot / (c as f64 * r * r * r);
                        }
                    }
                });
                self.accum(grads, gain, |dg| {
                    for (xrow, grow) in ta.data.chunks(c).zip(g.chunks(c)) {
                        let ms = xrow.iter().map(|x| x * x).sum::<f64>() / c as f64;
                        let r = (ms + eps).sqrt();
                        for j in 0..c {
                            dg[j] += grow[j] * xrow[j] / r;
                        }
                    }
                });
            }
            Op::Rope { a, positions } => {
                let a = *a;
                let positions = Rc::clone(positions);
                let d = self.value(a).cols();
                self.accum(grads, a, |da| {
                    for (i, (drow, grow)) in da.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        let mut inv = grow.to_vec();
                        rope_row(&mut inv, positions[i], true);
                        for (dv, gv) in drow.iter_mut().zip(inv) {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::MaskedSoftmaxRows { a, mask } => {
                let a = *a;
                let mask = Rc::clone(mask);
                let ty = &self.nodes[id].tensor;
                let c = ty.cols();
                self.accum(grads, a, |da| {
                    for (i, (yrow, grow)) in ty.data.chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: f64 = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                        for j in 0..c {
                            if mask[i * c + j] {
                                da[i * c + j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedLogSumExpRows { a, mask } => {
                let a = *a;
                let mask = Rc::clone(mask);
                let ta = self.value(a);
                let c = ta.cols();
                self.accum(grads, a, |da| {
                    for (i, xrow) in ta.data.chunks(c).enumerate() {
                        let mut sm = vec![0.0; c];
                        // softmax over unmasked entries of this row
                        masked_softmax_row(xrow, &mask[i * c..(i + 1) * c], &mut sm)
                            .expect("row was valid in forward");
                        for j in 0..c {
                            da[i * c + j] += g[i] * sm[j];
                        }
                    }
                });
            }
            Op::EmbedLookup { table, tokens } => {
                let table = *table;
                let tokens = Rc::clone(tokens);
                let d = self.value(table).cols();
                self.accum(grads, table, |dt| {
                    for (i, &tok) in tokens.iter().enumerate() {
                        for j in 0..d {
                            dt[tok * d + j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                let c = self.value(a).cols();
                let r = self.value(a).rows();
                self.accum(grads, a, |da| {
                    for i in 0..r {
                        for j in 0..len {
                            da[i * c + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::SliceRows { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                let c = self.value(a).cols();
                self.accum(grads, a, |da| {
                    da[start * c..(start + len) * c]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &gv)| *d += gv);
                });
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let r = self.nodes[id].tensor.rows();
                let total_c = self.nodes[id].tensor.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(p).cols();
                    let off = offset;
                    self.accum(grads, p, |dp| {
                        for i in 0..r {
                            for j in 0..pc {
                                dp[i * pc + j] += g[i * total_c + off + j];
                            }
                        }
                    });
                    offset += pc;
                }
            }
            Op::AddToRow { a, v, row } => {
                let (a, v, row) = (*a, *v, *row);
                let c = self.value(a).cols();
                self.accum(grads, a, |da| axpy(da, g, 1.0));
                self.accum(grads, v, |dv| {
                    for (d, &gv) in dv.iter_mut().zip(&g[row * c..(row + 1) * c]) {
                        *d += gv;
                    }
                });
            }
            Op::PickEntries { a, idx } => {
                let a = *a;
                let idx = Rc::clone(idx);
                let c = self.value(a).cols();
                self.accum(grads, a, |da| {
                    for (t, &(i, j)) in idx.iter().enumerate() {
                        da[i * c + j] += g[t];
                    }
                });
            }
            Op::LogSoftmaxRows { a } => {
                let a = *a;
                let ta = self.value(a);
                let c = ta.cols();
                self.accum(grads, a, |da| {
                    for ((xrow, grow), drow) in
                        ta.data.chunks(c).zip(g.chunks(c)).zip(da.chunks_mut(c))
                    {
                        let mut sm = xrow.to_vec();
                        softmax_row_in_place(&mut sm).expect("row was valid in forward");
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            drow[j] += grow[j] - sm[j] * gsum;
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                let a = *a;
                self.accum(grads, a, |da| {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                });
            }
        }
        Ok(())
    }
}

fn axpy(acc: &mut [f64], g: &[f64], c: f64) {
    for (a, &gv) in acc.iter_mut().zip(g) {
        *a += c * gv;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rotate dimension pairs of `row` by the rotary angles for `pos`;
/// `inverse` applies the transpose rotation (used by the adjoint).
fn rope_row(row: &mut [f64], pos: usize, inverse: bool) {
    let d = row.len();
    let half = d / 2;
    for t in 0..half {
        let theta = pos as f64 * (10_000f64).powf(-2.0 * t as f64 / d as f64);
        let (s, c) = theta.sin_cos();
        let s = if inverse { -s } else { s };
        let (x0, x1) = (row[2 * t], row[2 * t + 1]);
        row[2 * t] = x0 * c - x1 * s;
        row[2 * t + 1] = x0 * s + x1 * c;
    }
}

fn masked_softmax_row(x: &[f64], mask: &[bool], out: &mut [f64]) -> Result<()> {
    let mut mx = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if mask[j] && v > mx {
            mx = v;
        }
    }
    if !mx.is_finite() {
        return Err(if mask.iter().any(|&m| m) {
            Error::NonFinite("masked_softmax_rows")
        } else {
            Error::EmptyInput("masked_softmax_rows: fully masked row")
        });
    }
    let mut s = 0.0;
    for j in 0..x.len() {
        if mask[j] {
            let e = (x[j] - mx).exp();
            out[j] = e;
            s += e;
        } else {
            out[j] = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= s;
    }
    Ok(())
}
