use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Exponential arguments below this are clamped before `exp` so kernels
/// and softmaxes bottom out at a normal float instead of a denormal.
pub const EXP_ARG_FLOOR: f64 = -700.0;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Neg(NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    SoftmaxCols { x: NodeId, temperature: f64 },
    LogSoftmaxCols { x: NodeId },
    MaxOverTime { x: NodeId, argmax: Vec<usize> },
    LstmCell {
        pre: NodeId,
        c_prev: NodeId,
        hidden: usize,
        /// Activated gates (i, f, o, g) saved from the forward pass.
        gates: Tensor,
        /// tanh of the new cell state, saved from the forward pass.
        tanh_c: Tensor,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    GatherCols { x: NodeId, ids: Vec<usize> },
    AddColVec { m: NodeId, v: NodeId },
    Unfold { x: NodeId, width: usize },
    ColNormsFloored { x: NodeId, floor: f64 },
    ScaleColsInv { x: NodeId, norms: NodeId },
    PickEntries { x: NodeId, rows: Vec<usize> },
    FrobDot(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass, keyed by leaf name.
#[derive(Debug, Clone)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn scale_in_place(&mut self, scale: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }

    /// Zero one column of a named gradient (the PAD-pinning hook).
    pub fn zero_column(&mut self, name: &str, col: usize) {
        if let Some(t) = self.map.get_mut(name) {
            let cols = t.cols();
            for i in 0..t.rows() {
                t.data_mut()[i * cols + col] = 0.0;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Reverse-mode differentiation tape over dense tensor ops.
///
/// The tape is rebuilt for every training step: the recurrent unroll
/// length is a config value, so a dynamic graph is the simplest thing
/// that works. Node order is construction order, which is a valid
/// topological order by construction. A tape is single-writer; share
/// only the tensors it hands back.
pub struct Tape {
    nodes: Vec<Node>,
    leaves: Vec<(String, NodeId)>,
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
            leaves: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {:?}",
                op
            )));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        Ok(id)
    }

    /// Register a named parameter leaf. Gradients are reported per name.
    pub fn leaf(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self.leaves.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!("duplicate leaf name {name:?}")));
        }
        let id = self.push(value, Op::Leaf)?;
        self.leaves.push((name.to_string(), id));
        Ok(id)
    }

    /// Register a constant. Constants never receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Const)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y)?;
        self.push(v, Op::MulElem(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| x * c);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.transpose()?;
        self.push(v, Op::Transpose(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(|x| 1.0 / (1.0 + (-x).max(EXP_ARG_FLOOR).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// Column-wise softmax with temperature. A vector is one column.
    /// Max-subtraction keeps the exponentials in range.
    pub fn softmax(&mut self, a: NodeId, temperature: f64) -> Result<NodeId> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::Param(format!(
                "softmax temperature must be > 0, got {temperature}"
            )));
        }
        let x = &self.nodes[a.0].value;
        let v = softmax_cols(x, temperature)?;
        self.push(v, Op::SoftmaxCols { x: a, temperature })
    }

    /// Column-wise log-softmax (unit temperature); used for NLL terms.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let x = &self.nodes[a.0].value;
        let (rows, cols) = matrix_dims(x)?;
        let mut out = x.clone();
        for j in 0..cols {
            let mut m = f64::NEG_INFINITY;
            for i in 0..rows {
                m = m.max(x.data()[i * cols + j]);
            }
            let mut z = 0.0;
            for i in 0..rows {
                z += (x.data()[i * cols + j] - m).max(EXP_ARG_FLOOR).exp();
            }
            let lz = m + z.ln();
            for i in 0..rows {
                out.data_mut()[i * cols + j] = x.data()[i * cols + j] - lz;
            }
        }
        self.push(out, Op::LogSoftmaxCols { x: a })
    }

    /// Per-row maximum over the time axis of a `rows x time` map.
    /// Ties resolve to the lowest time index, and the backward pass sends
    /// the row's gradient only there.
    pub fn max_over_time(&mut self, a: NodeId) -> Result<NodeId> {
        let x = &self.nodes[a.0].value;
        if !x.is_matrix() {
            return Err(Error::Dim(format!(
                "max_over_time expects a matrix, got {:?}",
                x.shape()
            )));
        }
        let (rows, time) = (x.shape()[0], x.shape()[1]);
        if time == 0 {
            return Err(Error::Dim("max_over_time over empty time axis".into()));
        }
        let mut vals = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = x.row(i);
            let mut best = row[0];
            let mut at = 0;
            for (t, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    at = t;
                }
            }
            vals.push(best);
            argmax.push(at);
        }
        self.push(Tensor::vector(vals), Op::MaxOverTime { x: a, argmax })
    }

    /// One fused LSTM cell: `pre` is the stacked gate preactivation
    /// `[i; f; o; g]` of shape `4h x n`, `c_prev` the previous cell
    /// state. Returns `[h_t; c_t]` stacked as a `2h x n` tensor (split
    /// it with [`Tape::slice_rows`]). Fusing the gate math into one op
    /// keeps the recurrent inner loop from drowning in per-gate nodes.
    pub fn lstm_cell(&mut self, pre: NodeId, c_prev: NodeId, hidden: usize) -> Result<NodeId> {
        let p = &self.nodes[pre.0].value;
        let c_in = &self.nodes[c_prev.0].value;
        if !p.is_matrix() || p.shape()[0] != 4 * hidden {
            return Err(Error::Dim(format!(
                "gate preactivation must be {} x n, got {:?}",
                4 * hidden,
                p.shape()
            )));
        }
        let n = p.shape()[1];
        if c_in.shape() != [hidden, n] {
            return Err(Error::Dim(format!(
                "cell state must be {hidden} x {n}, got {:?}",
                c_in.shape()
            )));
        }
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).max(EXP_ARG_FLOOR).exp());
        let mut gates = Tensor::zeros(&[4 * hidden, n]);
        let mut tanh_c = Tensor::zeros(&[hidden, n]);
        let mut out = Tensor::zeros(&[2 * hidden, n]);
        for r in 0..hidden {
            for j in 0..n {
                let i_g = sigmoid(p.at(r, j));
                let f_g = sigmoid(p.at(hidden + r, j));
                let o_g = sigmoid(p.at(2 * hidden + r, j));
                let g_c = p.at(3 * hidden + r, j).tanh();
                let c_new = f_g * c_in.at(r, j) + i_g * g_c;
                let tc = c_new.tanh();
                gates.set(r, j, i_g);
                gates.set(hidden + r, j, f_g);
                gates.set(2 * hidden + r, j, o_g);
                gates.set(3 * hidden + r, j, g_c);
                tanh_c.set(r, j, tc);
                out.set(r, j, o_g * tc);
                out.set(hidden + r, j, c_new);
            }
        }
        self.push(
            out,
            Op::LstmCell {
                pre,
                c_prev,
                hidden,
                gates,
                tanh_c,
            },
        )
    }

    /// Stack along axis 0. Vectors stack to a longer vector.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_rows of zero tensors".into()));
        }
        let first = &self.nodes[parts[0].0].value;
        let rank = first.shape().len();
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape().len() != rank || t.cols() != cols {
                return Err(Error::Dim(format!(
                    "concat_rows of {:?} with {:?}",
                    first.shape(),
                    t.shape()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let shape = if rank == 1 { vec![rows] } else { vec![rows, cols] };
        self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()))
    }

    /// Stack vectors (or matrices) along axis 1. A rank-1 input of length
    /// `d` contributes one column.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_cols of zero tensors".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total_cols = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != rows {
                return Err(Error::Dim(format!(
                    "concat_cols row mismatch: {} vs {}",
                    rows,
                    t.rows()
                )));
            }
            total_cols += t.cols();
        }
        let mut out = Tensor::zeros(&[rows, total_cols]);
        let mut at = 0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            let c = t.cols();
            for i in 0..rows {
                for j in 0..c {
                    let v = if t.is_matrix() { t.at(i, j) } else { t.data()[i] };
                    out.set(i, at + j, v);
                }
            }
            at += c;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let x = &self.nodes[a.0].value;
        if end <= start || end > x.rows() {
            return Err(Error::Dim(format!(
                "slice_rows {start}..{end} of {:?}",
                x.shape()
            )));
        }
        let cols = x.cols();
        let data = x.data()[start * cols..end * cols].to_vec();
        let shape = if x.is_matrix() {
            vec![end - start, cols]
        } else {
            vec![end - start]
        };
        self.push(Tensor::new(shape, data)?, Op::SliceRows { x: a, start })
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let x = &self.nodes[a.0].value;
        if !x.is_matrix() || end <= start || end > x.cols() {
            return Err(Error::Dim(format!(
                "slice_cols {start}..{end} of {:?}",
                x.shape()
            )));
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for i in 0..rows {
            data.extend_from_slice(&x.data()[i * cols + start..i * cols + end]);
        }
        self.push(Tensor::new(vec![rows, w], data)?, Op::SliceCols { x: a, start })
    }

    /// Column gather: output column `t` is column `ids[t]` of the input.
    /// This is embedding lookup; the backward pass scatter-adds, so the
    /// gradient of a sum over repeated ids is an occurrence count.
    pub fn gather_cols(&mut self, a: NodeId, ids: &[usize]) -> Result<NodeId> {
        let x = &self.nodes[a.0].value;
        if !x.is_matrix() {
            return Err(Error::Dim(format!(
                "gather_cols expects a matrix, got {:?}",
                x.shape()
            )));
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= cols) {
            return Err(Error::Dim(format!(
                "gather id {bad} out of range for {cols} columns"
            )));
        }
        let mut out = Tensor::zeros(&[rows, ids.len()]);
        for (t, &id) in ids.iter().enumerate() {
            for i in 0..rows {
                out.set(i, t, x.at(i, id));
            }
        }
        self.push(out, Op::GatherCols { x: a, ids: ids.to_vec() })
    }

    /// Add a length-`rows` vector to every column of a matrix.
    pub fn add_col_vec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (mat, vec) = (&self.nodes[m.0].value, &self.nodes[v.0].value);
        if !mat.is_matrix() || vec.shape().len() != 1 || vec.shape()[0] != mat.shape()[0] {
            return Err(Error::Dim(format!(
                "add_col_vec of {:?} and {:?}",
                mat.shape(),
                vec.shape()
            )));
        }
        let (rows, cols) = (mat.shape()[0], mat.shape()[1]);
        let mut out = mat.clone();
        for i in 0..rows {
            let b = vec.data()[i];
            for j in 0..cols {
                out.data_mut()[i * cols + j] += b;
            }
        }
        self.push(out, Op::AddColVec { m, v })
    }

    /// im2col over the time axis: column `t` of the output is the
    /// `rows x width` window starting at `t`, flattened row-major.
    pub fn unfold(&mut self, a: NodeId, width: usize) -> Result<NodeId> {
        let x = &self.nodes[a.0].value;
        if !x.is_matrix() {
            return Err(Error::Dim(format!(
                "unfold expects a matrix, got {:?}",
                x.shape()
            )));
        }
        let (rows, time) = (x.shape()[0], x.shape()[1]);
        if width == 0 || width > time {
            return Err(Error::Dim(format!(
                "window width {width} does not fit time axis {time}"
            )));
        }
        let span = time - width + 1;
        let mut out = Tensor::zeros(&[rows * width, span]);
        for t in 0..span {
            for i in 0..rows {
                for w in 0..width {
                    out.set(i * width + w, t, x.at(i, t + w));
                }
            }
        }
        self.push(out, Op::Unfold { x: a, width })
    }

    /// Column L2 norms with a floor. When a column's norm sits at the
    /// floor, the floor wins the max and the backward pass treats the
    /// output as constant in that column.
    pub fn col_norms_floored(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        let x = &self.nodes[a.0].value;
        let (rows, cols) = matrix_dims(x)?;
        let mut norms = Vec::with_capacity(cols);
        for j in 0..cols {
            let mut s = 0.0;
            for i in 0..rows {
                let v = x.data()[i * cols + j];
                s += v * v;
            }
            norms.push(s.sqrt().max(floor));
        }
        self.push(Tensor::vector(norms), Op::ColNormsFloored { x: a, floor })
    }

    /// Divide each column by its entry in a length-`cols` vector.
    pub fn scale_cols_inv(&mut self, a: NodeId, norms: NodeId) -> Result<NodeId> {
        let x = &self.nodes[a.0].value;
        let s = &self.nodes[norms.0].value;
        let (rows, cols) = matrix_dims(x)?;
        if s.shape() != [cols] {
            return Err(Error::Dim(format!(
                "scale_cols_inv of {:?} by {:?}",
                x.shape(),
                s.shape()
            )));
        }
        let mut out = x.clone();
        for i in 0..rows {
            for j in 0..cols {
                out.data_mut()[i * cols + j] /= s.data()[j];
            }
        }
        self.push(out, Op::ScaleColsInv { x: a, norms })
    }

    /// Pick one entry per column: output `j` is `x[rows[j], j]`.
    pub fn pick_entries(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let x = &self.nodes[a.0].value;
        let (r, cols) = matrix_dims(x)?;
        if rows.len() != cols {
            return Err(Error::Dim(format!(
                "pick_entries wants {cols} row indices, got {}",
                rows.len()
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Dim(format!("row index {bad} out of range for {r} rows")));
        }
        let picked = rows
            .iter()
            .enumerate()
            .map(|(j, &i)| x.at(i, j))
            .collect::<Vec<_>>();
        self.push(Tensor::vector(picked), Op::PickEntries { x: a, rows: rows.to_vec() })
    }

    /// Frobenius dot-product, reduced to a scalar node.
    pub fn frob_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.frob_dot(&self.nodes[b.0].value)?;
        self.push(Tensor::scalar(v), Op::FrobDot(a, b))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.sum();
        self.push(Tensor::scalar(v), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = &self.nodes[a.0].value;
        let v = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(v), Op::Mean(a))
    }

    /// Reverse pass from a scalar loss. Every registered leaf appears in
    /// the result; leaves the loss does not reach get zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf | Op::Const) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads)?;
        }

        let mut map = BTreeMap::new();
        for (name, id) in &self.leaves {
            let g = grads[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape()));
            if map.insert(name.clone(), g).is_some() {
                return Err(Error::Contract(format!("duplicate leaf {name:?}")));
            }
        }
        Ok(Gradients { map })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scale(-1.0));
            }
            Op::MulElem(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y)?);
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y)?);
            }
            Op::Neg(a) => accumulate(grads, *a, g.scale(-1.0)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, c) => accumulate(grads, *a, g.scale(*c)),
            Op::MatMul(a, b) => {
                let da = g.matmul_nt(val(*b))?;
                let db = val(*a).matmul_tn(g)?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()?),
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))?);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                accumulate(grads, *a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))?);
            }
            Op::Abs(a) => {
                let x = val(*a);
                accumulate(grads, *a, g.zip_map(x, |gi, xi| gi * sign(xi))?);
            }
            Op::SoftmaxCols { x, temperature } => {
                let y = &self.nodes[i].value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(y.shape());
                for j in 0..cols {
                    let mut dot = 0.0;
                    for r in 0..rows {
                        dot += g.data()[r * cols + j] * y.data()[r * cols + j];
                    }
                    for r in 0..rows {
                        let idx = r * cols + j;
                        dx.data_mut()[idx] =
                            y.data()[idx] * (g.data()[idx] - dot) / temperature;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LogSoftmaxCols { x } => {
                let y = &self.nodes[i].value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(y.shape());
                for j in 0..cols {
                    let mut colsum = 0.0;
                    for r in 0..rows {
                        colsum += g.data()[r * cols + j];
                    }
                    for r in 0..rows {
                        let idx = r * cols + j;
                        dx.data_mut()[idx] = g.data()[idx] - y.data()[idx].exp() * colsum;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LstmCell {
                pre,
                c_prev,
                hidden,
                gates,
                tanh_c,
            } => {
                let h = *hidden;
                let n = gates.shape()[1];
                let c_in = val(*c_prev);
                let mut dpre = Tensor::zeros(&[4 * h, n]);
                let mut dc_prev = Tensor::zeros(&[h, n]);
                for r in 0..h {
                    for j in 0..n {
                        let i_g = gates.at(r, j);
                        let f_g = gates.at(h + r, j);
                        let o_g = gates.at(2 * h + r, j);
                        let g_c = gates.at(3 * h + r, j);
                        let tc = tanh_c.at(r, j);
                        let gh = g.at(r, j);
                        let gc_out = g.at(h + r, j);

                        let d_o = gh * tc;
                        let dc = gc_out + gh * o_g * (1.0 - tc * tc);
                        dpre.set(r, j, dc * g_c * i_g * (1.0 - i_g));
                        dpre.set(h + r, j, dc * c_in.at(r, j) * f_g * (1.0 - f_g));
                        dpre.set(2 * h + r, j, d_o * o_g * (1.0 - o_g));
                        dpre.set(3 * h + r, j, dc * i_g * (1.0 - g_c * g_c));
                        dc_prev.set(r, j, dc * f_g);
                    }
                }
                accumulate(grads, *pre, dpre);
                accumulate(grads, *c_prev, dc_prev);
            }
            Op::MaxOverTime { x, argmax } => {
                let xin = val(*x);
                let mut dx = Tensor::zeros(xin.shape());
                for (r, &t) in argmax.iter().enumerate() {
                    dx.set(r, t, g.data()[r]);
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let cols = self.nodes[i].value.cols();
                let mut at = 0;
                for &p in parts {
                    let t = val(p);
                    let rows = t.rows();
                    let data = g.data()[at * cols..(at + rows) * cols].to_vec();
                    accumulate(grads, p, Tensor::new(t.shape().to_vec(), data)?);
                    at += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let out = &self.nodes[i].value;
                let (rows, cols) = (out.shape()[0], out.shape()[1]);
                let mut at = 0;
                for &p in parts {
                    let t = val(p);
                    let w = t.cols();
                    let mut dp = Tensor::zeros(t.shape());
                    for r in 0..rows {
                        for j in 0..w {
                            let gv = g.data()[r * cols + at + j];
                            if t.is_matrix() {
                                dp.set(r, j, gv);
                            } else {
                                dp.data_mut()[r] = gv;
                            }
                        }
                    }
                    accumulate(grads, p, dp);
                    at += w;
                }
            }
            Op::SliceRows { x, start } => {
                let xin = val(*x);
                let cols = xin.cols();
                let mut dx = Tensor::zeros(xin.shape());
                let len = g.numel();
                dx.data_mut()[start * cols..start * cols + len].copy_from_slice(g.data());
                accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start } => {
                let xin = val(*x);
                let (rows, w) = (g.shape()[0], g.shape()[1]);
                let mut dx = Tensor::zeros(xin.shape());
                for r in 0..rows {
                    for j in 0..w {
                        dx.set(r, start + j, g.at(r, j));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::GatherCols { x, ids } => {
                let xin = val(*x);
                let rows = xin.shape()[0];
                let mut dx = Tensor::zeros(xin.shape());
                for (t, &id) in ids.iter().enumerate() {
                    for r in 0..rows {
                        let v = dx.at(r, id) + g.at(r, t);
                        dx.set(r, id, v);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::AddColVec { m, v } => {
                accumulate(grads, *m, g.clone());
                let (rows, cols) = (g.shape()[0], g.shape()[1]);
                let mut dv = vec![0.0; rows];
                for (r, dvr) in dv.iter_mut().enumerate() {
                    for j in 0..cols {
                        *dvr += g.data()[r * cols + j];
                    }
                }
                accumulate(grads, *v, Tensor::vector(dv));
            }
            Op::Unfold { x, width } => {
                let xin = val(*x);
                let rows = xin.shape()[0];
                let span = g.shape()[1];
                let mut dx = Tensor::zeros(xin.shape());
                for t in 0..span {
                    for r in 0..rows {
                        for w in 0..*width {
                            let v = dx.at(r, t + w) + g.at(r * width + w, t);
                            dx.set(r, t + w, v);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ColNormsFloored { x, floor } => {
                let xin = val(*x);
                let (rows, cols) = (xin.shape()[0], xin.shape()[1]);
                let norms = &self.nodes[i].value;
                let mut dx = Tensor::zeros(xin.shape());
                for j in 0..cols {
                    let mut raw = 0.0;
                    for r in 0..rows {
                        let v = xin.data()[r * cols + j];
                        raw += v * v;
                    }
                    let raw = raw.sqrt();
                    if raw <= *floor {
                        continue; // the floor won the max: constant branch
                    }
                    let n = norms.data()[j];
                    for r in 0..rows {
                        let idx = r * cols + j;
                        dx.data_mut()[idx] = g.data()[j] * xin.data()[idx] / n;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ScaleColsInv { x, norms } => {
                let xin = val(*x);
                let s = val(*norms);
                let (rows, cols) = (xin.shape()[0], xin.shape()[1]);
                let mut dx = Tensor::zeros(xin.shape());
                let mut ds = vec![0.0; cols];
                for j in 0..cols {
                    let sj = s.data()[j];
                    for r in 0..rows {
                        let idx = r * cols + j;
                        dx.data_mut()[idx] = g.data()[idx] / sj;
                        ds[j] -= g.data()[idx] * xin.data()[idx] / (sj * sj);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *norms, Tensor::vector(ds));
            }
            Op::PickEntries { x, rows } => {
                let xin = val(*x);
                let mut dx = Tensor::zeros(xin.shape());
                for (j, &r) in rows.iter().enumerate() {
                    let v = dx.at(r, j) + g.data()[j];
                    dx.set(r, j, v);
                }
                accumulate(grads, *x, dx);
            }
            Op::FrobDot(a, b) => {
                let gv = g.item();
                accumulate(grads, *a, val(*b).scale(gv));
                accumulate(grads, *b, val(*a).scale(gv));
            }
            Op::Sum(a) => {
                let gv = g.item();
                accumulate(grads, *a, Tensor::full(val(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let n = val(*a).numel() as f64;
                accumulate(grads, *a, Tensor::full(val(*a).shape(), g.item() / n));
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign_scaled(&contribution, 1.0),
        slot @ None => *slot = Some(contribution),
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn matrix_dims(x: &Tensor) -> Result<(usize, usize)> {
    if !x.is_matrix() {
        return Err(Error::Dim(format!("expected a matrix, got {:?}", x.shape())));
    }
    Ok((x.shape()[0], x.shape()[1]))
}

/// Column-wise softmax with temperature; vectors are one column.
pub(crate) fn softmax_cols(x: &Tensor, temperature: f64) -> Result<Tensor> {
    let rank = x.shape().len();
    if rank == 0 || rank > 2 {
        return Err(Error::Dim(format!("softmax on shape {:?}", x.shape())));
    }
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = x.clone();
    for j in 0..cols {
        let mut m = f64::NEG_INFINITY;
        for i in 0..rows {
            m = m.max(x.data()[i * cols + j] / temperature);
        }
        let mut z = 0.0;
        for i in 0..rows {
            let e = ((x.data()[i * cols + j] / temperature - m).max(EXP_ARG_FLOOR)).exp();
            out.data_mut()[i * cols + j] = e;
            z += e;
        }
        for i in 0..rows {
            out.data_mut()[i * cols + j] /= z;
        }
    }
    Ok(out)
}
