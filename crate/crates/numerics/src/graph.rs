use std::rc::Rc;

use crate::{log_sigmoid, sigmoid, NumericsError, Result, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    Swish(Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    MaskedSoftmaxRows(Var),
    NormalizeRows { x: Var, inv_std: Vec<f64> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    ShiftRows { x: Var, shift: isize },
    RepeatRows { x: Var, times: usize },
    TileRows { x: Var, times: usize },
    GatherRows { table: Var, ids: Rc<Vec<usize>> },
    GatherFlat { src: Var, idx: Rc<Vec<usize>> },
    Pick { x: Var, at: Rc<Vec<(usize, usize)>> },
    Sum(Var),
    Mean(Var),
    Custom { parents: Vec<Var>, local: Vec<Tensor> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations in construction (topological) order.
///
/// Nodes only reference earlier nodes, so the tape is acyclic by construction
/// and the backward pass is a single reverse sweep.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that required one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn usage<T>(msg: String) -> Result<T> {
    Err(NumericsError::Usage(msg))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_of(t: Tensor) -> Result<Tensor> {
        if t.is_matrix() {
            Ok(t)
        } else {
            let (r, c) = (t.rows(), t.cols());
            t.reshape(vec![r, c])
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        let t = Self::matrix_of(t).expect("reshape to matrix preserves numel");
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = Self::matrix_of(t).expect("reshape to matrix preserves numel");
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return usage(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, k), rg)
    }

    fn check_row(&self, a: Var, row: Var, what: &str) -> Result<()> {
        let (_, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return usage(format!(
                "{what}: expected a [1×{c}] row, got {:?}",
                self.shape(row)
            ));
        }
        Ok(())
    }

    /// Adds a `[1 × c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "add_row")?;
        let (r, c) = self.shape(a);
        let b = self.value(row).data();
        let mut out = self.value(a).clone();
        for i in 0..r {
            for (o, &x) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` elementwise by a `[1 × c]` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "mul_row")?;
        let (r, c) = self.shape(a);
        let b = self.value(row).data();
        let mut out = self.value(a).clone();
        for i in 0..r {
            for (o, &x) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(b) {
                *o *= x;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::LogSigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    /// `x · σ(x)`.
    pub fn swish(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Swish(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(v, Op::Log(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_into(&x[i * c..(i + 1) * c], None, &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::matrix(r, c, out).expect("shape"),
            Op::SoftmaxRows(a),
            rg,
        )
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::matrix(r, c, out).expect("shape"),
            Op::LogSoftmaxRows(a),
            rg,
        )
    }

    /// Row softmax restricted to positions where `allowed` is true; the rest
    /// get probability exactly zero. Every row must allow at least one column.
    pub fn masked_softmax_rows(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if allowed.len() != r * c {
            return usage(format!(
                "masked_softmax_rows: mask has {} entries for a [{r}×{c}] input",
                allowed.len()
            ));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let m = &allowed[i * c..(i + 1) * c];
            if !m.iter().any(|&b| b) {
                return usage(format!("masked_softmax_rows: row {i} is fully masked"));
            }
            softmax_into(&x[i * c..(i + 1) * c], Some(m), &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(r, c, out).expect("shape"),
            Op::MaskedSoftmaxRows(a),
            rg,
        ))
    }

    /// Zero-mean, unit-variance rows: `(x − μ) / sqrt(var + eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::matrix(r, c, out).expect("shape"),
            Op::NormalizeRows { x: a, inv_std },
            rg,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c || len == 0 {
            return usage(format!("slice_cols {start}+{len} out of range for {c} columns"));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(r, len, out).expect("shape"),
            Op::SliceCols { x: a, start },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r || len == 0 {
            return usage(format!("slice_rows {start}+{len} out of range for {r} rows"));
        }
        let out = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(len, c, out).expect("shape"),
            Op::SliceRows { x: a, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return usage("concat_cols of nothing".into());
        };
        let r = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            return usage("concat_cols: row counts differ".into());
        }
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(r, total, out).expect("shape"),
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return usage("concat_rows of nothing".into());
        };
        let c = self.shape(first).1;
        if parts.iter().any(|&p| self.shape(p).1 != c) {
            return usage("concat_rows: column counts differ".into());
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            rows += self.shape(p).0;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(rows, c, out).expect("shape"),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// `out[t] = a[t − shift]`, zero where `t − shift` falls outside `a`.
    pub fn shift_rows(&mut self, a: Var, shift: isize) -> Var {
        let (r, c) = self.shape(a);
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for t in 0..r {
            let src = t as isize - shift;
            if src >= 0 && (src as usize) < r {
                let s = src as usize;
                out[t * c..(t + 1) * c].copy_from_slice(&x[s * c..(s + 1) * c]);
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::matrix(r, c, out).expect("shape"),
            Op::ShiftRows { x: a, shift },
            rg,
        )
    }

    /// Each row repeated `times` times in place: `[a0, a0, a1, a1, …]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return usage("repeat_rows by zero".into());
        }
        let (r, c) = self.shape(a);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * c * times);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(&x[i * c..(i + 1) * c]);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(r * times, c, out).expect("shape"),
            Op::RepeatRows { x: a, times },
            rg,
        ))
    }

    /// Whole matrix stacked `times` times: `[a0, a1, a0, a1, …]`.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return usage("tile_rows by zero".into());
        }
        let (r, c) = self.shape(a);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * c * times);
        for _ in 0..times {
            out.extend_from_slice(x);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::matrix(r * times, c, out).expect("shape"),
            Op::TileRows { x: a, times },
            rg,
        ))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return usage(format!("gather_rows: id {bad} out of range for {r} rows"));
        }
        if ids.is_empty() {
            return usage("gather_rows with no ids".into());
        }
        let x = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(ids.len(), c, out).expect("shape"),
            Op::GatherRows {
                table,
                ids: Rc::new(ids.to_vec()),
            },
            rg,
        ))
    }

    /// Builds a `[rows × cols]` matrix whose entry `k` is `src.flat[idx[k]]`.
    pub fn gather_flat(&mut self, src: Var, idx: &[usize], rows: usize, cols: usize) -> Result<Var> {
        let n = self.value(src).numel();
        if idx.len() != rows * cols {
            return usage(format!(
                "gather_flat: {} indices for a [{rows}×{cols}] output",
                idx.len()
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return usage(format!("gather_flat: index {bad} out of range for {n} values"));
        }
        let x = self.value(src).data();
        let out: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let rg = self.rg(&[src]);
        Ok(self.push(
            Tensor::matrix(rows, cols, out).expect("shape"),
            Op::GatherFlat {
                src,
                idx: Rc::new(idx.to_vec()),
            },
            rg,
        ))
    }

    /// Selects entries `(row, col)` into a `[1 × n]` row.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.shape(a);
        if at.is_empty() {
            return usage("pick with no positions".into());
        }
        if let Some(&(i, j)) = at.iter().find(|&&(i, j)| i >= r || j >= c) {
            return usage(format!("pick: ({i}, {j}) out of range for [{r}×{c}]"));
        }
        let out: Vec<f64> = at.iter().map(|&(i, j)| self.value(a).get(i, j)).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::row(out),
            Op::Pick {
                x: a,
                at: Rc::new(at.to_vec()),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Scalar node with a caller-supplied value and local gradients
    /// `∂value/∂parent` for each parent.
    pub fn custom_scalar(&mut self, parents: &[Var], value: f64, local: Vec<Tensor>) -> Result<Var> {
        if parents.len() != local.len() {
            return usage("custom_scalar: one local gradient per parent required".into());
        }
        for (&p, g) in parents.iter().zip(&local) {
            if self.value(p).numel() != g.numel() {
                return usage(format!(
                    "custom_scalar: local gradient has {} values, parent has {}",
                    g.numel(),
                    self.value(p).numel()
                ));
            }
        }
        let rg = self.rg(parents);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Custom {
                parents: parents.to_vec(),
                local,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let (r, c) = (y.rows(), y.cols());
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip(vb, |x, y| x * y));
                self.accumulate(grads, *b, g.zip(va, |x, y| x * y));
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|x| x * k)),
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*row) {
                    self.accumulate(grads, *row, col_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let vr = self.value(*row).data();
                if self.requires_grad(*a) {
                    let mut ga = g.clone();
                    for i in 0..r {
                        for (o, &w) in ga.data_mut()[i * c..(i + 1) * c].iter_mut().zip(vr) {
                            *o *= w;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*row) {
                    let va = self.value(*a).data();
                    let mut gr = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gr[j] += g.data()[i * c + j] * va[i * c + j];
                        }
                    }
                    self.accumulate(grads, *row, Tensor::row(gr));
                }
            }
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let gb = g.matmul(&self.value(*b).transpose()).expect("shape");
                    self.accumulate(grads, *a, gb);
                }
                if self.requires_grad(*b) {
                    let ga = self.value(*a).transpose().matmul(g).expect("shape");
                    self.accumulate(grads, *b, ga);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip(y, |gi, yi| gi * (1.0 - yi * yi))),
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip(y, |gi, yi| gi * yi * (1.0 - yi))),
            Op::LogSigmoid(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip(x, |gi, xi| gi * sigmoid(-xi)));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
            }
            Op::Swish(a) => {
                let x = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    g.zip(x, |gi, xi| {
                        let s = sigmoid(xi);
                        gi * (s + xi * s * (1.0 - s))
                    }),
                );
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip(y, |gi, yi| gi * yi)),
            Op::Log(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip(x, |gi, xi| gi / xi));
            }
            Op::SoftmaxRows(a) | Op::MaskedSoftmaxRows(a) => {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, ga).expect("shape"));
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        ga[i * c + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, ga).expect("shape"));
            }
            Op::NormalizeRows { x, inv_std } => {
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        ga[i * c + j] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(r, c, ga).expect("shape"));
            }
            Op::SliceCols { x, start } => {
                let (xr, xc) = self.shape(*x);
                let mut ga = vec![0.0; xr * xc];
                for i in 0..r {
                    ga[i * xc + start..i * xc + start + c].copy_from_slice(&g.data()[i * c..(i + 1) * c]);
                }
                self.accumulate(grads, *x, Tensor::matrix(xr, xc, ga).expect("shape"));
            }
            Op::SliceRows { x, start } => {
                let (xr, xc) = self.shape(*x);
                let mut ga = vec![0.0; xr * xc];
                ga[start * xc..(start + r) * xc].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::matrix(xr, xc, ga).expect("shape"));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            gp.extend_from_slice(&g.data()[i * c + offset..i * c + offset + pc]);
                        }
                        self.accumulate(grads, p, Tensor::matrix(r, pc, gp).expect("shape"));
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pr = self.shape(p).0;
                    if self.requires_grad(p) {
                        let gp = g.data()[offset * c..(offset + pr) * c].to_vec();
                        self.accumulate(grads, p, Tensor::matrix(pr, c, gp).expect("shape"));
                    }
                    offset += pr;
                }
            }
            Op::ShiftRows { x, shift } => {
                let mut ga = vec![0.0; r * c];
                for t in 0..r {
                    let src = t as isize - shift;
                    if src >= 0 && (src as usize) < r {
                        let s = src as usize;
                        ga[s * c..(s + 1) * c].copy_from_slice(&g.data()[t * c..(t + 1) * c]);
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(r, c, ga).expect("shape"));
            }
            Op::RepeatRows { x, times } => {
                let xr = r / times;
                let mut ga = vec![0.0; xr * c];
                for i in 0..xr {
                    for k in 0..*times {
                        let src = &g.data()[(i * times + k) * c..(i * times + k + 1) * c];
                        for (o, &v) in ga[i * c..(i + 1) * c].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(xr, c, ga).expect("shape"));
            }
            Op::TileRows { x, times } => {
                let xr = r / times;
                let mut ga = vec![0.0; xr * c];
                for k in 0..*times {
                    let block = &g.data()[k * xr * c..(k + 1) * xr * c];
                    for (o, &v) in ga.iter_mut().zip(block) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::matrix(xr, c, ga).expect("shape"));
            }
            Op::GatherRows { table, ids } => {
                let (tr, tc) = self.shape(*table);
                let mut ga = vec![0.0; tr * tc];
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..tc {
                        ga[i * tc + j] += g.data()[k * tc + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::matrix(tr, tc, ga).expect("shape"));
            }
            Op::GatherFlat { src, idx } => {
                let (sr, sc) = self.shape(*src);
                let mut ga = vec![0.0; sr * sc];
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g.data()[k];
                }
                self.accumulate(grads, *src, Tensor::matrix(sr, sc, ga).expect("shape"));
            }
            Op::Pick { x, at } => {
                let (xr, xc) = self.shape(*x);
                let mut ga = vec![0.0; xr * xc];
                for (k, &(i, j)) in at.iter().enumerate() {
                    ga[i * xc + j] += g.data()[k];
                }
                self.accumulate(grads, *x, Tensor::matrix(xr, xc, ga).expect("shape"));
            }
            Op::Sum(a) => {
                let (ar, ac) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(ar, ac, g.data()[0]));
            }
            Op::Mean(a) => {
                let (ar, ac) = self.shape(*a);
                let n = (ar * ac) as f64;
                self.accumulate(grads, *a, Tensor::full(ar, ac, g.data()[0] / n));
            }
            Op::Custom { parents, local } => {
                let s = g.data()[0];
                for (&p, l) in parents.iter().zip(local) {
                    let (pr, pc) = self.shape(p);
                    let gp = Tensor::matrix(pr, pc, l.data().iter().map(|v| v * s).collect()).expect("shape");
                    self.accumulate(grads, p, gp);
                }
            }
        }
    }
}

fn col_sums(g: &Tensor) -> Tensor {
    let (r, c) = (g.rows(), g.cols());
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, &v) in out.iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
            *o += v;
        }
    }
    Tensor::row(out)
}

fn softmax_into(x: &[f64], allowed: Option<&[bool]>, out: &mut [f64]) {
    let ok = |j: usize| allowed.is_none_or(|m| m[j]);
    let mut m = f64::NEG_INFINITY;
    for (j, &v) in x.iter().enumerate() {
        if ok(j) {
            m = m.max(v);
        }
    }
    let mut s = 0.0;
    for (j, &v) in x.iter().enumerate() {
        out[j] = if ok(j) { (v - m).exp() } else { 0.0 };
        s += out[j];
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_first_component_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![0.0, 0.0]));
        let s = g.softmax_rows(x);
        let first = g.pick(s, &[(0, 0)]).unwrap();
        let out = g.sum(first);
        let grads = g.backward(out).unwrap();
        let d = grads.get(x).unwrap().data();
        assert!((d[0] - 0.25).abs() < 1e-15);
        assert!((d[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(NumericsError::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let k = g.constant(Tensor::row(vec![3.0, 4.0]));
        let y = g.mul(x, k).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(k).is_none());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum(x + x) → gradient 2 everywhere
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, -1.0, 5.0]));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.5, 0.5, 9.0]).unwrap());
        let y = g
            .masked_softmax_rows(x, &[true, true, false, true, false, false])
            .unwrap();
        let v = g.value(y).data();
        assert_eq!(v[2], 0.0);
        assert_eq!(v[4], 0.0);
        assert_eq!(v[3], 1.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
        assert!(g.masked_softmax_rows(x, &[false; 6]).is_err());
    }

    #[test]
    fn shift_and_repeat_shapes() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.shift_rows(x, 1);
        assert_eq!(g.value(s).data(), &[0.0, 1.0, 2.0]);
        let s = g.shift_rows(x, -2);
        assert_eq!(g.value(s).data(), &[3.0, 0.0, 0.0]);
        let r = g.repeat_rows(x, 2).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let t = g.tile_rows(x, 2).unwrap();
        assert_eq!(g.value(t).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }
}
