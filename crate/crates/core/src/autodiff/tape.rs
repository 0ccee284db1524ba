use super::tensor::{gemm, Tensor};
use super::AutodiffError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// Second operand may be a `1 × n` row broadcast over the rows of the first.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `B × 1` column times `B × n` matrix, row-wise.
    MulCol(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    Affine(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation so that [`Tape::backward`] can replay it in
/// reverse. Nodes are appended in evaluation order, which is a topological
/// order of the graph.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }

    /// Gradient for `var`, or zeros if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = shape2(self.value(a));
        let (k2, n) = shape2(self.value(b));
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        self.push("matmul", Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = shape2(ta);
        let (mb, nb) = shape2(tb);
        if nb != n || (mb != m && mb != 1) {
            return Err(self.shape_err(name, a, b));
        }
        let bd = tb.data();
        let data: Vec<f64> = if mb == m {
            ta.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            ta.data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>())
                .collect()
        };
        Ok(Tensor::matrix(m, n, data))
    }

    /// `a + b`, with `b` optionally a `1 × n` row broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// `a - b`, with `b` optionally a `1 × n` row broadcast.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let (m, n) = shape2(self.value(a));
        self.push("mul", Tensor::matrix(m, n, data), Op::Mul(a, b), &[a, b])
    }

    /// Scales row `i` of `m` by `col[i]`.
    pub fn mul_col(&mut self, col: Var, m: Var) -> Result<Var, AutodiffError> {
        let (rows, n) = shape2(self.value(m));
        if shape2(self.value(col)) != (rows, 1) {
            return Err(self.shape_err("mul_col", col, m));
        }
        let c = self.value(col).data();
        let data = self
            .value(m)
            .data()
            .chunks(n)
            .zip(c)
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        self.push("mul_col", Tensor::matrix(rows, n, data), Op::MulCol(col, m), &[col, m])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, AutodiffError> {
        let out = self.value(a).map(f);
        self.push(name, out, op, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("sigmoid", a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("softplus", a, Op::Softplus(a), softplus)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary("square", a, Op::Square(a), |x| x * x)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, AutodiffError> {
        self.unary("affine", a, Op::Affine(a, scale), |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var, AutodiffError> {
        self.affine(a, scale, 0.0)
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::EmptyConcat)?;
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.shape_err("concat_cols", first, p));
            }
            total += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push("concat_cols", Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::EmptyConcat)?;
        let cols = self.value(first).cols();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += self.value(p).rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        self.push("concat_rows", Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let (m, n) = shape2(self.value(a));
        if start > end || end > m {
            return Err(AutodiffError::SliceOutOfRange { op: "slice_rows", start, end, len: m });
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        self.push("slice_rows", Tensor::matrix(end - start, n, data), Op::SliceRows(a, start), &[a])
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let (m, n) = shape2(self.value(a));
        if start > end || end > n {
            return Err(AutodiffError::SliceOutOfRange { op: "slice_cols", start, end, len: n });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..end].iter().copied())
            .collect();
        self.push("slice_cols", Tensor::matrix(m, end - start, data), Op::SliceCols(a, start), &[a])
    }

    /// Row `i` of the output is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let (m, n) = shape2(self.value(a));
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(AutodiffError::SliceOutOfRange { op: "gather_rows", start: bad, end: bad + 1, len: m });
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.value(a).row(i));
        }
        self.push("gather_rows", Tensor::matrix(indices.len(), n, data), Op::GatherRows(a, indices.to_vec()), &[a])
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| shape2(&n.value)).collect();
        // Only gradients flowing into grad-requiring nodes are meaningful.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = shape2(ta);
                let n = tb.cols();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, 0.0, &mut da);
                    accumulate(grads, *a, Tensor::matrix(m, k, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, 0.0, &mut db);
                    accumulate(grads, *b, Tensor::matrix(k, n, db));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    let tb = self.value(*b);
                    let db = if tb.rows() == g.rows() {
                        g.map(|v| sign * v)
                    } else {
                        let n = g.cols();
                        let mut acc = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (s, v) in acc.iter_mut().zip(row) {
                                *s += v;
                            }
                        }
                        Tensor::matrix(1, n, acc.into_iter().map(|v| sign * v).collect())
                    };
                    accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, zip_map(g, self.value(*b), |gv, bv| gv * bv));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, zip_map(g, self.value(*a), |gv, av| gv * av));
                }
            }
            Op::MulCol(col, m) => {
                let tm = self.value(*m);
                let tc = self.value(*col);
                let n = tm.cols();
                if self.wants(*col) {
                    let d: Vec<f64> = g
                        .data()
                        .chunks(n)
                        .zip(tm.data().chunks(n))
                        .map(|(gr, mr)| gr.iter().zip(mr).map(|(x, y)| x * y).sum())
                        .collect();
                    accumulate(grads, *col, Tensor::column(d));
                }
                if self.wants(*m) {
                    let d: Vec<f64> = g
                        .data()
                        .chunks(n)
                        .zip(tc.data())
                        .flat_map(|(gr, &s)| gr.iter().map(move |v| v * s))
                        .collect();
                    accumulate(grads, *m, Tensor::matrix(tm.rows(), n, d));
                }
            }
            Op::Tanh(a) => accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv))),
            Op::Sigmoid(a) => accumulate(grads, *a, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv))),
            Op::Relu(a) => {
                accumulate(grads, *a, zip_map(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }))
            }
            Op::Softplus(a) => accumulate(grads, *a, zip_map(g, self.value(*a), |gv, x| gv * sigmoid(x))),
            Op::Square(a) => accumulate(grads, *a, zip_map(g, self.value(*a), |gv, x| 2.0 * gv * x)),
            Op::Affine(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
            Op::Sum(a) => {
                let ta = self.value(*a);
                accumulate(grads, *a, Tensor::filled(ta.rows(), ta.cols(), g.item()));
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        let d: Vec<f64> = g
                            .data()
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        accumulate(grads, *p, Tensor::matrix(g.rows(), w, d));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let n = g.cols();
                let mut offset = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    if self.wants(*p) {
                        let d = g.data()[offset * n..(offset + r) * n].to_vec();
                        accumulate(grads, *p, Tensor::matrix(r, n, d));
                    }
                    offset += r;
                }
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let slot = slot(grads, *a, ta);
                let dst = &mut slot.data_mut()[start * n..start * n + g.len()];
                for (d, v) in dst.iter_mut().zip(g.data()) {
                    *d += v;
                }
            }
            Op::SliceCols(a, start) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let w = g.cols();
                let slot = slot(grads, *a, ta);
                for (row, grow) in slot.data_mut().chunks_mut(n).zip(g.data().chunks(w)) {
                    for (d, v) in row[*start..start + w].iter_mut().zip(grow) {
                        *d += v;
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                let ta = self.value(*a);
                let n = ta.cols();
                let slot = slot(grads, *a, ta);
                for (k, &i) in indices.iter().enumerate() {
                    let src = &g.data()[k * n..(k + 1) * n];
                    for (d, v) in slot.data_mut()[i * n..(i + 1) * n].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::matrix(a.rows(), a.cols(), data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
