//! Reverse-mode autodiff over a linear tape.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes in reverse and accumulates vector-Jacobian products into the inputs
//! that require gradients. Matrices are row-major `[rows, cols]`; vectors are
//! stored as `[1, n]` or `[n]` and treated as a single row where that matters.

use std::collections::HashMap;

use super::tensor::{check_finite, Scalar, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    AddConst(Var),
    Scale(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Gelu(Var),
    Softmax { a: Var, cols: usize },
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    ConcatRows(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize, width: usize, rows: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Gather { a: Var, rows: Vec<Option<usize>> },
    GatherMean { a: Var, groups: Vec<Vec<usize>> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    BceWithLogits { a: Var, targets: Vec<T> },
    BoxIou { pred: Var, gt: Vec<[T; 4]> },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape. One tape per forward pass; consumed by [`Tape::backward`].
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    leaves: Vec<Var>,
}

/// Gradients produced by a backward pass, keyed by leaf.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: HashMap<Var, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; zeros-shaped leaves unreachable from the loss yield
    /// `Some(zeros)`, constants yield `None`.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(&v).map(|g| g.as_slice())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.remove(&v)
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaves: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var, NumericsError> {
        check_finite(op_name, &value)?;
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Gradients are produced for it when `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        if t.requires_grad {
            self.leaves.push(v);
        }
        v
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var, NumericsError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`, with `b` stored as `[n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (m, k) = self.rows_cols(a);
        let (br, bc) = self.rows_cols(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?} (trans_b={})", self.shape(a), self.shape(b), trans_b),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a), false, self.value(b), trans_b, T::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n, trans_b }, rg)
    }

    fn binary_check(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_check("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push("add", self.shape(a).to_vec(), out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_check("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push("sub", self.shape(a).to_vec(), out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary_check("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul(a, b), rg)
    }

    /// Adds a `[cols]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (r, cols) = self.rows_cols(a);
        if self.nodes[row.0].value.len() != cols {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", self.shape(a), self.shape(row))));
        }
        let mut out = self.value(a).to_vec();
        let rv = self.value(row);
        for i in 0..r {
            for (o, &b) in out[i * cols..(i + 1) * cols].iter_mut().zip(rv) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push("add_row", self.shape(a).to_vec(), out, Op::AddRow { a, row }, rg)
    }

    /// Adds a constant (non-differentiable) tensor of identical shape.
    pub fn add_const(&mut self, a: Var, k: &[T]) -> Result<Var, NumericsError> {
        if k.len() != self.value(a).len() {
            return Err(shape_err("add_const", format!("{:?} + {} values", self.shape(a), k.len())));
        }
        check_finite("add_const", k)?;
        let out = self.value(a).iter().zip(k).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a);
        self.push("add_const", self.shape(a).to_vec(), out, Op::AddConst(a), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, NumericsError> {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(a);
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale(a, s), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push("sigmoid", self.shape(a).to_vec(), out, Op::Sigmoid(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).iter().map(|&x| x.exp()).collect();
        let rg = self.rg(a);
        self.push("exp", self.shape(a).to_vec(), out, Op::Exp(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(a);
        self.push("gelu", self.shape(a).to_vec(), out, Op::Gelu(a), rg)
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.softmax_impl(a, false)
    }

    /// Row-wise softmax of a square score matrix with entries above the
    /// diagonal masked out (row `i` attends to columns `0..=i`).
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (r, cols) = self.rows_cols(a);
        if r != cols {
            return Err(shape_err("causal_softmax", format!("non-square {:?}", self.shape(a))));
        }
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var, NumericsError> {
        let (r, cols) = self.rows_cols(a);
        let x = self.value(a);
        let mut out = vec![T::zero(); r * cols];
        for i in 0..r {
            let lim = if causal { i + 1 } else { cols };
            let row = &x[i * cols..i * cols + lim];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let o = &mut out[i * cols..i * cols + lim];
            let mut s = T::zero();
            for (oj, &xj) in o.iter_mut().zip(row) {
                *oj = (xj - mx).exp();
                s += *oj;
            }
            for oj in o.iter_mut() {
                *oj = *oj / s;
            }
        }
        let rg = self.rg(a);
        self.push("softmax", self.shape(a).to_vec(), out, Op::Softmax { a, cols }, rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `cols`.
    pub fn layernorm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        let (r, cols) = self.rows_cols(a);
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(shape_err(
                "layernorm",
                format!("{:?} with gamma {:?} beta {:?}", self.shape(a), self.shape(gamma), self.shape(beta)),
            ));
        }
        let x = self.value(a);
        let g = self.value(gamma);
        let b = self.value(beta);
        let n = c::<T>(cols as f64);
        let mut xhat = vec![T::zero(); r * cols];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * cols];
        for i in 0..r {
            let row = &x[i * cols..(i + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + c(eps)).sqrt();
            rstd[i] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[i * cols + j] = h;
                out[i * cols + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        self.push("layernorm", self.shape(a).to_vec(), out, Op::LayerNorm { a, gamma, beta, xhat, rstd }, rg)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = self.rows_cols(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, w) = self.rows_cols(p);
            if r != rows {
                let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
                return Err(shape_err("concat_cols", format!("{:?}", shapes)));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let parts = parts.iter().copied().zip(widths).collect();
        self.push("concat_cols", vec![rows, total], out, Op::ConcatCols { parts, rows }, rg)
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = self.rows_cols(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, w) = self.rows_cols(p);
            if w != cols {
                let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
                return Err(shape_err("concat_rows", format!("{:?}", shapes)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push("concat_rows", vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (r, cols) = self.rows_cols(a);
        if start >= end || end > r {
            return Err(shape_err("slice_rows", format!("{}..{} of {:?}", start, end, self.shape(a))));
        }
        let out = self.value(a)[start * cols..end * cols].to_vec();
        let rg = self.rg(a);
        self.push("slice_rows", vec![end - start, cols], out, Op::SliceRows { a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (rows, cols) = self.rows_cols(a);
        if start >= end || end > cols {
            return Err(shape_err("slice_cols", format!("{}..{} of {:?}", start, end, self.shape(a))));
        }
        let width = end - start;
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows * width);
        for i in 0..rows {
            out.extend_from_slice(&x[i * cols + start..i * cols + end]);
        }
        let rg = self.rg(a);
        self.push("slice_cols", vec![rows, width], out, Op::SliceCols { a, start, width, rows }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.rows_cols(a);
        let x = self.value(a);
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = x[i * cols + j];
            }
        }
        let rg = self.rg(a);
        self.push("transpose", vec![cols, rows], out, Op::Transpose { a, rows, cols }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", self.shape(a), shape)));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push("reshape", shape, out, Op::Reshape(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push("sum", vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let x = self.value(a);
        let s = x.iter().copied().sum::<T>() / c(x.len() as f64);
        let rg = self.rg(a);
        self.push("mean", vec![1], vec![s], Op::Mean(a), rg)
    }

    /// Row gather; `None` entries produce zero rows. Doubles as embedding
    /// lookup and as zero-padded neighborhood extraction.
    pub fn gather_rows(&mut self, a: Var, rows: Vec<Option<usize>>) -> Result<Var, NumericsError> {
        let (r, cols) = self.rows_cols(a);
        if let Some(bad) = rows.iter().flatten().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {} of {:?}", bad, self.shape(a))));
        }
        if rows.is_empty() {
            return Err(shape_err("gather_rows", "empty index list".into()));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for ri in &rows {
            match ri {
                Some(i) => out.extend_from_slice(&x[i * cols..(i + 1) * cols]),
                None => out.extend(std::iter::repeat_n(T::zero(), cols)),
            }
        }
        let rg = self.rg(a);
        self.push("gather_rows", vec![rows.len(), cols], out, Op::Gather { a, rows }, rg)
    }

    /// Output row `g` is the mean of rows `groups[g]` of `a`.
    pub fn gather_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var, NumericsError> {
        let (r, cols) = self.rows_cols(a);
        if groups.is_empty() || groups.iter().any(|g| g.is_empty() || g.iter().any(|&i| i >= r)) {
            return Err(shape_err("gather_mean", format!("invalid groups over {:?}", self.shape(a))));
        }
        let x = self.value(a);
        let mut out = vec![T::zero(); groups.len() * cols];
        for (gi, g) in groups.iter().enumerate() {
            let o = &mut out[gi * cols..(gi + 1) * cols];
            for &i in g {
                for (oj, &xj) in o.iter_mut().zip(&x[i * cols..(i + 1) * cols]) {
                    *oj += xj;
                }
            }
            let inv = T::one() / c(g.len() as f64);
            for oj in o.iter_mut() {
                *oj = *oj * inv;
            }
        }
        let rg = self.rg(a);
        self.push("gather_mean", vec![groups.len(), cols], out, Op::GatherMean { a, groups }, rg)
    }

    /// Mean token negative log-likelihood over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var, NumericsError> {
        let (r, v) = self.rows_cols(logits);
        if targets.len() != r {
            return Err(shape_err("cross_entropy", format!("{} targets for {:?}", targets.len(), self.shape(logits))));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(shape_err("cross_entropy", format!("target {} >= vocab {}", bad, v)));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(NumericsError::EmptyReduction("cross_entropy"));
        }
        let x = self.value(logits);
        let mut probs = vec![T::zero(); r * v];
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &x[i * v..(i + 1) * v];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[i * v..(i + 1) * v];
            let mut s = T::zero();
            for (pj, &xj) in p.iter_mut().zip(row) {
                *pj = (xj - mx).exp();
                s += *pj;
            }
            for pj in p.iter_mut() {
                *pj = *pj / s;
            }
            total += s.ln() + mx - row[t];
        }
        let loss = total / c(count as f64);
        let rg = self.rg(logits);
        self.push("cross_entropy", vec![1], vec![loss], Op::CrossEntropy { logits, targets, probs, count }, rg)
    }

    /// Mean binary cross-entropy of `sigmoid(a)` against `targets`.
    pub fn bce_with_logits(&mut self, a: Var, targets: Vec<T>) -> Result<Var, NumericsError> {
        let x = self.value(a);
        if targets.len() != x.len() {
            return Err(shape_err("bce_with_logits", format!("{} targets for {:?}", targets.len(), self.shape(a))));
        }
        let mut total = T::zero();
        for (&xi, &ti) in x.iter().zip(&targets) {
            total += xi.max(T::zero()) - xi * ti + (T::one() + (-xi.abs()).exp()).ln();
        }
        let loss = total / c(x.len() as f64);
        let rg = self.rg(a);
        self.push("bce_with_logits", vec![1], vec![loss], Op::BceWithLogits { a, targets }, rg)
    }

    /// IoU between each predicted `(cx, cy, w, h)` row of `pred` and a constant
    /// target box. Output shape `[P]`.
    pub fn box_iou(&mut self, pred: Var, gt: Vec<[T; 4]>) -> Result<Var, NumericsError> {
        let (p, cols) = self.rows_cols(pred);
        if cols != 4 || gt.len() != p {
            return Err(shape_err("box_iou", format!("{:?} vs {} targets", self.shape(pred), gt.len())));
        }
        let x = self.value(pred);
        let out = (0..p)
            .map(|i| iou_parts(&x[i * 4..i * 4 + 4], &gt[i]).iou)
            .collect();
        let rg = self.rg(pred);
        self.push("box_iou", vec![p], out, Op::BoxIou { pred, gt }, rg)
    }

    /// Runs reverse accumulation from a scalar `loss` and returns gradients for
    /// every leaf that requires them. The tape is consumed.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            check_finite("backward", &g)?;
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop_node(idx, &op, &g, &mut grads);
            self.nodes[idx].op = op;
        }
        let mut out = HashMap::new();
        for &leaf in &self.leaves {
            let g = if leaf.0 < n { grads[leaf.0].take() } else { None };
            let len = self.nodes[leaf.0].value.len();
            out.insert(leaf, g.unwrap_or_else(|| vec![T::zero(); len]));
        }
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, idx: usize, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_val = &self.nodes[idx].value;
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                if self.rg(*a) {
                    // dA = dC @ op(B)^T
                    let ga = acc(grads, *a, m * k);
                    T::gemm(m, n, k, T::one(), g, false, self.value(*b), !*trans_b, T::one(), ga);
                }
                if self.rg(*b) {
                    let gb = acc(grads, *b, k * n);
                    if *trans_b {
                        // B stored [n, k]: dB = dC^T @ A
                        T::gemm(n, m, k, T::one(), g, true, self.value(*a), false, T::one(), gb);
                    } else {
                        T::gemm(k, m, n, T::one(), self.value(*a), true, g, false, T::one(), gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_into(acc(grads, v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.rg(*b) {
                    for (o, &gi) in acc(grads, *b, g.len()).iter_mut().zip(g) {
                        *o += -gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    for ((o, &gi), &bi) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    for ((o, &gi), &ai) in acc(grads, *b, g.len()).iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddRow { a, row } => {
                if self.rg(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.rg(*row) {
                    let cols = self.value(*row).len();
                    let gr = acc(grads, *row, cols);
                    for chunk in g.chunks(cols) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::AddConst(a) => {
                if self.rg(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
            }
            Op::Scale(a, s) => {
                if self.rg(*a) {
                    for (o, &gi) in acc(grads, *a, g.len()).iter_mut().zip(g) {
                        *o += gi * *s;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(*a) {
                    for ((o, &gi), &y) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(out_val) {
                        *o += gi * y * (T::one() - y);
                    }
                }
            }
            Op::Exp(a) => {
                if self.rg(*a) {
                    for ((o, &gi), &y) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(out_val) {
                        *o += gi * y;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let xv = self.value(*a);
                    for ((o, &gi), &x) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(xv) {
                        *o += gi * gelu_grad(x);
                    }
                }
            }
            Op::Softmax { a, cols } => {
                if self.rg(*a) {
                    let cols = *cols;
                    let ga = acc(grads, *a, g.len());
                    for ((gr, yr), oa) in g.chunks(cols).zip(out_val.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: T = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                        for ((o, &gi), &yi) in oa.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, xhat, rstd } => {
                let cols = self.value(*gamma).len();
                let gv = self.value(*gamma);
                if self.rg(*gamma) {
                    let gg = acc(grads, *gamma, cols);
                    for (gr, xr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((o, &gi), &xi) in gg.iter_mut().zip(gr).zip(xr) {
                            *o += gi * xi;
                        }
                    }
                }
                if self.rg(*beta) {
                    let gb = acc(grads, *beta, cols);
                    for gr in g.chunks(cols) {
                        add_into(gb, gr);
                    }
                }
                if self.rg(*a) {
                    let n = c::<T>(cols as f64);
                    let ga = acc(grads, *a, g.len());
                    let mut dxhat = vec![T::zero(); cols];
                    for (i, ((gr, xr), oa)) in
                        g.chunks(cols).zip(xhat.chunks(cols)).zip(ga.chunks_mut(cols)).enumerate()
                    {
                        for j in 0..cols {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = dxhat.iter().zip(xr).map(|(&d, &x)| d * x).sum();
                        let rs = rstd[i];
                        for j in 0..cols {
                            oa[j] += rs / n * (n * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, w) in parts {
                    if self.rg(p) {
                        let gp = acc(grads, p, rows * w);
                        for i in 0..*rows {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        add_into(acc(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { a, start } => {
                if self.rg(*a) {
                    let cols = self.rows_cols(*a).1;
                    let len = self.value(*a).len();
                    let ga = acc(grads, *a, len);
                    add_into(&mut ga[start * cols..start * cols + g.len()], g);
                }
            }
            Op::SliceCols { a, start, width, rows } => {
                if self.rg(*a) {
                    let cols = self.rows_cols(*a).1;
                    let len = self.value(*a).len();
                    let ga = acc(grads, *a, len);
                    for i in 0..*rows {
                        add_into(&mut ga[i * cols + start..i * cols + start + width], &g[i * width..(i + 1) * width]);
                    }
                }
            }
            Op::Transpose { a, rows, cols } => {
                if self.rg(*a) {
                    let ga = acc(grads, *a, rows * cols);
                    for i in 0..*rows {
                        for j in 0..*cols {
                            ga[i * cols + j] += g[j * rows + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    let len = self.value(*a).len();
                    for o in acc(grads, *a, len).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if self.rg(*a) {
                    let len = self.value(*a).len();
                    let s = g[0] / c(len as f64);
                    for o in acc(grads, *a, len).iter_mut() {
                        *o += s;
                    }
                }
            }
            Op::Gather { a, rows } => {
                if self.rg(*a) {
                    let cols = self.rows_cols(*a).1;
                    let len = self.value(*a).len();
                    let ga = acc(grads, *a, len);
                    for (k, ri) in rows.iter().enumerate() {
                        if let Some(i) = ri {
                            add_into(&mut ga[i * cols..(i + 1) * cols], &g[k * cols..(k + 1) * cols]);
                        }
                    }
                }
            }
            Op::GatherMean { a, groups } => {
                if self.rg(*a) {
                    let cols = self.rows_cols(*a).1;
                    let len = self.value(*a).len();
                    let ga = acc(grads, *a, len);
                    for (gi, grp) in groups.iter().enumerate() {
                        let inv = T::one() / c(grp.len() as f64);
                        let gr = &g[gi * cols..(gi + 1) * cols];
                        for &i in grp {
                            for (o, &x) in ga[i * cols..(i + 1) * cols].iter_mut().zip(gr) {
                                *o += x * inv;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if self.rg(*logits) {
                    let len = self.value(*logits).len();
                    let v = len / targets.len();
                    let s = g[0] / c(*count as f64);
                    let gl = acc(grads, *logits, len);
                    for (i, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut gl[i * v..(i + 1) * v];
                        for (o, &p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                            *o += s * p;
                        }
                        row[t] += -s;
                    }
                }
            }
            Op::BceWithLogits { a, targets } => {
                if self.rg(*a) {
                    let xv = self.value(*a);
                    let s = g[0] / c(xv.len() as f64);
                    for ((o, &x), &t) in acc(grads, *a, xv.len()).iter_mut().zip(xv).zip(targets) {
                        *o += s * (sigmoid(x) - t);
                    }
                }
            }
            Op::BoxIou { pred, gt } => {
                if self.rg(*pred) {
                    let xv = self.value(*pred);
                    let gp = acc(grads, *pred, xv.len());
                    for (i, b) in gt.iter().enumerate() {
                        let d = iou_parts(&xv[i * 4..i * 4 + 4], b).grad;
                        for j in 0..4 {
                            gp[i * 4 + j] += g[i] * d[j];
                        }
                    }
                }
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = c::<T>(GELU_K) * (x + c::<T>(GELU_A) * x * x * x);
    c::<T>(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = c::<T>(GELU_K) * (x + c::<T>(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = c::<T>(GELU_K) * (T::one() + c::<T>(3.0 * GELU_A) * x * x);
    c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * x * (T::one() - t * t) * du
}

struct IouParts<T> {
    iou: T,
    grad: [T; 4],
}

/// IoU of `(cx, cy, w, h)` boxes and its gradient w.r.t. the first box.
fn iou_parts<T: Scalar>(a: &[T], b: &[T; 4]) -> IouParts<T> {
    let half = c::<T>(0.5);
    let (acx, acy, aw, ah) = (a[0], a[1], a[2], a[3]);
    let (ax0, ax1) = (acx - half * aw, acx + half * aw);
    let (ay0, ay1) = (acy - half * ah, acy + half * ah);
    let (bx0, bx1) = (b[0] - half * b[2], b[0] + half * b[2]);
    let (by0, by1) = (b[1] - half * b[3], b[1] + half * b[3]);

    let iw_raw = ax1.min(bx1) - ax0.max(bx0);
    let ih_raw = ay1.min(by1) - ay0.max(by0);
    let iw = iw_raw.max(T::zero());
    let ih = ih_raw.max(T::zero());
    let inter = iw * ih;
    let area_a = aw * ah;
    let area_b = b[2] * b[3];
    let union = area_a + area_b - inter;
    if union <= T::zero() {
        return IouParts { iou: T::zero(), grad: [T::zero(); 4] };
    }
    let iou = inter / union;

    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);

    // d iw / d (ax0, ax1), d ih / d (ay0, ay1)
    let (diw_dx0, diw_dx1) = if iw_raw > T::zero() {
        (if ax0 > bx0 { -T::one() } else { T::zero() }, if ax1 < bx1 { T::one() } else { T::zero() })
    } else {
        (T::zero(), T::zero())
    };
    let (dih_dy0, dih_dy1) = if ih_raw > T::zero() {
        (if ay0 > by0 { -T::one() } else { T::zero() }, if ay1 < by1 { T::one() } else { T::zero() })
    } else {
        (T::zero(), T::zero())
    };
    let d_iw = d_inter * ih;
    let d_ih = d_inter * iw;
    let g_cx = d_iw * (diw_dx0 + diw_dx1);
    let g_w = d_iw * half * (diw_dx1 - diw_dx0) + d_area * ah;
    let g_cy = d_ih * (dih_dy0 + dih_dy1);
    let g_h = d_ih * half * (dih_dy1 - dih_dy0) + d_area * aw;
    IouParts { iou, grad: [g_cx, g_cy, g_w, g_h] }
}
