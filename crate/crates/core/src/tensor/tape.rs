use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{CsrMatrix, Matrix, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Backward rule for a fused operation defined outside this module.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one entry per input: the gradient of the root w.r.t. that
    /// input, or `None` when `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Matrix],
        output: &Matrix,
        out_grad: &Matrix,
        needs: &[bool],
    ) -> Vec<Option<Matrix>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    ConcatCols(Var, Var),
    RowL2Normalize(Var),
    Sum(Var),
    Mean(Var),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Matrix,
    requires_grad: bool,
    grad: Option<Matrix>,
    op: Op,
}

/// Reverse-mode tape. Operations are appended in evaluation order, so the
/// node list is always topologically sorted.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<&Node, TensorError> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar);
        }
        self.nodes.get(v.index).ok_or(TensorError::ForeignVar)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes.get(v.index).and_then(|n| n.grad.as_ref())
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.check(a)?.value.matmul(&self.check(b)?.value)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn spmm(&mut self, s: &Arc<CsrMatrix>, d: Var) -> Result<Var, TensorError> {
        let value = s.spmm(&self.check(d)?.value)?;
        let rg = self.needs(d);
        Ok(self.push(value, rg, Op::SpMM(Arc::clone(s), d)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.check(a)?.value.add(&self.check(b)?.value)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.check(a)?.value.sub(&self.check(b)?.value)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.check(a)?.value.hadamard(&self.check(b)?.value)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    /// Adds a `1 x c` bias row to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let x = &self.check(a)?.value;
        let b = &self.check(bias)?.value;
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                left: x.shape(),
                right: b.shape(),
            });
        }
        let mut value = x.clone();
        let cols = value.cols();
        for row in value.as_mut_slice().chunks_mut(cols.max(1)) {
            for (o, &bv) in row.iter_mut().zip(b.as_slice()) {
                *o += bv;
            }
        }
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push(value, rg, Op::AddRowBias(a, bias)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let value = self.check(a)?.value.scale(factor);
        let rg = self.needs(a);
        Ok(self.push(value, rg, Op::Scale(a, factor)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.check(a)?.value.map(|v| v.max(0.0));
        let rg = self.needs(a);
        Ok(self.push(value, rg, Op::Relu(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.check(a)?.value.map(sigmoid);
        let rg = self.needs(a);
        Ok(self.push(value, rg, Op::Sigmoid(a)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.check(a)?.value.concat_cols(&self.check(b)?.value)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, rg, Op::ConcatCols(a, b)))
    }

    /// Scales every row to unit Euclidean norm. Zero rows are rejected.
    pub fn row_l2_normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = &self.check(a)?.value;
        let mut value = x.clone();
        for r in 0..value.rows() {
            let norm = row_norm(x.row(r));
            if norm == 0.0 || !norm.is_finite() {
                return Err(TensorError::ZeroRow {
                    op: "row_l2_normalize",
                    row: r,
                });
            }
            for v in value.row_mut(r) {
                *v /= norm;
            }
        }
        let rg = self.needs(a);
        Ok(self.push(value, rg, Op::RowL2Normalize(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = Matrix::scalar(self.check(a)?.value.sum());
        let rg = self.needs(a);
        Ok(self.push(value, rg, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = &self.check(a)?.value;
        if x.is_empty() {
            return Err(TensorError::Empty { op: "mean" });
        }
        let value = Matrix::scalar(x.sum() / x.len() as f64);
        let rg = self.needs(a);
        Ok(self.push(value, rg, Op::Mean(a)))
    }

    /// Records a fused operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Matrix,
        op: Box<dyn CustomOp>,
    ) -> Result<Var, TensorError> {
        let mut rg = false;
        for &v in inputs {
            self.check(v)?;
            rg |= self.needs(v);
        }
        Ok(self.push(value, rg, Op::Custom(inputs.to_vec(), op)))
    }

    /// Back-propagates from the scalar `root`, adding `d root / d leaf` into
    /// the gradient buffer of every leaf that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let node = self.check(root)?;
        if node.value.shape() != (1, 1) {
            return Err(TensorError::NonScalarRoot(node.value.shape()));
        }
        if !node.requires_grad {
            return Err(TensorError::DetachedRoot);
        }
        let mut adj: Vec<Option<Matrix>> = (0..=root.index).map(|_| None).collect();
        adj[root.index] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.index).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let da = g.matmul_nt(self.value(*b))?;
                        accumulate(&mut adj, *a, da)?;
                    }
                    if self.needs(*b) {
                        let db = self.value(*a).matmul_tn(&g)?;
                        accumulate(&mut adj, *b, db)?;
                    }
                }
                Op::SpMM(s, d) => {
                    let dd = s.spmm_transposed(&g)?;
                    accumulate(&mut adj, *d, dd)?;
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g.clone())?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g.scale(-1.0))?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g.hadamard(self.value(*b))?)?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g.hadamard(self.value(*a))?)?;
                    }
                }
                Op::AddRowBias(a, bias) => {
                    if self.needs(*bias) {
                        let mut db = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, &v) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut adj, *bias, db)?;
                    }
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g)?;
                    }
                }
                Op::Scale(a, factor) => {
                    accumulate(&mut adj, *a, g.scale(*factor))?;
                }
                Op::Relu(a) => {
                    let da = self
                        .value(*a)
                        .zip_map(&g, "relu_backward", |x, gv| if x > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut adj, *a, da)?;
                }
                Op::Sigmoid(a) => {
                    let da = node
                        .value
                        .zip_map(&g, "sigmoid_backward", |y, gv| gv * y * (1.0 - y))?;
                    accumulate(&mut adj, *a, da)?;
                }
                Op::ConcatCols(a, b) => {
                    let left = self.value(*a).cols();
                    if self.needs(*a) {
                        accumulate(&mut adj, *a, g.slice_cols(0, left))?;
                    }
                    if self.needs(*b) {
                        accumulate(&mut adj, *b, g.slice_cols(left, g.cols()))?;
                    }
                }
                Op::RowL2Normalize(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut da = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let norm = row_norm(x.row(r));
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, &yv), &gv) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = (gv - yv * proj) / norm;
                        }
                    }
                    accumulate(&mut adj, *a, da)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut adj, *a, Matrix::filled(r, c, g.get(0, 0)))?;
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let v = g.get(0, 0) / (r * c) as f64;
                    accumulate(&mut adj, *a, Matrix::filled(r, c, v))?;
                }
                Op::Custom(inputs, op) => {
                    let values: Vec<&Matrix> = inputs.iter().map(|v| self.value(*v)).collect();
                    let needs: Vec<bool> = inputs.iter().map(|v| self.needs(*v)).collect();
                    let grads = op.backward(&values, &node.value, &g, &needs);
                    for ((v, grad), need) in inputs.iter().zip(grads).zip(needs) {
                        if let (true, Some(grad)) = (need, grad) {
                            accumulate(&mut adj, *v, grad)?;
                        }
                    }
                }
            }
        }

        for (idx, g) in adj.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[idx];
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(existing) => existing.add_assign(&g)?,
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<(), TensorError> {
    match &mut adj[v.index] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn row_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_unit_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap(), true);
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &Matrix::ones(2, 2));
    }

    #[test]
    fn relu_gates_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::from_rows(&[vec![-1.0, 2.0]]).unwrap(), true);
        let r = tape.relu(w).unwrap();
        let s = tape.sum(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::ones(1, 3), true);
        let s = tape.sum(w).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &Matrix::filled(1, 3, 2.0));
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn root_must_be_scalar_and_attached() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::ones(2, 2), true);
        assert!(matches!(tape.backward(w), Err(TensorError::NonScalarRoot((2, 2)))));
        let c = tape.constant(Matrix::ones(2, 2));
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::DetachedRoot)));
    }

    #[test]
    fn vars_from_other_tapes_are_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Matrix::ones(1, 1), true);
        assert!(matches!(b.relu(x), Err(TensorError::ForeignVar)));
    }

    #[test]
    fn constants_do_not_record_ops() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::ones(2, 2));
        let r = tape.relu(c).unwrap();
        assert!(!tape.requires_grad(r));
    }

    #[test]
    fn zero_row_normalisation_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(), true);
        assert!(matches!(
            tape.row_l2_normalize(x),
            Err(TensorError::ZeroRow { row: 1, .. })
        ));
    }
}
