use std::sync::atomic::{AtomicU64, Ordering};

use super::matrix::gemm;
use super::{AutodiffError, Matrix};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are cheap copies; the value itself lives on the tape. Using a
/// handle with a tape other than the one that created it panics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    /// Position of the node on its tape.
    pub fn id(&self) -> usize {
        self.id
    }
}

/// Reduction axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce every entry to a `1 × 1` scalar.
    All,
    /// Collapse the rows: result is `1 × cols`.
    Rows,
    /// Collapse the columns: result is `rows × 1`.
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Square,
    Negate,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sqrt(usize),
    Elu(usize),
    EluDerivative(usize),
    Sum(usize, Axis),
    Mean(usize, Axis),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    SelectRows(usize, Vec<usize>),
    Transpose(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. [`Tape::backward`] walks the record once in reverse and may only be
/// called once per tape.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
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
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are only reported for leaves with
    /// `requires_grad` set.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[self.index(var)].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.shape(), (1, 1));
        v.data()[0]
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[self.index(var)].requires_grad
    }

    fn index(&self, var: Var) -> usize {
        assert_eq!(var.tape, self.id, "variable belongs to a different tape");
        var.id
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { id, tape: self.id }
    }

    fn unary(&mut self, a: Var, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Var {
        let ia = self.index(a);
        let value = self.nodes[ia].value.map(f);
        let rg = self.nodes[ia].requires_grad;
        self.push(value, op(ia), rg)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(AutodiffError::dimension(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.index(a), self.index(b));
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(value, Op::MatMul(ia, ib), rg))
    }

    /// Binary and unary elementwise operations by kind. `args` holds one
    /// handle for unary kinds and two for binary kinds. `Add` also accepts
    /// a `1 × cols` row as the second argument, broadcast over rows.
    pub fn elementwise(&mut self, kind: ElementwiseOp, args: &[Var]) -> Result<Var, AutodiffError> {
        let arity = match kind {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            _ => 1,
        };
        if args.len() != arity {
            return Err(AutodiffError::Contract(format!(
                "{kind:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        match kind {
            ElementwiseOp::Add => {
                let (ia, ib) = (self.index(args[0]), self.index(args[1]));
                let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
                if sb.0 == 1 && sb.1 == sa.1 && sa.0 != 1 {
                    self.add_row(args[0], args[1])
                } else {
                    self.add(args[0], args[1])
                }
            }
            ElementwiseOp::Sub => self.sub(args[0], args[1]),
            ElementwiseOp::Mul => self.mul(args[0], args[1]),
            ElementwiseOp::Exp => Ok(self.exp(args[0])),
            ElementwiseOp::Log => self.log(args[0]),
            ElementwiseOp::Square => Ok(self.square(args[0])),
            ElementwiseOp::Negate => Ok(self.neg(args[0])),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.index(a), self.index(b));
        self.same_shape("add", ia, ib)?;
        let value = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x + y);
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(value, Op::Add(ia, ib), rg))
    }

    /// Adds a `1 × cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let (ia, ir) = (self.index(a), self.index(row));
        let (sa, sr) = (self.nodes[ia].value.shape(), self.nodes[ir].value.shape());
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(AutodiffError::dimension("add_row", sa, sr));
        }
        let value = self.nodes[ia].value.add_row(&self.nodes[ir].value);
        let rg = self.nodes[ia].requires_grad || self.nodes[ir].requires_grad;
        Ok(self.push(value, Op::AddRow(ia, ir), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.index(a), self.index(b));
        self.same_shape("sub", ia, ib)?;
        let value = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x - y);
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(value, Op::Sub(ia, ib), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.index(a), self.index(b));
        self.same_shape("mul", ia, ib)?;
        let value = self.nodes[ia].value.zip_map(&self.nodes[ib].value, |x, y| x * y);
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(value, Op::Mul(ia, ib), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.index(a);
        if let Some(bad) = self.nodes[ia].value.data().iter().find(|v| **v <= 0.0) {
            return Err(AutodiffError::Domain(format!("log of non-positive entry {bad}")));
        }
        Ok(self.unary(a, Op::Log, f64::ln))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square, |v| v * v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg, |v| -v)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |i| Op::Scale(i, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        self.unary(a, Op::AddScalar, |v| v + offset)
    }

    /// Elementwise square root. The adjoint at an exact zero is taken as 0
    /// (the subgradient), which keeps norms of vanishing vectors finite.
    pub fn sqrt(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.index(a);
        if let Some(bad) = self.nodes[ia].value.data().iter().find(|v| **v < 0.0) {
            return Err(AutodiffError::Domain(format!("sqrt of negative entry {bad}")));
        }
        Ok(self.unary(a, Op::Sqrt, f64::sqrt))
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu, elu)
    }

    /// Derivative of ELU evaluated at `a`, itself differentiable.
    pub fn elu_derivative(&mut self, a: Var) -> Var {
        self.unary(a, Op::EluDerivative, elu_derivative)
    }

    pub fn sum(&mut self, a: Var, axis: Axis) -> Result<Var, AutodiffError> {
        let ia = self.index(a);
        let value = reduce_sum(&self.nodes[ia].value, axis, "sum")?;
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(value, Op::Sum(ia, axis), rg))
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Result<Var, AutodiffError> {
        let ia = self.index(a);
        let src = &self.nodes[ia].value;
        let count = axis_count(src, axis);
        let value = reduce_sum(src, axis, "mean")?.scale(1.0 / count as f64);
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(value, Op::Mean(ia, axis), rg))
    }

    /// `log(mean(exp(a)))` over all entries, shifted by the maximum for
    /// stability. The shift is a constant, so gradients are exact.
    pub fn log_mean_exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let shift = self.value(a).max();
        if !shift.is_finite() {
            return Err(AutodiffError::Domain("log_mean_exp of empty or non-finite input".into()));
        }
        let shifted = self.add_scalar(a, -shift);
        let e = self.exp(shifted);
        let m = self.mean(e, Axis::All)?;
        let l = self.log(m)?;
        Ok(self.add_scalar(l, shift))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.index(a), self.index(b));
        let value = self.nodes[ia].value.concat_cols(&self.nodes[ib].value)?;
        let rg = self.nodes[ia].requires_grad || self.nodes[ib].requires_grad;
        Ok(self.push(value, Op::ConcatCols(ia, ib), rg))
    }

    /// Column block `[start, start + width)` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, AutodiffError> {
        let ia = self.index(a);
        let shape = self.nodes[ia].value.shape();
        if start + width > shape.1 {
            return Err(AutodiffError::dimension("slice_cols", shape, (shape.0, start + width)));
        }
        let value = self.nodes[ia].value.slice_cols(start, width);
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(value, Op::SliceCols(ia, start), rg))
    }

    /// Gathers rows by index (repeats allowed); the adjoint scatter-adds.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, AutodiffError> {
        let ia = self.index(a);
        let rows = self.nodes[ia].value.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::Domain(format!("row index {bad} out of range for {rows} rows")));
        }
        let value = self.nodes[ia].value.select_rows(indices);
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(value, Op::SelectRows(ia, indices.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ia = self.index(a);
        let value = self.nodes[ia].value.transpose();
        let rg = self.nodes[ia].requires_grad;
        self.push(value, Op::Transpose(ia), rg)
    }

    /// Reverse pass from a `1 × 1` node. A tape supports exactly one
    /// backward pass; a second call fails with [`AutodiffError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        let il = self.index(loss);
        let shape = self.nodes[il].value.shape();
        if shape != (1, 1) {
            return Err(AutodiffError::Contract(format!(
                "backward requires a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; il + 1];
        grads[il] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    Some(
                        grads
                            .get_mut(i)
                            .and_then(Option::take)
                            .unwrap_or_else(|| Matrix::zeros(n.value.rows(), n.value.cols())),
                    )
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: leaves,
        })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let needs = |j: usize| nodes[j].requires_grad;
        let mut acc = |j: usize, m: Matrix| match &mut grads[j] {
            Some(existing) => existing.add_assign(&m),
            slot @ None => *slot = Some(m),
        };
        let y = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, gemm(g, false, &nodes[*b].value, true));
                }
                if needs(*b) {
                    acc(*b, gemm(&nodes[*a].value, true, g, false));
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::AddRow(a, r) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*r) {
                    acc(*r, g.sum_rows());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(*a, g.clone());
                }
                if needs(*b) {
                    acc(*b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(&nodes[*b].value, |g, v| g * v));
                }
                if needs(*b) {
                    acc(*b, g.zip_map(&nodes[*a].value, |g, v| g * v));
                }
            }
            Op::Exp(a) => acc(*a, g.zip_map(y, |g, v| g * v)),
            Op::Log(a) => acc(*a, g.zip_map(&nodes[*a].value, |g, v| g / v)),
            Op::Square(a) => acc(*a, g.zip_map(&nodes[*a].value, |g, v| 2.0 * g * v)),
            Op::Neg(a) => acc(*a, g.scale(-1.0)),
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Sqrt(a) => acc(
                *a,
                g.zip_map(y, |g, v| if v == 0.0 { 0.0 } else { g / (2.0 * v) }),
            ),
            Op::Elu(a) => acc(
                *a,
                g.zip_map(&nodes[*a].value, |g, x| g * elu_derivative(x)),
            ),
            Op::EluDerivative(a) => acc(
                *a,
                g.zip_map(&nodes[*a].value, |g, x| if x > 0.0 { 0.0 } else { g * x.exp() }),
            ),
            Op::Sum(a, axis) => {
                let src = &nodes[*a].value;
                acc(*a, broadcast_back(g, src.rows(), src.cols(), *axis, 1.0));
            }
            Op::Mean(a, axis) => {
                let src = &nodes[*a].value;
                let count = axis_count(src, *axis) as f64;
                acc(*a, broadcast_back(g, src.rows(), src.cols(), *axis, 1.0 / count));
            }
            Op::ConcatCols(a, b) => {
                let wa = nodes[*a].value.cols();
                let wb = nodes[*b].value.cols();
                if needs(*a) {
                    acc(*a, g.slice_cols(0, wa));
                }
                if needs(*b) {
                    acc(*b, g.slice_cols(wa, wb));
                }
            }
            Op::SliceCols(a, start) => {
                let src = &nodes[*a].value;
                let mut out = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        out.set(r, start + c, g.get(r, c));
                    }
                }
                acc(*a, out);
            }
            Op::SelectRows(a, indices) => {
                let src = &nodes[*a].value;
                let cols = src.cols();
                let mut out = Matrix::zeros(src.rows(), cols);
                let data = out.data_mut();
                for (k, &row) in indices.iter().enumerate() {
                    for c in 0..cols {
                        data[row * cols + c] += g.get(k, c);
                    }
                }
                acc(*a, out);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
        }
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for a leaf created with `requires_grad`; `None` otherwise.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        assert_eq!(var.tape, self.tape, "variable belongs to a different tape");
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        assert_eq!(var.tape, self.tape, "variable belongs to a different tape");
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
pub fn elu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn axis_count(m: &Matrix, axis: Axis) -> usize {
    match axis {
        Axis::All => m.len(),
        Axis::Rows => m.rows(),
        Axis::Cols => m.cols(),
    }
}

fn reduce_sum(m: &Matrix, axis: Axis, op: &str) -> Result<Matrix, AutodiffError> {
    if axis_count(m, axis) == 0 {
        return Err(AutodiffError::Domain(format!("{op} over an empty axis")));
    }
    Ok(match axis {
        Axis::All => Matrix::filled(1, 1, m.sum()),
        Axis::Rows => m.sum_rows(),
        Axis::Cols => m.sum_cols(),
    })
}

fn broadcast_back(g: &Matrix, rows: usize, cols: usize, axis: Axis, factor: f64) -> Matrix {
    match axis {
        Axis::All => Matrix::filled(rows, cols, g.data()[0] * factor),
        Axis::Rows => Matrix::from_fn(rows, cols, |_, c| g.get(0, c) * factor),
        Axis::Cols => Matrix::from_fn(rows, cols, |r, _| g.get(r, 0) * factor),
    }
}
