//! Tape-based reverse-mode differentiation over dense row-major tensors.
//!
//! Every operation is recorded on a [`Tape`] as it is evaluated. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and adds the
//! gradient of that scalar into every node that depends on a
//! `requires_grad` leaf. Gradients accumulate across calls until
//! [`Tape::zero_grad`] is invoked.
//!
//! Broadcasting is deliberately absent. Elementwise operations require equal
//! shapes; the only mixed-shape operations are scalar constants
//! ([`Tape::scale`], [`Tape::add_scalar`]) and the explicit row-bias
//! [`Tape::add_row`].

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected a 2-d tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("cosine undefined: row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("node {0} is not a leaf")]
    NotLeaf(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::DataLength {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    /// Row vector of shape `[1, n]`.
    pub fn row(values: Vec<T>) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(AutodiffError::NotMatrix {
                op,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.shape.first().copied().unwrap_or(1)
        }
    }

    pub fn row_slice(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(AutodiffError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            })
        }
    }

    fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        }
    }
}

/// Plain matrix product `a · b`, `a` is `m×k`, `b` is `k×n`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims("matmul")?;
    let (k2, n) = b.dims("matmul")?;
    if k != k2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a · bᵀ`, `a` is `m×k`, `b` is `n×k`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims("matmul_nt")?;
    let (n, k2) = b.dims("matmul_nt")?;
    if k != k2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            out.push(a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum());
        }
    }
    Tensor::matrix(m, n, out)
}

/// `aᵀ · b`, `a` is `m×k`, `b` is `m×n`.
fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    let mut out = vec![T::zero(); k * n];
    for r in 0..m {
        let b_row = &b.data[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a.data[r * k + p];
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor {
        shape: vec![k, n],
        data: out,
        requires_grad: false,
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddRow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    RowSum(Var),
    RowMax(Var),
    RowNormalize(Var),
    GatherRows(Var, Vec<usize>),
    SelectRows(Vec<bool>, Var, Var),
    CrossEntropy(Var, Vec<Option<usize>>),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::AddRow(a, b)
            | Op::SelectRows(_, a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sum(a)
            | Op::RowSum(a)
            | Op::RowMax(a)
            | Op::RowNormalize(a)
            | Op::GatherRows(a, _)
            | Op::CrossEntropy(a, _) => vec![*a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Recording of one computation graph.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. A tape is single-threaded; independent tapes may live on different
/// threads.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad;
        self.nodes.push(Node {
            op: Op::Leaf,
            value: tensor,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Replaces the value of a leaf. Call [`Tape::replay`] afterwards to
    /// refresh downstream values.
    pub fn set_value(&mut self, v: Var, tensor: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(AutodiffError::NotLeaf(v.0));
        }
        node.value.same_shape(&tensor, "set_value")?;
        node.value.data = tensor.data;
        Ok(())
    }

    /// Re-evaluates every non-leaf node in recorded order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.eval(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op<T>) -> Result<Var> {
        let value = self.eval(&op)?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn eval(&self, op: &Op<T>) -> Result<Tensor<T>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        Ok(match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) => {
                val(a).same_shape(val(b), "add")?;
                val(a).zip(val(b), |x, y| x + y)
            }
            Op::Sub(a, b) => {
                val(a).same_shape(val(b), "sub")?;
                val(a).zip(val(b), |x, y| x - y)
            }
            Op::Mul(a, b) => {
                val(a).same_shape(val(b), "mul")?;
                val(a).zip(val(b), |x, y| x * y)
            }
            Op::Scale(a, c) => val(a).map(|x| x * *c),
            Op::AddScalar(a, c) => val(a).map(|x| x + *c),
            Op::MatMul(a, b) => matmul(val(a), val(b))?,
            Op::MatMulNT(a, b) => matmul_nt(val(a), val(b))?,
            Op::AddRow(m, r) => {
                let (rows, cols) = val(m).dims("add_row")?;
                let bias = val(r);
                if bias.len() != cols {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "add_row",
                        left: val(m).shape.clone(),
                        right: bias.shape.clone(),
                    });
                }
                let mut out = val(m).clone();
                out.requires_grad = false;
                for i in 0..rows {
                    for (o, &b) in out.data[i * cols..(i + 1) * cols].iter_mut().zip(&bias.data) {
                        *o = *o + b;
                    }
                }
                out
            }
            Op::Sigmoid(a) => val(a).map(sigmoid),
            Op::Tanh(a) => val(a).map(T::tanh),
            Op::Relu(a) => val(a).map(|x| if x > T::zero() { x } else { T::zero() }),
            Op::Sum(a) => Tensor::scalar(val(a).data.iter().copied().sum()),
            Op::RowSum(a) => {
                let (rows, _) = val(a).dims("row_sum")?;
                let sums = (0..rows).map(|r| val(a).row_slice(r).iter().copied().sum());
                Tensor::matrix(rows, 1, sums.collect())?
            }
            Op::RowMax(a) => {
                let (rows, cols) = val(a).dims("row_max")?;
                if cols == 0 {
                    return Err(AutodiffError::NotMatrix {
                        op: "row_max",
                        shape: val(a).shape.clone(),
                    });
                }
                let maxes = (0..rows).map(|r| {
                    let row = val(a).row_slice(r);
                    row[argmax(row)]
                });
                Tensor::matrix(rows, 1, maxes.collect())?
            }
            Op::RowNormalize(a) => {
                let (rows, cols) = val(a).dims("row_normalize")?;
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let row = val(a).row_slice(r);
                    let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
                    if norm == T::zero() {
                        return Err(AutodiffError::ZeroNorm { row: r });
                    }
                    out.extend(row.iter().map(|&x| x / norm));
                }
                Tensor::matrix(rows, cols, out)?
            }
            Op::GatherRows(table, ids) => {
                let (rows, cols) = val(table).dims("gather_rows")?;
                let mut out = Vec::with_capacity(ids.len() * cols);
                for &id in ids {
                    if id >= rows {
                        return Err(AutodiffError::IndexOutOfRange {
                            op: "gather_rows",
                            index: id,
                            len: rows,
                        });
                    }
                    out.extend_from_slice(val(table).row_slice(id));
                }
                Tensor::matrix(ids.len(), cols, out)?
            }
            Op::SelectRows(mask, a, b) => {
                val(a).same_shape(val(b), "select_rows")?;
                let (rows, cols) = val(a).dims("select_rows")?;
                if mask.len() != rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "select_rows",
                        left: val(a).shape.clone(),
                        right: vec![mask.len()],
                    });
                }
                let mut out = Vec::with_capacity(rows * cols);
                for (r, &take_a) in mask.iter().enumerate() {
                    let src = if take_a { val(a) } else { val(b) };
                    out.extend_from_slice(src.row_slice(r));
                }
                Tensor::matrix(rows, cols, out)?
            }
            Op::CrossEntropy(logits, targets) => {
                let (rows, cols) = val(logits).dims("cross_entropy")?;
                if targets.len() != rows {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "cross_entropy",
                        left: val(logits).shape.clone(),
                        right: vec![targets.len()],
                    });
                }
                let mut total = T::zero();
                for (r, target) in targets.iter().enumerate() {
                    if let Some(t) = *target {
                        if t >= cols {
                            return Err(AutodiffError::IndexOutOfRange {
                                op: "cross_entropy",
                                index: t,
                                len: cols,
                            });
                        }
                        let row = val(logits).row_slice(r);
                        total = total + log_sum_exp(row) - row[t];
                    }
                }
                Tensor::scalar(total)
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.push(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.push(Op::AddScalar(a, c))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -T::one())?;
        self.add_scalar(neg, T::one())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    /// `a · bᵀ`; lets `x · Wᵀ` be written without materialising a transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMulNT(a, b))
    }

    /// Adds the same bias row to every row of `m`.
    pub fn add_row(&mut self, m: Var, bias: Var) -> Result<Var> {
        self.push(Op::AddRow(m, bias))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    /// `max(0, a)`. The subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    /// Sum of all elements, as a `1×1` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowSum(a))
    }

    /// Per-row maximum. Gradient flows to the first maximal entry.
    pub fn row_max(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowMax(a))
    }

    /// Scales each row to unit L2 norm. Zero rows are an error.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowNormalize(a))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows(table, ids))
    }

    /// Row `i` comes from `on_true` when `mask[i]`, else from `on_false`.
    pub fn select_rows(&mut self, mask: Vec<bool>, on_true: Var, on_false: Var) -> Result<Var> {
        self.push(Op::SelectRows(mask, on_true, on_false))
    }

    /// Summed negative log-softmax likelihood of `targets` over the rows of
    /// `logits`. Rows whose target is `None` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        self.push(Op::CrossEntropy(logits, targets))
    }

    /// Row-wise cosine similarity of two equally shaped matrices, `rows×1`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.row_normalize(a)?;
        let nb = self.row_normalize(b)?;
        let prod = self.mul(na, nb)?;
        self.row_sum(prod)
    }

    /// All-pairs cosine similarity between the rows of `a` and `b`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.row_normalize(a)?;
        let nb = self.row_normalize(b)?;
        self.matmul_nt(na, nb)
    }

    /// Propagates d`loss`/d(node) to every node feeding `loss` and adds it
    /// to the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: loss_value.shape.clone(),
            });
        }
        let mut adjoints: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(Tensor::filled(loss_value.shape.clone(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = adjoints[i].take() else {
                continue;
            };
            if !self.nodes[i].needs_grad && i != loss.0 {
                continue;
            }
            self.propagate(i, &g, &mut adjoints);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, &d) in acc.data.iter_mut().zip(&g.data) {
                        *a = *a + d;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let send = |v: Var, delta: Tensor<T>, adj: &mut [Option<Tensor<T>>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => {
                    for (a, d) in acc.data.iter_mut().zip(delta.data) {
                        *a = *a + d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone(), adj);
                send(*b, g.clone(), adj);
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), adj);
                send(*b, g.map(|x| -x), adj);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.zip(val(*b), |x, y| x * y), adj);
                }
                if wants(*b) {
                    send(*b, g.zip(val(*a), |x, y| x * y), adj);
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|x| x * *c), adj),
            Op::AddScalar(a, _) => send(*a, g.clone(), adj),
            Op::MatMul(a, b) => {
                if wants(*a) {
                    // dA = G · Bᵀ
                    let d = matmul_nt(g, val(*b)).expect("shapes checked at record time");
                    send(*a, d, adj);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    send(*b, matmul_tn(val(*a), g), adj);
                }
            }
            Op::MatMulNT(a, b) => {
                if wants(*a) {
                    // C = A·Bᵀ  =>  dA = G · B
                    let d = matmul(g, val(*b)).expect("shapes checked at record time");
                    send(*a, d, adj);
                }
                if wants(*b) {
                    // dB = Gᵀ · A
                    send(*b, matmul_tn(g, val(*a)), adj);
                }
            }
            Op::AddRow(m, r) => {
                send(*m, g.clone(), adj);
                if wants(*r) {
                    let cols = g.cols();
                    let mut col_sums = vec![T::zero(); cols];
                    for row in g.data.chunks(cols) {
                        for (s, &x) in col_sums.iter_mut().zip(row) {
                            *s = *s + x;
                        }
                    }
                    let mut d = val(*r).clone();
                    d.requires_grad = false;
                    d.data = col_sums;
                    send(*r, d, adj);
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                send(*a, g.zip(y, |gx, yx| gx * yx * (T::one() - yx)), adj);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                send(*a, g.zip(y, |gx, yx| gx * (T::one() - yx * yx)), adj);
            }
            Op::Relu(a) => {
                send(
                    *a,
                    g.zip(val(*a), |gx, x| if x > T::zero() { gx } else { T::zero() }),
                    adj,
                );
            }
            Op::Sum(a) => {
                let s = g.data[0];
                send(*a, Tensor::filled(val(*a).shape.clone(), s), adj);
            }
            Op::RowSum(a) => {
                let x = val(*a);
                let cols = x.cols();
                let mut d = Tensor::zeros(x.shape.clone());
                for (r, chunk) in d.data.chunks_mut(cols).enumerate() {
                    chunk.fill(g.data[r]);
                }
                send(*a, d, adj);
            }
            Op::RowMax(a) => {
                let x = val(*a);
                let cols = x.cols();
                let mut d = Tensor::zeros(x.shape.clone());
                for r in 0..x.rows() {
                    let j = argmax(x.row_slice(r));
                    d.data[r * cols + j] = g.data[r];
                }
                send(*a, d, adj);
            }
            Op::RowNormalize(a) => {
                let x = val(*a);
                let y = &node.value;
                let cols = x.cols();
                let mut d = Tensor::zeros(x.shape.clone());
                for r in 0..x.rows() {
                    let xr = x.row_slice(r);
                    let yr = y.row_slice(r);
                    let gr = g.row_slice(r);
                    let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for c in 0..cols {
                        d.data[r * cols + c] = (gr[c] - yr[c] * dot) / norm;
                    }
                }
                send(*a, d, adj);
            }
            Op::GatherRows(table, ids) => {
                let t = val(*table);
                let cols = t.cols();
                let mut d = Tensor::zeros(t.shape.clone());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &x) in d.data[id * cols..(id + 1) * cols]
                        .iter_mut()
                        .zip(g.row_slice(r))
                    {
                        *o = *o + x;
                    }
                }
                send(*table, d, adj);
            }
            Op::SelectRows(mask, a, b) => {
                let cols = g.cols();
                let mut da = Tensor::zeros(g.shape.clone());
                let mut db = Tensor::zeros(g.shape.clone());
                for (r, &take_a) in mask.iter().enumerate() {
                    let dst = if take_a { &mut da } else { &mut db };
                    dst.data[r * cols..(r + 1) * cols].copy_from_slice(g.row_slice(r));
                }
                send(*a, da, adj);
                send(*b, db, adj);
            }
            Op::CrossEntropy(logits, targets) => {
                let x = val(*logits);
                let cols = x.cols();
                let s = g.data[0];
                let mut d = Tensor::zeros(x.shape.clone());
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    let row = x.row_slice(r);
                    let lse = log_sum_exp(row);
                    let out = &mut d.data[r * cols..(r + 1) * cols];
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o = s * (v - lse).exp();
                    }
                    out[t] = out[t] - s;
                }
                send(*logits, d, adj);
            }
        }
    }
}

/// Index of the first maximal element.
fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Central differences of the scalar output `out` w.r.t. every element of
    /// `leaf`, replaying the tape for each perturbation.
    fn numeric_grad(tape: &mut Tape<f64>, leaf: Var, out: Var, eps: f64) -> Vec<f64> {
        let base = tape.value(leaf).clone();
        let mut grads = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus.data_mut()[i] += eps;
            tape.set_value(leaf, plus).unwrap();
            tape.replay().unwrap();
            let f_plus = tape.value(out).item().unwrap();
            let mut minus = base.clone();
            minus.data_mut()[i] -= eps;
            tape.set_value(leaf, minus).unwrap();
            tape.replay().unwrap();
            let f_minus = tape.value(out).item().unwrap();
            grads.push((f_plus - f_minus) / (2.0 * eps));
        }
        tape.set_value(leaf, base).unwrap();
        tape.replay().unwrap();
        grads
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            let tol = f64::max(1e-4, 1e-3 * n.abs());
            assert!((a - n).abs() <= tol, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&id, &col).unwrap().data(), &[3.0, 4.0]);

        let row = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let out = matmul(&row, &col).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_tensor(&mut rng, 3, 4);
        let b = random_tensor(&mut rng, 4, 2);
        let got = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.get(i, p) * b.get(p, j);
                }
                assert!((got.get(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn tensor_rejects_wrong_data_length() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn activations_at_zero_and_saturation() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![0.0f64, 40.0]));
        let s = tape.sigmoid(x).unwrap();
        let t = tape.tanh(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert!((tape.value(s).data()[1] - 1.0).abs() < 1e-12);
        assert_eq!(tape.value(t).data()[0], 0.0);
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap().data();
        assert_eq!(g[0], 0.25);
        assert!(g[1].abs() < 1e-12);
    }

    #[test]
    fn square_gradient_and_accumulation() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
        assert_eq!(tape.grad(y).unwrap().data(), &[1.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[12.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0]));
        let y = tape.tanh(x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(AutodiffError::NotScalar { .. })
        ));
    }

    #[test]
    fn sum_sigmoid_linear_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let w = tape.param(random_tensor(&mut rng, 3, 4));
        let x = tape.param(random_tensor(&mut rng, 4, 1));
        let wx = tape.matmul(w, x).unwrap();
        let s = tape.sigmoid(wx).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        for leaf in [w, x] {
            let analytic = tape.grad(leaf).unwrap().data().to_vec();
            let numeric = numeric_grad(&mut tape, leaf, loss, 1e-4);
            assert_grad_close(&analytic, &numeric);
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let a = tape.param(random_tensor(&mut rng, 3, 4));
        let b = tape.param(random_tensor(&mut rng, 3, 4));
        let w = tape.param(random_tensor(&mut rng, 5, 4));
        let bias = tape.param(random_tensor(&mut rng, 1, 5));
        let table = tape.param(random_tensor(&mut rng, 6, 4));

        let sum = tape.add(a, b).unwrap();
        let diff = tape.sub(sum, b).unwrap();
        let prod = tape.mul(diff, b).unwrap();
        let scaled = tape.scale(prod, 0.7).unwrap();
        let shifted = tape.add_scalar(scaled, 0.1).unwrap();
        let th = tape.tanh(shifted).unwrap();
        let lin = tape.matmul_nt(th, w).unwrap();
        let biased = tape.add_row(lin, bias).unwrap();
        let sig = tape.sigmoid(biased).unwrap();
        let emb = tape.gather_rows(table, vec![1, 4, 1]).unwrap();
        let mixed = tape.select_rows(vec![true, false, true], a, emb).unwrap();
        let cos = tape.cosine_matrix(mixed, b).unwrap();
        let rc = tape.row_cosine(a, emb).unwrap();
        let shifted_cos = tape.add_scalar(cos, -0.2).unwrap();
        let hinge = tape.relu(shifted_cos).unwrap();
        let hardest = tape.row_max(hinge).unwrap();
        let ce = tape.cross_entropy(biased, vec![Some(2), None, Some(4)]).unwrap();
        let s1 = tape.row_sum(sig).unwrap();
        let two = tape.constant(Tensor::scalar(2.0));
        let m1 = tape.matmul(s1, two).unwrap();
        let parts = [m1, hardest, rc];
        let mut total = ce;
        for p in parts {
            let s = tape.sum(p).unwrap();
            total = tape.add(total, s).unwrap();
        }
        let mean = tape.mean(a).unwrap();
        let total = tape.add(total, mean).unwrap();

        tape.backward(total).unwrap();
        for leaf in [a, b, w, bias, table] {
            let analytic = tape.grad(leaf).unwrap().data().to_vec();
            let numeric = numeric_grad(&mut tape, leaf, total, 1e-4);
            assert_grad_close(&analytic, &numeric);
        }
    }

    #[test]
    fn zero_row_cosine_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![0.0, 0.0]));
        assert_eq!(
            tape.row_normalize(a).unwrap_err(),
            AutodiffError::ZeroNorm { row: 0 }
        );
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let a = tape.param(random_tensor(&mut rng, 4, 4));
        let b = tape.matmul(a, a).unwrap();
        let c = tape.tanh(b).unwrap();
        let d = tape.sum(c).unwrap();
        let before = tape.value(d).clone();
        tape.replay().unwrap();
        assert_eq!(tape.value(d).data()[0].to_bits(), before.data()[0].to_bits());
    }

    #[test]
    fn cross_entropy_uniform_is_log_v() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(vec![1, 7]));
        let ce = tape.cross_entropy(logits, vec![Some(3)]).unwrap();
        assert!((tape.value(ce).data()[0] - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn works_in_single_precision() {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::scalar(3.0f32));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0f32]);
    }
}
