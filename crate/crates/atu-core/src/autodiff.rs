//! Reverse-mode automatic differentiation over `f64` matrices with support
//! for nested (higher-order) gradients.
//!
//! A [`Tape`] records every operation as a node holding the forward values
//! and an opcode referencing earlier nodes. [`Tape::grad`] walks the
//! recorded graph in reverse and *emits the backward computation as new tape
//! operations*: with `create_graph = true` the returned gradients are
//! ordinary differentiable tensors, so calling `grad` on an expression built
//! from them yields exact second-order derivatives. With
//! `create_graph = false` the results are detached constants, which is the
//! first-order shortcut.
//!
//! Every tensor is a row-major `rows x cols` matrix; vectors are `n x 1` and
//! scalars `1 x 1`. All arithmetic is sequential and performed in a fixed
//! order, so reruns with identical inputs are bit-identical. A tape is
//! confined to one thread; detached values ([`Tensor::values`],
//! [`ParamTensor`]) are plain buffers and can be shared freely.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::fmath;

/// Errors raised while recording operations, differentiating, or stepping an
/// optimizer.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },
    #[error("{op}: operand recorded on a different tape")]
    TapeMismatch { op: &'static str },
    #[error("value count {got} does not match shape {rows}x{cols}")]
    BadValueCount { got: usize, rows: usize, cols: usize },
    #[error("gradient target must have exactly one element, got {rows}x{cols}")]
    NonScalarGrad { rows: usize, cols: usize },
    #[error("{op}: empty operand list")]
    EmptyOperands { op: &'static str },
    #[error("{op}: range {start}..{end} out of bounds for extent {extent}")]
    RangeOutOfBounds {
        op: &'static str,
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("zero-sized tensors are not supported ({rows}x{cols})")]
    EmptyTensor { rows: usize, cols: usize },
    #[error("optimizer: got {params} parameters but {grads} gradients")]
    GradCountMismatch { params: usize, grads: usize },
    #[error("optimizer: non-finite gradient for parameter `{name}`")]
    NonFiniteGrad { name: String },
    #[error("optimizer: gradient length {got} does not match parameter `{name}` ({expect})")]
    GradLenMismatch { name: String, got: usize, expect: usize },
}

type Result<T> = core::result::Result<T, AdError>;

// ---------------------------------------------------------------------------
// Tape storage
// ---------------------------------------------------------------------------

/// Opcode of a recorded node. Operands are node ids, which always refer to
/// earlier nodes, so ascending id order is a topological order.
#[derive(Debug, Clone)]
enum Op {
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    SumAll(usize),
    Broadcast(usize),
    RepeatCols(usize),
    SumCols(usize),
    RepeatRows(usize),
    SumRows(usize),
    Relu(usize),
    MaxCols(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Sqrt(usize),
    Recip(usize),
    LogSoftmaxCols(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { src: usize, start: usize, len: usize },
    SliceRows { src: usize, start: usize, len: usize },
    Reshape(usize),
}

impl Op {
    fn inputs(&self, out: &mut Vec<usize>) {
        out.clear();
        match self {
            Op::Const => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => {
                out.push(*a);
                out.push(*b);
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SumAll(a)
            | Op::Broadcast(a)
            | Op::RepeatCols(a)
            | Op::SumCols(a)
            | Op::RepeatRows(a)
            | Op::SumRows(a)
            | Op::Relu(a)
            | Op::MaxCols(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::LogSoftmaxCols(a)
            | Op::SliceCols { src: a, .. }
            | Op::SliceRows { src: a, .. }
            | Op::Reshape(a) => out.push(*a),
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => out.extend_from_slice(parts),
        }
    }
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    grad_depth: u32,
}

/// Differentiation context: owns every recorded node and frees them all when
/// the last handle (tape or tensor) is dropped.
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value recorded on a [`Tape`].
///
/// Cloning is cheap (the buffer lives in the tape). Use [`Tensor::values`] to
/// copy the numbers out; detached copies are immutable snapshots and safe to
/// move across threads.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TapeInner>>,
    id: usize,
    rows: usize,
    cols: usize,
}

impl core::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Tensor(id={}, {}x{})", self.id, self.rows, self.cols)
    }
}

impl Tensor {
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Node id within the owning tape.
    pub fn id(&self) -> usize {
        self.id
    }
    /// Copies the forward values out of the tape (row-major).
    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().nodes[self.id].values.clone()
    }
    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.inner.borrow().nodes[self.id].values[0]
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grad_depth: 0,
            })),
        }
    }

    /// Number of recorded nodes (diagnostics).
    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Depth of nested `grad` re-recording currently in progress; 0 outside
    /// of any backward pass.
    pub fn grad_depth(&self) -> u32 {
        self.inner.borrow().grad_depth
    }

    fn owns(&self, t: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &t.inner)
    }

    fn check_owned(&self, op: &'static str, ts: &[&Tensor]) -> Result<()> {
        if ts.iter().all(|t| self.owns(t)) {
            Ok(())
        } else {
            Err(AdError::TapeMismatch { op })
        }
    }

    fn push(&self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(values.len(), rows * cols);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            rows,
            cols,
            values,
            op,
        });
        Tensor {
            inner: Rc::clone(&self.inner),
            id,
            rows,
            cols,
        }
    }

    fn with_values<R>(&self, id: usize, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().nodes[id].values)
    }

    fn with_values2<R>(&self, a: usize, b: usize, f: impl FnOnce(&[f64], &[f64]) -> R) -> R {
        let inner = self.inner.borrow();
        f(&inner.nodes[a].values, &inner.nodes[b].values)
    }

    // -- constructors -------------------------------------------------------

    /// Records a constant (leaf) matrix.
    pub fn constant(&self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Tensor> {
        if rows == 0 || cols == 0 {
            return Err(AdError::EmptyTensor { rows, cols });
        }
        if values.len() != rows * cols {
            return Err(AdError::BadValueCount {
                got: values.len(),
                rows,
                cols,
            });
        }
        Ok(self.push(rows, cols, values, Op::Const))
    }

    /// Records a `n x 1` column vector constant.
    pub fn vector(&self, values: Vec<f64>) -> Result<Tensor> {
        let n = values.len();
        self.constant(n, 1, values)
    }

    /// Records a `1 x 1` scalar constant.
    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(1, 1, vec![v], Op::Const)
    }

    /// Records an all-zero constant.
    pub fn zeros(&self, rows: usize, cols: usize) -> Result<Tensor> {
        self.constant(rows, cols, vec![0.0; rows * cols])
    }

    /// Records a parameter snapshot as a leaf tensor.
    pub fn param(&self, p: &ParamTensor) -> Result<Tensor> {
        self.constant(p.rows, p.cols, p.values.clone())
    }

    // -- elementwise --------------------------------------------------------

    fn binary_elementwise(
        &self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        op: fn(f64, f64) -> f64,
        code: fn(usize, usize) -> Op,
    ) -> Result<Tensor> {
        self.check_owned(name, &[a, b])?;
        if a.shape() != b.shape() {
            return Err(AdError::ShapeMismatch {
                op: name,
                lhs_rows: a.rows,
                lhs_cols: a.cols,
                rhs_rows: b.rows,
                rhs_cols: b.cols,
            });
        }
        let values = self.with_values2(a.id, b.id, |x, y| {
            x.iter().zip(y).map(|(p, q)| op(*p, *q)).collect()
        });
        Ok(self.push(a.rows, a.cols, values, code(a.id, b.id)))
    }

    fn unary_elementwise(
        &self,
        name: &'static str,
        a: &Tensor,
        op: impl Fn(f64) -> f64,
        code: fn(usize) -> Op,
    ) -> Result<Tensor> {
        self.check_owned(name, &[a])?;
        let values = self.with_values(a.id, |x| x.iter().map(|p| op(*p)).collect());
        Ok(self.push(a.rows, a.cols, values, code(a.id)))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn neg(&self, a: &Tensor) -> Result<Tensor> {
        self.unary_elementwise("neg", a, |x| -x, Op::Neg)
    }

    /// Multiplication by a compile-time constant scalar.
    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.check_owned("scale", &[a])?;
        let values = self.with_values(a.id, |x| x.iter().map(|p| p * c).collect());
        Ok(self.push(a.rows, a.cols, values, Op::Scale(a.id, c)))
    }

    /// Rectified linear unit; the subgradient at 0 is taken to be 0.
    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        self.unary_elementwise("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn sin(&self, a: &Tensor) -> Result<Tensor> {
        self.unary_elementwise("sin", a, fmath::sin, Op::Sin)
    }

    pub fn cos(&self, a: &Tensor) -> Result<Tensor> {
        self.unary_elementwise("cos", a, fmath::cos, Op::Cos)
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        self.unary_elementwise("exp", a, fmath::exp, Op::Exp)
    }

    /// Elementwise square root; the derivative at an exact 0 input is taken
    /// to be 0 (minimal-norm subgradient), which keeps distances between
    /// coincident points differentiable.
    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor> {
        self.unary_elementwise("sqrt", a, fmath::sqrt, Op::Sqrt)
    }

    pub fn recip(&self, a: &Tensor) -> Result<Tensor> {
        self.unary_elementwise("recip", a, |x| 1.0 / x, Op::Recip)
    }

    // -- linear algebra -----------------------------------------------------

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_owned("matmul", &[a, b])?;
        if a.cols != b.rows {
            return Err(AdError::ShapeMismatch {
                op: "matmul",
                lhs_rows: a.rows,
                lhs_cols: a.cols,
                rhs_rows: b.rows,
                rhs_cols: b.cols,
            });
        }
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let values = self.with_values2(a.id, b.id, |x, y| matmul_values(m, k, n, x, y));
        Ok(self.push(m, n, values, Op::Matmul(a.id, b.id)))
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned("transpose", &[a])?;
        let (r, c) = a.shape();
        let values = self.with_values(a.id, |x| {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x[i * c + j];
                }
            }
            out
        });
        Ok(self.push(c, r, values, Op::Transpose(a.id)))
    }

    // -- reductions and broadcasts -----------------------------------------

    /// Sum of every element, producing a `1 x 1` scalar.
    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned("sum_all", &[a])?;
        let s = self.with_values(a.id, |x| x.iter().sum());
        Ok(self.push(1, 1, vec![s], Op::SumAll(a.id)))
    }

    /// Mean of every element (composite: `sum_all` scaled by `1/len`).
    pub fn mean_all(&self, a: &Tensor) -> Result<Tensor> {
        let s = self.sum_all(a)?;
        self.scale(&s, 1.0 / a.len() as f64)
    }

    /// Fills a `rows x cols` tensor with a scalar value.
    pub fn broadcast(&self, a: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
        self.check_owned("broadcast", &[a])?;
        if a.len() != 1 {
            return Err(AdError::NonScalarGrad {
                rows: a.rows,
                cols: a.cols,
            });
        }
        if rows == 0 || cols == 0 {
            return Err(AdError::EmptyTensor { rows, cols });
        }
        let v = self.with_values(a.id, |x| x[0]);
        Ok(self.push(rows, cols, vec![v; rows * cols], Op::Broadcast(a.id)))
    }

    /// Repeats a column vector `n` times: `r x 1 -> r x n`.
    pub fn repeat_cols(&self, a: &Tensor, n: usize) -> Result<Tensor> {
        self.check_owned("repeat_cols", &[a])?;
        if a.cols != 1 || n == 0 {
            return Err(AdError::ShapeMismatch {
                op: "repeat_cols",
                lhs_rows: a.rows,
                lhs_cols: a.cols,
                rhs_rows: a.rows,
                rhs_cols: n,
            });
        }
        let r = a.rows;
        let values = self.with_values(a.id, |x| {
            let mut out = vec![0.0; r * n];
            for i in 0..r {
                for j in 0..n {
                    out[i * n + j] = x[i];
                }
            }
            out
        });
        Ok(self.push(r, n, values, Op::RepeatCols(a.id)))
    }

    /// Sums over columns: `r x c -> r x 1`.
    pub fn sum_cols(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned("sum_cols", &[a])?;
        let (r, c) = a.shape();
        let values = self.with_values(a.id, |x| {
            (0..r).map(|i| x[i * c..(i + 1) * c].iter().sum()).collect()
        });
        Ok(self.push(r, 1, values, Op::SumCols(a.id)))
    }

    /// Repeats a row vector `n` times: `1 x c -> n x c`.
    pub fn repeat_rows(&self, a: &Tensor, n: usize) -> Result<Tensor> {
        self.check_owned("repeat_rows", &[a])?;
        if a.rows != 1 || n == 0 {
            return Err(AdError::ShapeMismatch {
                op: "repeat_rows",
                lhs_rows: a.rows,
                lhs_cols: a.cols,
                rhs_rows: n,
                rhs_cols: a.cols,
            });
        }
        let c = a.cols;
        let values = self.with_values(a.id, |x| {
            let mut out = Vec::with_capacity(n * c);
            for _ in 0..n {
                out.extend_from_slice(x);
            }
            out
        });
        Ok(self.push(n, c, values, Op::RepeatRows(a.id)))
    }

    /// Sums over rows: `r x c -> 1 x c`.
    pub fn sum_rows(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned("sum_rows", &[a])?;
        let (r, c) = a.shape();
        let values = self.with_values(a.id, |x| {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += x[i * c + j];
                }
            }
            out
        });
        Ok(self.push(1, c, values, Op::SumRows(a.id)))
    }

    /// Row-wise maximum over columns: `r x c -> r x 1`. Ties resolve to the
    /// lowest column index in the backward pass.
    pub fn max_cols(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned("max_cols", &[a])?;
        let (r, c) = a.shape();
        let values = self.with_values(a.id, |x| {
            (0..r)
                .map(|i| x[i * c..(i + 1) * c].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect()
        });
        Ok(self.push(r, 1, values, Op::MaxCols(a.id)))
    }

    /// Column-wise log-softmax over rows (each column is one sample's
    /// logits), computed with the max-shift for stability.
    pub fn log_softmax_cols(&self, a: &Tensor) -> Result<Tensor> {
        self.check_owned("log_softmax_cols", &[a])?;
        let (r, c) = a.shape();
        let values = self.with_values(a.id, |x| {
            let mut out = vec![0.0; r * c];
            for j in 0..c {
                let mut m = f64::NEG_INFINITY;
                for i in 0..r {
                    m = m.max(x[i * c + j]);
                }
                let mut s = 0.0;
                for i in 0..r {
                    s += fmath::exp(x[i * c + j] - m);
                }
                let lse = m + fmath::ln(s);
                for i in 0..r {
                    out[i * c + j] = x[i * c + j] - lse;
                }
            }
            out
        });
        Ok(self.push(r, c, values, Op::LogSoftmaxCols(a.id)))
    }

    /// Column-wise softmax over rows (composite: `exp(log_softmax)`).
    pub fn softmax_cols(&self, a: &Tensor) -> Result<Tensor> {
        let ls = self.log_softmax_cols(a)?;
        self.exp(&ls)
    }

    // -- concatenation, slicing, reshaping ----------------------------------

    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor> {
        self.check_owned("concat_cols", parts)?;
        let first = *parts.first().ok_or(AdError::EmptyOperands { op: "concat_cols" })?;
        let r = first.rows;
        let mut total = 0;
        for p in parts {
            if p.rows != r {
                return Err(AdError::ShapeMismatch {
                    op: "concat_cols",
                    lhs_rows: r,
                    lhs_cols: first.cols,
                    rhs_rows: p.rows,
                    rhs_cols: p.cols,
                });
            }
            total += p.cols;
        }
        let mut values = vec![0.0; r * total];
        {
            let inner = self.inner.borrow();
            let mut off = 0;
            for p in parts {
                let src = &inner.nodes[p.id].values;
                for i in 0..r {
                    values[i * total + off..i * total + off + p.cols]
                        .copy_from_slice(&src[i * p.cols..(i + 1) * p.cols]);
                }
                off += p.cols;
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(r, total, values, Op::ConcatCols(ids)))
    }

    pub fn concat_rows(&self, parts: &[&Tensor]) -> Result<Tensor> {
        self.check_owned("concat_rows", parts)?;
        let first = *parts.first().ok_or(AdError::EmptyOperands { op: "concat_rows" })?;
        let c = first.cols;
        let mut total = 0;
        for p in parts {
            if p.cols != c {
                return Err(AdError::ShapeMismatch {
                    op: "concat_rows",
                    lhs_rows: first.rows,
                    lhs_cols: c,
                    rhs_rows: p.rows,
                    rhs_cols: p.cols,
                });
            }
            total += p.rows;
        }
        let mut values = Vec::with_capacity(total * c);
        {
            let inner = self.inner.borrow();
            for p in parts {
                values.extend_from_slice(&inner.nodes[p.id].values);
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(total, c, values, Op::ConcatRows(ids)))
    }

    pub fn slice_cols(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        self.check_owned("slice_cols", &[a])?;
        let (r, c) = a.shape();
        if len == 0 || start + len > c {
            return Err(AdError::RangeOutOfBounds {
                op: "slice_cols",
                start,
                end: start + len,
                extent: c,
            });
        }
        let values = self.with_values(a.id, |x| {
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&x[i * c + start..i * c + start + len]);
            }
            out
        });
        Ok(self.push(r, len, values, Op::SliceCols { src: a.id, start, len }))
    }

    pub fn slice_rows(&self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        self.check_owned("slice_rows", &[a])?;
        let (r, c) = a.shape();
        if len == 0 || start + len > r {
            return Err(AdError::RangeOutOfBounds {
                op: "slice_rows",
                start,
                end: start + len,
                extent: r,
            });
        }
        let values = self.with_values(a.id, |x| x[start * c..(start + len) * c].to_vec());
        Ok(self.push(len, c, values, Op::SliceRows { src: a.id, start, len }))
    }

    /// Reinterprets the row-major buffer under a new shape with the same
    /// element count.
    pub fn reshape(&self, a: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
        self.check_owned("reshape", &[a])?;
        if rows * cols != a.len() || rows == 0 || cols == 0 {
            return Err(AdError::ShapeMismatch {
                op: "reshape",
                lhs_rows: a.rows,
                lhs_cols: a.cols,
                rhs_rows: rows,
                rhs_cols: cols,
            });
        }
        let values = self.with_values(a.id, |x| x.to_vec());
        Ok(self.push(rows, cols, values, Op::Reshape(a.id)))
    }

    /// Flattened dot product of two same-shape tensors (composite).
    pub fn dot(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let p = self.mul(a, b)?;
        self.sum_all(&p)
    }

    // -- differentiation ----------------------------------------------------

    /// Reverse-mode gradient of a one-element `output` with respect to each
    /// tensor in `wrt`.
    ///
    /// The backward computation is emitted onto this same tape. With
    /// `create_graph = true` the returned tensors stay connected to the
    /// graph and can be differentiated again; with `create_graph = false`
    /// they are detached constants. A `wrt` entry that does not participate
    /// in `output`'s graph yields an all-zero tensor of its shape.
    pub fn grad(&self, output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
        self.check_owned("grad", &[output])?;
        self.check_owned("grad", wrt)?;
        if output.len() != 1 {
            return Err(AdError::NonScalarGrad {
                rows: output.rows,
                cols: output.cols,
            });
        }

        self.inner.borrow_mut().grad_depth += 1;
        let result = self.grad_inner(output, wrt, create_graph);
        self.inner.borrow_mut().grad_depth -= 1;
        result
    }

    fn grad_inner(&self, output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
        let out_id = output.id;
        let n = out_id + 1;

        // Ancestors of the output (nodes its value depends on).
        let mut anc = vec![false; n];
        anc[out_id] = true;
        // Nodes through which some wrt leaf can influence the output.
        let mut act = vec![false; n];
        for w in wrt {
            if w.id < n {
                act[w.id] = true;
            }
        }
        let mut ins: Vec<usize> = Vec::with_capacity(4);
        {
            let inner = self.inner.borrow();
            for id in (0..n).rev() {
                if anc[id] {
                    inner.nodes[id].op.inputs(&mut ins);
                    for &i in &ins {
                        anc[i] = true;
                    }
                }
            }
            for id in 0..n {
                if !act[id] {
                    inner.nodes[id].op.inputs(&mut ins);
                    if ins.iter().any(|&i| act[i]) {
                        act[id] = true;
                    }
                }
            }
        }

        let mut adjoint: Vec<Option<Tensor>> = Vec::with_capacity(n);
        adjoint.resize_with(n, || None);
        adjoint[out_id] = Some(self.scalar(1.0));

        for id in (0..n).rev() {
            if !(anc[id] && act[id]) {
                continue;
            }
            let Some(g) = adjoint[id].clone() else { continue };
            let op = self.inner.borrow().nodes[id].op.clone();
            self.backprop_node(id, &op, &g, &act, &mut adjoint)?;
        }

        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            let g = match adjoint.get(w.id).cloned().flatten() {
                Some(g) => g,
                None => self.zeros(w.rows, w.cols)?,
            };
            if create_graph {
                out.push(g);
            } else {
                out.push(self.constant(g.rows, g.cols, g.values())?);
            }
        }
        Ok(out)
    }

    fn accumulate(
        &self,
        adjoint: &mut [Option<Tensor>],
        act: &[bool],
        target: usize,
        contrib: Tensor,
    ) -> Result<()> {
        if target >= act.len() || !act[target] {
            return Ok(());
        }
        adjoint[target] = Some(match adjoint[target].take() {
            None => contrib,
            Some(existing) => self.add(&existing, &contrib)?,
        });
        Ok(())
    }

    /// Emits the vector-Jacobian product of one node as tape operations.
    fn backprop_node(
        &self,
        id: usize,
        op: &Op,
        g: &Tensor,
        act: &[bool],
        adjoint: &mut [Option<Tensor>],
    ) -> Result<()> {
        let t = |nid: usize| -> Tensor {
            let inner = self.inner.borrow();
            let node = &inner.nodes[nid];
            Tensor {
                inner: Rc::clone(&self.inner),
                id: nid,
                rows: node.rows,
                cols: node.cols,
            }
        };
        match *op {
            Op::Const => {}
            Op::Add(a, b) => {
                self.accumulate(adjoint, act, a, g.clone())?;
                self.accumulate(adjoint, act, b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(adjoint, act, a, g.clone())?;
                if b < act.len() && act[b] {
                    let c = self.neg(g)?;
                    self.accumulate(adjoint, act, b, c)?;
                }
            }
            Op::Mul(a, b) => {
                if a < act.len() && act[a] {
                    let c = self.mul(g, &t(b))?;
                    self.accumulate(adjoint, act, a, c)?;
                }
                if b < act.len() && act[b] {
                    let c = self.mul(g, &t(a))?;
                    self.accumulate(adjoint, act, b, c)?;
                }
            }
            Op::Neg(a) => {
                let c = self.neg(g)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::Scale(a, k) => {
                let c = self.scale(g, k)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::Matmul(a, b) => {
                if a < act.len() && act[a] {
                    let bt = self.transpose(&t(b))?;
                    let c = self.matmul(g, &bt)?;
                    self.accumulate(adjoint, act, a, c)?;
                }
                if b < act.len() && act[b] {
                    let at = self.transpose(&t(a))?;
                    let c = self.matmul(&at, g)?;
                    self.accumulate(adjoint, act, b, c)?;
                }
            }
            Op::Transpose(a) => {
                let c = self.transpose(g)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::SumAll(a) => {
                let src = t(a);
                let c = self.broadcast(g, src.rows, src.cols)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::Broadcast(a) => {
                let c = self.sum_all(g)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::RepeatCols(a) => {
                let c = self.sum_cols(g)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::SumCols(a) => {
                let src = t(a);
                let c = self.repeat_cols(g, src.cols)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::RepeatRows(a) => {
                let c = self.sum_rows(g)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::SumRows(a) => {
                let src = t(a);
                let c = self.repeat_rows(g, src.rows)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::Relu(a) => {
                let mask = self.with_values(a, |x| {
                    x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect()
                });
                let src = t(a);
                let mask = self.constant(src.rows, src.cols, mask)?;
                let c = self.mul(g, &mask)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::MaxCols(a) => {
                // One-hot argmax mask; ties resolve to the lowest column.
                let src = t(a);
                let (r, c_n) = src.shape();
                let mask = self.with_values(a, |x| {
                    let mut m = vec![0.0; r * c_n];
                    for i in 0..r {
                        let row = &x[i * c_n..(i + 1) * c_n];
                        let mut best = 0;
                        for j in 1..c_n {
                            if row[j] > row[best] {
                                best = j;
                            }
                        }
                        m[i * c_n + best] = 1.0;
                    }
                    m
                });
                let mask = self.constant(r, c_n, mask)?;
                let wide = self.repeat_cols(g, c_n)?;
                let c = self.mul(&wide, &mask)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::Sin(a) => {
                let c = self.cos(&t(a))?;
                let c = self.mul(g, &c)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::Cos(a) => {
                let s = self.sin(&t(a))?;
                let c = self.mul(g, &s)?;
                let c = self.neg(&c)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::Exp(a) => {
                let c = self.mul(g, &t(id))?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::Sqrt(a) => {
                // d sqrt = g / (2 sqrt); define 0 at an exact zero output.
                let out = t(id);
                let (pos, bump) = self.with_values(id, |x| {
                    let pos: Vec<f64> = x.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                    let bump: Vec<f64> = x.iter().map(|&v| if v > 0.0 { 0.0 } else { 1.0 }).collect();
                    (pos, bump)
                });
                let pos = self.constant(out.rows, out.cols, pos)?;
                let bump = self.constant(out.rows, out.cols, bump)?;
                let safe = self.add(&out, &bump)?;
                let half_inv = self.scale(&self.recip(&safe)?, 0.5)?;
                let c = self.mul(g, &half_inv)?;
                let c = self.mul(&c, &pos)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::Recip(a) => {
                let out = t(id);
                let sq = self.mul(&out, &out)?;
                let c = self.mul(g, &sq)?;
                let c = self.neg(&c)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::LogSoftmaxCols(a) => {
                // d = g - softmax * colsum(g)
                let out = t(id);
                let sm = self.exp(&out)?;
                let gs = self.sum_rows(g)?;
                let gs = self.repeat_rows(&gs, out.rows)?;
                let c = self.sub(g, &self.mul(&sm, &gs)?)?;
                self.accumulate(adjoint, act, a, c)?;
            }
            Op::ConcatCols(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = t(p).cols;
                    if p < act.len() && act[p] {
                        let c = self.slice_cols(g, off, pc)?;
                        self.accumulate(adjoint, act, p, c)?;
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut off = 0;
                for &p in parts {
                    let pr = t(p).rows;
                    if p < act.len() && act[p] {
                        let c = self.slice_rows(g, off, pr)?;
                        self.accumulate(adjoint, act, p, c)?;
                    }
                    off += pr;
                }
            }
            Op::SliceCols { src, start, len } => {
                let s = t(src);
                let mut parts: Vec<Tensor> = Vec::with_capacity(3);
                if start > 0 {
                    parts.push(self.zeros(s.rows, start)?);
                }
                parts.push(g.clone());
                if start + len < s.cols {
                    parts.push(self.zeros(s.rows, s.cols - start - len)?);
                }
                let refs: Vec<&Tensor> = parts.iter().collect();
                let c = self.concat_cols(&refs)?;
                self.accumulate(adjoint, act, src, c)?;
            }
            Op::SliceRows { src, start, len } => {
                let s = t(src);
                let mut parts: Vec<Tensor> = Vec::with_capacity(3);
                if start > 0 {
                    parts.push(self.zeros(start, s.cols)?);
                }
                parts.push(g.clone());
                if start + len < s.rows {
                    parts.push(self.zeros(s.rows - start - len, s.cols)?);
                }
                let refs: Vec<&Tensor> = parts.iter().collect();
                let c = self.concat_rows(&refs)?;
                self.accumulate(adjoint, act, src, c)?;
            }
            Op::Reshape(a) => {
                let src = t(a);
                let c = self.reshape(g, src.rows, src.cols)?;
                self.accumulate(adjoint, act, a, c)?;
            }
        }
        Ok(())
    }
}

fn matmul_values(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m * k * n >= 4096 {
        // Large products go through the tuned kernel; small ones stay on the
        // plain loop to avoid its setup cost. Both are deterministic.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    } else {
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let crow = &mut c[i * n..(i + 1) * n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
    }
    c
}

// ---------------------------------------------------------------------------
// Parameters and optimizers
// ---------------------------------------------------------------------------

/// Named parameter matrix living outside any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ParamTensor {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> Self {
        let name = name.into();
        assert_eq!(values.len(), rows * cols, "parameter `{name}` value count");
        ParamTensor {
            name,
            rows,
            cols,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Update rule selector for [`Optimizer`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimAlgo {
    /// Plain gradient descent: `p <- p - lr * g`.
    Sgd,
    /// Adam with bias correction.
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

/// First-order optimizer holding per-parameter moment buffers and a step
/// counter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub algo: OptimAlgo,
    pub lr: f64,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer {
            algo: OptimAlgo::Sgd,
            lr,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Adam with the standard defaults `beta = (0.9, 0.999)`, `eps = 1e-8`.
    pub fn adam(lr: f64) -> Self {
        Optimizer {
            algo: OptimAlgo::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            lr,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Restores internal state (moments and step counter), e.g. from a
    /// checkpoint. Buffers must match the parameter layout on the next step.
    pub fn restore(&mut self, step_count: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.step_count = step_count;
        self.m = m;
        self.v = v;
    }

    /// Read access to the moment buffers (for checkpointing).
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Applies one update. Rejects non-finite gradients, naming the
    /// offending parameter, before touching any state.
    pub fn step(&mut self, params: &mut [ParamTensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(AdError::GradCountMismatch {
                params: params.len(),
                grads: grads.len(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if g.len() != p.values.len() {
                return Err(AdError::GradLenMismatch {
                    name: p.name.clone(),
                    got: g.len(),
                    expect: p.values.len(),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AdError::NonFiniteGrad {
                    name: p.name.clone(),
                });
            }
        }

        match self.algo {
            OptimAlgo::Sgd => {
                self.step_count += 1;
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.values.iter_mut().zip(g) {
                        *pv -= self.lr * gv;
                    }
                }
            }
            OptimAlgo::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
                    self.v = params.iter().map(|p| vec![0.0; p.values.len()]).collect();
                }
                self.step_count += 1;
                let t = self.step_count as i32;
                let bc1 = 1.0 - fmath::powf(beta1, f64::from(t));
                let bc2 = 1.0 - fmath::powf(beta2, f64::from(t));
                for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.m[idx];
                    let v = &mut self.v[idx];
                    for i in 0..g.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p.values[i] -= self.lr * mhat / (fmath::sqrt(vhat) + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Formats a gradient diagnostic used by training loops when aborting on
/// divergence.
pub fn describe_nonfinite(params: &[ParamTensor], grads: &[Vec<f64>]) -> Option<String> {
    for (p, g) in params.iter().zip(grads) {
        if let Some((i, x)) = g.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Some(format!(
                "non-finite gradient {x} at component {i} of parameter `{}`",
                p.name
            ));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward() {
        let tape = Tape::new();
        let x = tape.vector(vec![-1.0, 2.0]).unwrap();
        let y = tape.relu(&x).unwrap();
        assert_eq!(y.values(), vec![0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let i2 = tape.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let v = tape.constant(2, 1, vec![3.0, 4.0]).unwrap();
        let y = tape.matmul(&i2, &v).unwrap();
        assert_eq!(y.values(), vec![3.0, 4.0]);
        assert_eq!(y.shape(), (2, 1));
    }

    #[test]
    fn sum_all_example() {
        let tape = Tape::new();
        let x = tape.vector(vec![1.0, 2.0, 3.0]).unwrap();
        let s = tape.sum_all(&x).unwrap();
        assert_eq!(s.item(), 6.0);
    }

    #[test]
    fn grad_of_square() {
        let tape = Tape::new();
        let x = tape.scalar(3.0);
        let y = tape.mul(&x, &x).unwrap();
        let g = tape.grad(&y, &[&x], false).unwrap();
        assert_eq!(g[0].item(), 6.0);
    }

    #[test]
    fn grad_of_grad_of_cube() {
        let tape = Tape::new();
        let x = tape.scalar(2.0);
        let x2 = tape.mul(&x, &x).unwrap();
        let y = tape.mul(&x2, &x).unwrap();
        let g = tape.grad(&y, &[&x], true).unwrap();
        assert_eq!(g[0].item(), 12.0); // 3 x^2
        let gg = tape.grad(&g[0], &[&x], false).unwrap();
        assert_eq!(gg[0].item(), 12.0); // 6 x
    }

    #[test]
    fn detached_gradient_cuts_graph() {
        // With create_graph = false the returned gradient is a constant:
        // differentiating through it yields zero.
        let tape = Tape::new();
        let x = tape.scalar(2.0);
        let x2 = tape.mul(&x, &x).unwrap();
        let y = tape.mul(&x2, &x).unwrap();
        let g = tape.grad(&y, &[&x], false).unwrap();
        let gg = tape.grad(&g[0], &[&x], false).unwrap();
        assert_eq!(gg[0].item(), 0.0);
    }

    #[test]
    fn non_participating_wrt_gets_zeros() {
        let tape = Tape::new();
        let x = tape.scalar(3.0);
        let z = tape.vector(vec![1.0, 2.0]).unwrap();
        let y = tape.mul(&x, &x).unwrap();
        let g = tape.grad(&y, &[&z], false).unwrap();
        assert_eq!(g[0].values(), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_grad_rejected() {
        let tape = Tape::new();
        let x = tape.vector(vec![1.0, 2.0]).unwrap();
        let err = tape.grad(&x, &[&x], false).unwrap_err();
        assert!(matches!(err, AdError::NonScalarGrad { .. }));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let tape = Tape::new();
        let a = tape.vector(vec![1.0, 2.0]).unwrap();
        let b = tape.vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            tape.add(&a, &b),
            Err(AdError::ShapeMismatch { .. })
        ));
        let m = tape.constant(2, 2, vec![1.0; 4]).unwrap();
        assert!(matches!(
            tape.matmul(&a, &m),
            Err(AdError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn cross_tape_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.scalar(1.0);
        let b = t2.scalar(2.0);
        assert!(matches!(t1.add(&a, &b), Err(AdError::TapeMismatch { .. })));
    }

    #[test]
    fn grad_depth_tracks_nesting() {
        let tape = Tape::new();
        assert_eq!(tape.grad_depth(), 0);
        let x = tape.scalar(2.0);
        let y = tape.mul(&x, &x).unwrap();
        let _ = tape.grad(&y, &[&x], true).unwrap();
        assert_eq!(tape.grad_depth(), 0);
    }

    #[test]
    fn sgd_step() {
        let mut p = vec![ParamTensor::new("w", 1, 1, vec![1.0])];
        let mut opt = Optimizer::sgd(0.1);
        opt.step(&mut p, &[vec![2.0]]).unwrap();
        assert_eq!(p[0].values[0], 0.8);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![ParamTensor::new("w", 1, 2, vec![0.5, -0.5])];
        let mut opt = Optimizer::adam(1e-3);
        opt.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p[0].values, vec![0.5, -0.5]);
    }

    #[test]
    fn adam_first_step_matches_hand_evaluation() {
        // t=1, g=1: mhat=1, vhat=1, so the update is lr / (1 + eps).
        let mut p = vec![ParamTensor::new("w", 1, 1, vec![0.0])];
        let mut opt = Optimizer::adam(1e-3);
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        assert!((p[0].values[0] - (-1e-3)).abs() < 1e-9);
    }

    #[test]
    fn nonfinite_gradient_names_parameter() {
        let mut p = vec![
            ParamTensor::new("w1", 1, 1, vec![0.0]),
            ParamTensor::new("w2", 1, 1, vec![0.0]),
        ];
        let mut opt = Optimizer::sgd(0.1);
        let err = opt
            .step(&mut p, &[vec![1.0], vec![f64::NAN]])
            .unwrap_err();
        match err {
            AdError::NonFiniteGrad { name } => assert_eq!(name, "w2"),
            other => panic!("unexpected error {other:?}"),
        }
        // Nothing was applied.
        assert_eq!(p[0].values[0], 0.0);
    }

    #[test]
    fn softmax_is_normalized() {
        let tape = Tape::new();
        let x = tape.constant(3, 2, vec![1.0, -2.0, 0.5, 0.0, 2.0, 3.0]).unwrap();
        let s = tape.softmax_cols(&x).unwrap();
        let v = s.values();
        let col0: f64 = v[0] + v[2] + v[4];
        let col1: f64 = v[1] + v[3] + v[5];
        assert!((col0 - 1.0).abs() < 1e-12);
        assert!((col1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let tape = Tape::new();
        let x = tape.constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let a = tape.slice_cols(&x, 0, 1).unwrap();
        let b = tape.slice_cols(&x, 1, 2).unwrap();
        let y = tape.concat_cols(&[&a, &b]).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn out_of_range_slice_rejected() {
        let tape = Tape::new();
        let x = tape.constant(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(
            tape.slice_cols(&x, 2, 2),
            Err(AdError::RangeOutOfBounds { .. })
        ));
    }
}
