//! Dense row-major tensors with reverse-mode differentiation.
//!
//! Every tensor is a node in an implicit computation graph: ops record a
//! backward closure and keep handles to their inputs. `Tensor::backward`
//! walks the reachable graph in reverse creation order, which makes gradient
//! accumulation deterministic. Training runs in `f32`; gradient checking
//! runs the same code in `f64`.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Floating-point element type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_v(self) -> bool;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn maxv(self, other: Self) -> Self;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn is_finite_v(self) -> bool {
        self.is_finite()
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn maxv(self, other: Self) -> Self {
        f32::max(self, other)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn is_finite_v(self) -> bool {
        self.is_finite()
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn maxv(self, other: Self) -> Self {
        f64::max(self, other)
    }
}

thread_local! {
    static NEXT_SEQ: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn next_seq() -> u64 {
    NEXT_SEQ.with(|c| {
        let v = c.get();
        c.set(v + 1);
        v
    })
}

/// Disables graph recording while alive (inference / data paths).
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(false));
        NoGradGuard { prev }
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|c| c.set(prev));
    }
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Backward closure: maps the output gradient to per-parent gradient
/// buffers (empty vec for parents that don't need one).
type BackwardFn<T> = Box<dyn Fn(&[T]) -> Vec<Vec<T>>>;

struct Node<T: Scalar> {
    seq: u64,
    dims: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    is_leaf: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Handle to a tensor node. Cloning is cheap and shares the node.
pub struct Tensor<T: Scalar> {
    node: Rc<RefCell<Node<T>>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.node.borrow();
        write!(
            f,
            "Tensor(dims={:?}, requires_grad={}, len={})",
            n.dims,
            n.requires_grad,
            n.values.len()
        )
    }
}

fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

fn check_finite<T: Scalar>(op: &'static str, values: &[T]) -> Result<()> {
    if values.iter().all(|v| v.is_finite_v()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Scalar> Tensor<T> {
    fn from_node(node: Node<T>) -> Self {
        Tensor {
            node: Rc::new(RefCell::new(node)),
        }
    }

    /// Constant tensor (no gradient).
    pub fn new(dims: &[usize], values: Vec<T>) -> Result<Self> {
        if numel(dims) != values.len() {
            return Err(Error::ShapeMismatch {
                op: "new",
                detail: format!("dims {:?} need {} values, got {}", dims, numel(dims), values.len()),
            });
        }
        check_finite("new", &values)?;
        Ok(Self::from_node(Node {
            seq: next_seq(),
            dims: dims.to_vec(),
            values,
            grad: None,
            requires_grad: false,
            is_leaf: true,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Trainable leaf tensor.
    pub fn param(dims: &[usize], values: Vec<T>) -> Result<Self> {
        let t = Self::new(dims, values)?;
        t.node.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::new(dims, vec![T::ZERO; numel(dims)]).expect("zeros")
    }

    pub fn scalar(v: T) -> Result<Self> {
        Self::new(&[], vec![v])
    }

    pub fn dims(&self) -> Vec<usize> {
        self.node.borrow().dims.clone()
    }

    pub fn len(&self) -> usize {
        self.node.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.borrow().requires_grad
    }

    pub fn values(&self) -> Vec<T> {
        self.node.borrow().values.clone()
    }

    /// Borrow the values without cloning.
    pub fn with_values<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.node.borrow().values)
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> Result<T> {
        let n = self.node.borrow();
        if n.values.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "item",
                detail: format!("expected 1 element, got {}", n.values.len()),
            });
        }
        Ok(n.values[0])
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.node.borrow_mut().grad = None;
    }

    /// In-place update of a leaf's values and gradient, for the optimizer.
    pub(crate) fn update_leaf(&self, f: impl FnOnce(&mut Vec<T>, &mut Option<Vec<T>>)) {
        let mut n = self.node.borrow_mut();
        debug_assert!(n.is_leaf, "update_leaf on a non-leaf tensor");
        let n = &mut *n;
        f(&mut n.values, &mut n.grad);
    }

    fn make_op(dims: Vec<usize>, values: Vec<T>, parents: Vec<Tensor<T>>, backward: BackwardFn<T>) -> Self {
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        Self::from_node(Node {
            seq: next_seq(),
            dims,
            values,
            grad: None,
            requires_grad,
            is_leaf: false,
            parents: if requires_grad { parents } else { Vec::new() },
            backward: if requires_grad { Some(backward) } else { None },
        })
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        let n = self.node.borrow();
        match n.dims.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op,
                detail: format!("expected a matrix, got dims {:?}", other),
            }),
        }
    }

    // ---- ops ----

    /// Matrix product `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, ka) = self.dims2("matmul")?;
        let (kb, n) = rhs.dims2("matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {} vs {}", ka, kb),
            });
        }
        let a = self.values();
        let b = rhs.values();
        let out = matmul_raw(&a, m, ka, &b, n);
        check_finite("matmul", &out)?;
        let needs = [self.requires_grad(), rhs.requires_grad()];
        let (av, bv) = (a, b);
        Ok(Self::make_op(
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let da = if needs[0] {
                    // dA = g . B^T
                    let bt = transpose_raw(&bv, ka, n);
                    matmul_raw(g, m, n, &bt, ka)
                } else {
                    Vec::new()
                };
                let db = if needs[1] {
                    // dB = A^T . g
                    let at = transpose_raw(&av, m, ka);
                    matmul_raw(&at, ka, m, g, n)
                } else {
                    Vec::new()
                };
                vec![da, db]
            }),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor<T>> {
        let (r, c) = self.dims2("transpose")?;
        let v = self.values();
        let out = transpose_raw(&v, r, c);
        Ok(Self::make_op(
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g| vec![transpose_raw(g, c, r)]),
        ))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (da, db) = (self.dims(), rhs.dims());
        if da != db {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", da, db),
            });
        }
        let a = self.values();
        let b = rhs.values();
        let out: Vec<T> = a.iter().zip(&b).map(|(&x, &y)| x + y).collect();
        check_finite("add", &out)?;
        Ok(Self::make_op(
            da,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| vec![g.to_vec(), g.to_vec()]),
        ))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (da, db) = (self.dims(), rhs.dims());
        if da != db {
            return Err(Error::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", da, db),
            });
        }
        let a = self.values();
        let b = rhs.values();
        let out: Vec<T> = a.iter().zip(&b).map(|(&x, &y)| x * y).collect();
        check_finite("mul", &out)?;
        let (av, bv) = (a, b);
        let needs = [self.requires_grad(), rhs.requires_grad()];
        Ok(Self::make_op(
            da,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let da = if needs[0] {
                    g.iter().zip(&bv).map(|(&gi, &bi)| gi * bi).collect()
                } else {
                    Vec::new()
                };
                let db = if needs[1] {
                    g.iter().zip(&av).map(|(&gi, &ai)| gi * ai).collect()
                } else {
                    Vec::new()
                };
                vec![da, db]
            }),
        ))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        let out: Vec<T> = self.with_values(|v| v.iter().map(|&x| x * c).collect());
        check_finite("scale", &out)?;
        Ok(Self::make_op(
            self.dims(),
            out,
            vec![self.clone()],
            Box::new(move |g| vec![g.iter().map(|&gi| gi * c).collect()]),
        ))
    }

    /// Add a `[D]` (or `[1, D]`) vector to every row of a `[R x D]` matrix.
    pub fn add_row_broadcast(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        let (r, d) = self.dims2("add_row_broadcast")?;
        let vd = v.dims();
        let dv = match vd.as_slice() {
            [n] => *n,
            [1, n] => *n,
            other => {
                return Err(Error::ShapeMismatch {
                    op: "add_row_broadcast",
                    detail: format!("expected [D] vector, got {:?}", other),
                })
            }
        };
        if dv != d {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                detail: format!("row width {} vs vector length {}", d, dv),
            });
        }
        let a = self.values();
        let b = v.values();
        let mut out = a;
        for row in out.chunks_mut(d) {
            for (o, &vi) in row.iter_mut().zip(&b) {
                *o = *o + vi;
            }
        }
        check_finite("add_row_broadcast", &out)?;
        let vdims = vd.clone();
        Ok(Self::make_op(
            vec![r, d],
            out,
            vec![self.clone(), v.clone()],
            Box::new(move |g| {
                let mut dv = vec![T::ZERO; numel(&vdims)];
                for row in g.chunks(d) {
                    for (acc, &gi) in dv.iter_mut().zip(row) {
                        *acc += gi;
                    }
                }
                vec![g.to_vec(), dv]
            }),
        ))
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&self) -> Result<Tensor<T>> {
        let dims = self.dims();
        let k = *dims.last().ok_or(Error::ShapeMismatch {
            op: "softmax",
            detail: "scalar input".into(),
        })?;
        if k == 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax",
                detail: "last axis is empty".into(),
            });
        }
        let v = self.values();
        let mut out = vec![T::ZERO; v.len()];
        for (row_in, row_out) in v.chunks(k).zip(out.chunks_mut(k)) {
            softmax_row(row_in, row_out);
        }
        check_finite("softmax", &out)?;
        let saved = out.clone();
        Ok(Self::make_op(
            dims,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::ZERO; g.len()];
                for ((s, gr), dr) in saved.chunks(k).zip(g.chunks(k)).zip(dx.chunks_mut(k)) {
                    let mut dot = T::ZERO;
                    for (si, gi) in s.iter().zip(gr) {
                        dot += *si * *gi;
                    }
                    for ((di, &si), &gi) in dr.iter_mut().zip(s).zip(gr) {
                        *di = si * (gi - dot);
                    }
                }
                vec![dx]
            }),
        ))
    }

    /// Per-row layer normalization over the last axis, then affine.
    pub fn layer_norm(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let dims = self.dims();
        let d = *dims.last().ok_or(Error::ShapeMismatch {
            op: "layer_norm",
            detail: "scalar input".into(),
        })?;
        if gain.dims() != [d] || bias.dims() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} must both be [{}]",
                    gain.dims(),
                    bias.dims(),
                    d
                ),
            });
        }
        let x = self.values();
        let g = gain.values();
        let b = bias.values();
        let rows = x.len() / d;
        let mut out = vec![T::ZERO; x.len()];
        let mut xhat = vec![T::ZERO; x.len()];
        let mut inv_std = vec![T::ZERO; rows];
        let dn = T::from_f64(d as f64);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mut mean = T::ZERO;
            for &xi in row {
                mean += xi;
            }
            mean = mean / dn;
            let mut var = T::ZERO;
            for &xi in row {
                let c = xi - mean;
                var += c * c;
            }
            var = var / dn;
            let inv = T::ONE / (var + eps).sqrt();
            inv_std[r] = inv;
            for i in 0..d {
                let xh = (row[i] - mean) * inv;
                xhat[r * d + i] = xh;
                out[r * d + i] = g[i] * xh + b[i];
            }
        }
        check_finite("layer_norm", &out)?;
        let needs = [self.requires_grad(), gain.requires_grad(), bias.requires_grad()];
        let gv = g;
        Ok(Self::make_op(
            dims,
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |gy| {
                let mut dx = if needs[0] { vec![T::ZERO; gy.len()] } else { Vec::new() };
                let mut dg = if needs[1] { vec![T::ZERO; d] } else { Vec::new() };
                let mut db = if needs[2] { vec![T::ZERO; d] } else { Vec::new() };
                for r in 0..rows {
                    let gyr = &gy[r * d..(r + 1) * d];
                    let xhr = &xhat[r * d..(r + 1) * d];
                    if needs[1] {
                        for i in 0..d {
                            dg[i] += gyr[i] * xhr[i];
                        }
                    }
                    if needs[2] {
                        for i in 0..d {
                            db[i] += gyr[i];
                        }
                    }
                    if needs[0] {
                        // dxhat = gy * gain; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for i in 0..d {
                            let dxh = gyr[i] * gv[i];
                            m1 += dxh;
                            m2 += dxh * xhr[i];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        let inv = inv_std[r];
                        for i in 0..d {
                            let dxh = gyr[i] * gv[i];
                            dx[r * d + i] = inv * (dxh - m1 - xhr[i] * m2);
                        }
                    }
                }
                vec![dx, dg, db]
            }),
        ))
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self) -> Result<Tensor<T>> {
        let x = self.values();
        let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let a = T::from_f64(0.044_715);
        let half = T::from_f64(0.5);
        let three = T::from_f64(3.0);
        let out: Vec<T> = x
            .iter()
            .map(|&xi| {
                let u = c * (xi + a * xi * xi * xi);
                half * xi * (T::ONE + u.tanh())
            })
            .collect();
        check_finite("gelu", &out)?;
        let xv = x;
        Ok(Self::make_op(
            self.dims(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let dx: Vec<T> = g
                    .iter()
                    .zip(&xv)
                    .map(|(&gi, &xi)| {
                        let u = c * (xi + a * xi * xi * xi);
                        let t = u.tanh();
                        let du = c * (T::ONE + three * a * xi * xi);
                        gi * (half * (T::ONE + t) + half * xi * (T::ONE - t * t) * du)
                    })
                    .collect();
                vec![dx]
            }),
        ))
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let mut s = T::ZERO;
        self.with_values(|v| {
            for &x in v {
                s += x;
            }
        });
        check_finite("sum_all", std::slice::from_ref(&s))?;
        let n = self.len();
        Ok(Self::make_op(
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| vec![vec![g[0]; n]]),
        ))
    }

    /// Stack two matrices with equal width, `self` rows first.
    pub fn concat_rows(&self, below: &Tensor<T>) -> Result<Tensor<T>> {
        let (r1, d1) = self.dims2("concat_rows")?;
        let (r2, d2) = below.dims2("concat_rows")?;
        if d1 != d2 {
            return Err(Error::ShapeMismatch {
                op: "concat_rows",
                detail: format!("widths {} vs {}", d1, d2),
            });
        }
        let mut out = self.values();
        out.extend(below.values());
        Ok(Self::make_op(
            vec![r1 + r2, d1],
            out,
            vec![self.clone(), below.clone()],
            Box::new(move |g| {
                let split = r1 * d1;
                vec![g[..split].to_vec(), g[split..].to_vec()]
            }),
        ))
    }

    /// Rows `start..start+count` of a matrix.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor<T>> {
        let (r, d) = self.dims2("slice_rows")?;
        if start + count > r {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {}..{} out of {}", start, start + count, r),
            });
        }
        let out = self.with_values(|v| v[start * d..(start + count) * d].to_vec());
        Ok(Self::make_op(
            vec![count, d],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::ZERO; r * d];
                dx[start * d..(start + count) * d].copy_from_slice(g);
                vec![dx]
            }),
        ))
    }

    /// Columns `start..start+count` of a matrix.
    pub fn slice_cols(&self, start: usize, count: usize) -> Result<Tensor<T>> {
        let (r, d) = self.dims2("slice_cols")?;
        if start + count > d {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols {}..{} out of {}", start, start + count, d),
            });
        }
        let v = self.values();
        let mut out = Vec::with_capacity(r * count);
        for row in v.chunks(d) {
            out.extend_from_slice(&row[start..start + count]);
        }
        Ok(Self::make_op(
            vec![r, count],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![T::ZERO; r * d];
                for (ri, grow) in g.chunks(count).enumerate() {
                    dx[ri * d + start..ri * d + start + count].copy_from_slice(grow);
                }
                vec![dx]
            }),
        ))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::InvalidInput("concat_cols of zero tensors".into()));
        }
        let mut rows = 0usize;
        let mut widths = Vec::with_capacity(parts.len());
        for (i, p) in parts.iter().enumerate() {
            let (r, c) = p.dims2("concat_cols")?;
            if i == 0 {
                rows = r;
            } else if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {}", rows, r),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        let values: Vec<Vec<T>> = parts.iter().map(|p| p.values()).collect();
        for r in 0..rows {
            for (p, w) in values.iter().zip(&widths) {
                out.extend_from_slice(&p[r * w..(r + 1) * w]);
            }
        }
        let widths_b = widths.clone();
        Ok(Self::make_op(
            vec![rows, total],
            out,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads: Vec<Vec<T>> = widths_b.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = 0usize;
                    for (gi, &w) in grads.iter_mut().zip(&widths_b) {
                        gi.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        off += w;
                    }
                }
                grads
            }),
        ))
    }

    /// Mean cross-entropy of `[N x K]` logits against integer labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let (n, k) = self.dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} logit rows vs {} labels", n, labels.len()),
            });
        }
        for &l in labels {
            if l >= k {
                return Err(Error::LabelOutOfRange { label: l, classes: k });
            }
        }
        let v = self.values();
        let mut probs = vec![T::ZERO; v.len()];
        let mut loss = T::ZERO;
        for (i, (row, prow)) in v.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            softmax_row(row, prow);
            loss += -(prow[labels[i]].maxv(T::from_f64(f64::MIN_POSITIVE))).ln();
        }
        let nn = T::from_f64(n as f64);
        loss = loss / nn;
        check_finite("cross_entropy", std::slice::from_ref(&loss))?;
        let labels_v = labels.to_vec();
        Ok(Self::make_op(
            vec![],
            vec![loss],
            vec![self.clone()],
            Box::new(move |g| {
                let scale = g[0] / nn;
                let mut dx = probs.clone();
                for (i, row) in dx.chunks_mut(k).enumerate() {
                    row[labels_v[i]] = row[labels_v[i]] - T::ONE;
                    for x in row.iter_mut() {
                        *x = *x * scale;
                    }
                }
                vec![dx]
            }),
        ))
    }

    /// Reverse-mode gradient accumulation from a scalar loss.
    ///
    /// Visits reachable nodes in reverse creation order, so accumulation is
    /// deterministic. Leaf gradients accumulate across calls until zeroed.
    pub fn backward(&self) -> Result<()> {
        {
            let n = self.node.borrow();
            if !n.dims.is_empty() && n.values.len() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "backward",
                    detail: format!("loss must be scalar, got dims {:?}", n.dims),
                });
            }
            if !n.requires_grad {
                return Ok(());
            }
        }
        // Collect reachable grad-requiring nodes.
        let mut stack = vec![self.clone()];
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut nodes: Vec<Tensor<T>> = Vec::new();
        while let Some(t) = stack.pop() {
            let seq = t.node.borrow().seq;
            if !visited.insert(seq) {
                continue;
            }
            for p in t.node.borrow().parents.iter() {
                if p.requires_grad() {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.node.borrow().seq.cmp(&a.node.borrow().seq));

        self.node.borrow_mut().grad = Some(vec![T::ONE]);
        for t in nodes {
            let (grad, backward, parents, is_leaf) = {
                let mut n = t.node.borrow_mut();
                if n.grad.is_none() || n.backward.is_none() {
                    continue;
                }
                let grad = if n.is_leaf {
                    n.grad.clone().unwrap()
                } else {
                    n.grad.take().unwrap()
                };
                (grad, n.backward.take(), n.parents.clone(), n.is_leaf)
            };
            let backward = backward.unwrap();
            let parent_grads = backward(&grad);
            for (p, pg) in parents.iter().zip(parent_grads) {
                if pg.is_empty() || !p.requires_grad() {
                    continue;
                }
                let mut pn = p.node.borrow_mut();
                match pn.grad.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&pg) {
                            *a += *g;
                        }
                    }
                    None => pn.grad = Some(pg),
                }
            }
            if !is_leaf {
                // The op's closure and parent handles are spent; free them so
                // the graph doesn't pin memory across steps.
                let mut n = t.node.borrow_mut();
                n.parents = Vec::new();
                n.grad = None;
            }
        }
        Ok(())
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut m = row[0];
    for &x in row {
        m = m.maxv(x);
    }
    let mut sum = T::ZERO;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - m).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

fn matmul_raw<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(v: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; v.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = v[i * c + j];
        }
    }
    out
}
