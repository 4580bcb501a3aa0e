//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The tape is implicit: every tracked operation stores its parent handles
//! and an [`Op`] record inside the output tensor. `backward` walks the
//! resulting DAG once in reverse topological order, accumulating gradients
//! into leaves that require them. Tapes are per-forward-pass and freed when
//! the output tensor is dropped.

mod gradcheck;
mod scalar;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use scalar::Scalar;

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;

/// Dense n-dimensional array; the universal value carrier.
///
/// Cloning is cheap and shares storage: parameters are held as shared
/// handles by both the model and the optimizer.
pub struct Tensor<T: Scalar> {
    inner: Rc<RefCell<Inner<T>>>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        let preview: Vec<f64> = inner.data.iter().take(8).map(|v| v.to_f64()).collect();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("data", &preview)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

struct Inner<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    parents: Vec<Tensor<T>>,
    op: Option<Op<T>>,
    requires_grad: bool,
}

// Graphs can be deep; free parents iteratively instead of recursing.
impl<T: Scalar> Drop for Inner<T> {
    fn drop(&mut self) {
        let mut stack: Vec<Rc<RefCell<Inner<T>>>> =
            self.parents.drain(..).map(|t| t.inner).collect();
        while let Some(rc) = stack.pop() {
            if let Some(cell) = Rc::into_inner(rc) {
                let mut inner = cell.into_inner();
                stack.extend(inner.parents.drain(..).map(|t| t.inner));
            }
        }
    }
}

enum Op<T: Scalar> {
    Add,
    Sub,
    Mul,
    Scale(T),
    AddScalar(T),
    MatMul,
    Transpose,
    Silu,
    Softmax,
    LayerNorm { eps: T },
    SelectRows(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { start: usize },
    ConcatCols(Vec<usize>),
    RotatePairs { cos: Vec<T>, sin: Vec<T> },
    RowScale,
    RowScaleConst(Vec<T>),
    Sum,
    Mean,
    CrossEntropyMean(Vec<usize>),
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn make(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                parents: Vec::new(),
                op: None,
                requires_grad,
            })),
        }
    }

    fn from_op(shape: Vec<usize>, data: Vec<T>, parents: Vec<Tensor<T>>, op: Op<T>) -> Self {
        if parents.iter().any(|p| p.tracks()) {
            let t = Tensor::make(shape, data, false);
            {
                let mut inner = t.inner.borrow_mut();
                inner.parents = parents;
                inner.op = Some(op);
            }
            t
        } else {
            Tensor::make(shape, data, false)
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        Tensor::make(shape, data, false)
    }

    pub fn leaf(shape: Vec<usize>, data: Vec<T>) -> Self {
        Tensor::make(shape, data, true)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor::make(shape, vec![T::zero(); n], false)
    }

    pub fn scalar(x: T) -> Self {
        Tensor::make(vec![1], vec![x], false)
    }

    /// Standard normal entries via Box-Muller, scaled by `std`.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n = numel(&shape);
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let r = (-2.0 * u1.ln()).sqrt();
            let a = 2.0 * std::f64::consts::PI * u2;
            data.push(T::from_f64(r * a.cos() * std));
            if data.len() < n {
                data.push(T::from_f64(r * a.sin() * std));
            }
        }
        Tensor::make(shape, data, false)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn rows(&self) -> usize {
        let inner = self.inner.borrow();
        numel(&inner.shape) / inner.shape.last().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.inner.borrow().shape.last().copied().unwrap_or(1)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> Vec<T> {
        self.inner.borrow().data.clone()
    }

    pub fn item(&self) -> T {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    /// Overwrite the stored values in place (optimizer updates).
    pub fn set_data(&self, data: &[T]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len());
        inner.data.copy_from_slice(data);
    }

    pub fn map_data(&self, f: impl FnMut(&mut T)) {
        self.inner.borrow_mut().data.iter_mut().for_each(f);
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.borrow_mut().requires_grad = flag;
    }

    fn tracks(&self) -> bool {
        let inner = self.inner.borrow();
        inner.requires_grad || !inner.parents.is_empty()
    }

    /// Accumulated gradient, zeros when backward never reached this leaf.
    pub fn grad(&self) -> Vec<T> {
        let inner = self.inner.borrow();
        inner
            .grad
            .clone()
            .unwrap_or_else(|| vec![T::zero(); inner.data.len()])
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Copy of the values with no tape linkage.
    pub fn detach(&self) -> Tensor<T> {
        let inner = self.inner.borrow();
        Tensor::make(inner.shape.clone(), inner.data.clone(), false)
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        let (sa, sb) = (self.shape(), other.shape());
        assert_eq!(sa, sb, "add shape mismatch: {:?} vs {:?}", sa, sb);
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| x + y)
            .collect();
        drop(a);
        drop(b);
        Tensor::from_op(sa, data, vec![self.clone(), other.clone()], Op::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        let (sa, sb) = (self.shape(), other.shape());
        assert_eq!(sa, sb, "sub shape mismatch: {:?} vs {:?}", sa, sb);
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| x - y)
            .collect();
        drop(a);
        drop(b);
        Tensor::from_op(sa, data, vec![self.clone(), other.clone()], Op::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        let (sa, sb) = (self.shape(), other.shape());
        assert_eq!(sa, sb, "mul shape mismatch: {:?} vs {:?}", sa, sb);
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| x * y)
            .collect();
        drop(a);
        drop(b);
        Tensor::from_op(sa, data, vec![self.clone(), other.clone()], Op::Mul)
    }

    pub fn scale(&self, c: T) -> Tensor<T> {
        let inner = self.inner.borrow();
        let data = inner.data.iter().map(|&x| x * c).collect();
        let shape = inner.shape.clone();
        drop(inner);
        Tensor::from_op(shape, data, vec![self.clone()], Op::Scale(c))
    }

    pub fn add_scalar(&self, c: T) -> Tensor<T> {
        let inner = self.inner.borrow();
        let data = inner.data.iter().map(|&x| x + c).collect();
        let shape = inner.shape.clone();
        drop(inner);
        Tensor::from_op(shape, data, vec![self.clone()], Op::AddScalar(c))
    }

    pub fn silu(&self) -> Tensor<T> {
        let inner = self.inner.borrow();
        let data = inner
            .data
            .iter()
            .map(|&x| x * sigmoid(x))
            .collect();
        let shape = inner.shape.clone();
        drop(inner);
        Tensor::from_op(shape, data, vec![self.clone()], Op::Silu)
    }

    // ---- matrix ----

    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        let sa = self.shape();
        let sb = other.shape();
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul dimension error: {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let a = self.inner.borrow();
        let b = other.inner.borrow();
        let data = matmul_raw(&a.data, &b.data, m, k, n);
        drop(a);
        drop(b);
        Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Op::MatMul,
        )
    }

    pub fn transpose(&self) -> Tensor<T> {
        let s = self.shape();
        assert_eq!(s.len(), 2, "transpose expects rank 2, got {:?}", s);
        let (m, n) = (s[0], s[1]);
        let a = self.inner.borrow();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = a.data[i * n + j];
            }
        }
        drop(a);
        Tensor::from_op(vec![n, m], data, vec![self.clone()], Op::Transpose)
    }

    // ---- normalization / attention primitives ----

    /// Row-wise softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&self) -> Tensor<T> {
        let shape = self.shape();
        let cols = *shape.last().expect("softmax on rank-0 tensor");
        assert!(cols >= 1);
        let a = self.inner.borrow();
        let mut data = vec![T::zero(); a.data.len()];
        for (r, row) in a.data.chunks(cols).enumerate() {
            let mut m = T::neg_infinity();
            for &x in row {
                m = m.maximum(x);
            }
            let mut sum = T::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                data[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                data[r * cols + j] = data[r * cols + j] / sum;
            }
        }
        drop(a);
        Tensor::from_op(shape, data, vec![self.clone()], Op::Softmax)
    }

    /// Row-wise zero-mean unit-variance normalization; no learned affine.
    pub fn layer_norm(&self, eps: T) -> Tensor<T> {
        let shape = self.shape();
        let cols = *shape.last().expect("layer_norm on rank-0 tensor");
        let a = self.inner.borrow();
        let data = layer_norm_raw(&a.data, cols, eps);
        drop(a);
        Tensor::from_op(shape, data, vec![self.clone()], Op::LayerNorm { eps })
    }

    // ---- gathering / stacking ----

    pub fn select_rows(&self, idx: &[usize]) -> Tensor<T> {
        let cols = self.cols();
        let rows = self.rows();
        let a = self.inner.borrow();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            assert!(i < rows, "select_rows index {} out of {} rows", i, rows);
            data.extend_from_slice(&a.data[i * cols..(i + 1) * cols]);
        }
        drop(a);
        Tensor::from_op(
            vec![idx.len(), cols],
            data,
            vec![self.clone()],
            Op::SelectRows(idx.to_vec()),
        )
    }

    pub fn concat_rows(parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty());
        let cols = parts[0].cols();
        let mut data = Vec::new();
        let mut counts = Vec::with_capacity(parts.len());
        for p in parts {
            assert_eq!(p.cols(), cols, "concat_rows width mismatch");
            counts.push(p.rows());
            data.extend_from_slice(&p.inner.borrow().data);
        }
        let total: usize = counts.iter().sum();
        Tensor::from_op(
            vec![total, cols],
            data,
            parts.to_vec(),
            Op::ConcatRows(counts),
        )
    }

    pub fn slice_cols(&self, start: usize, width: usize) -> Tensor<T> {
        let cols = self.cols();
        let rows = self.rows();
        assert!(
            start + width <= cols,
            "slice_cols {}..{} out of {} columns",
            start,
            start + width,
            cols
        );
        let a = self.inner.borrow();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&a.data[r * cols + start..r * cols + start + width]);
        }
        drop(a);
        Tensor::from_op(
            vec![rows, width],
            data,
            vec![self.clone()],
            Op::SliceCols { start },
        )
    }

    pub fn concat_cols(parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty());
        let rows = parts[0].rows();
        let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            assert_eq!(p.rows(), rows, "concat_cols row mismatch");
            let pd = p.inner.borrow();
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&pd.data[r * w..(r + 1) * w]);
            }
            off += w;
        }
        Tensor::from_op(
            vec![rows, total],
            data,
            parts.to_vec(),
            Op::ConcatCols(widths),
        )
    }

    /// Rotate adjacent column pairs (2j, 2j+1) by per-entry angles given as
    /// cos/sin tables of shape rows x cols/2. Used for rotary embeddings.
    pub fn rotate_pairs(&self, cos: &[T], sin: &[T]) -> Tensor<T> {
        let rows = self.rows();
        let cols = self.cols();
        assert!(cols % 2 == 0, "rotate_pairs needs even width, got {}", cols);
        let half = cols / 2;
        assert_eq!(cos.len(), rows * half);
        assert_eq!(sin.len(), rows * half);
        let a = self.inner.borrow();
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for j in 0..half {
                let (c, s) = (cos[r * half + j], sin[r * half + j]);
                let x0 = a.data[r * cols + 2 * j];
                let x1 = a.data[r * cols + 2 * j + 1];
                data[r * cols + 2 * j] = x0 * c - x1 * s;
                data[r * cols + 2 * j + 1] = x0 * s + x1 * c;
            }
        }
        let shape = a.shape.clone();
        drop(a);
        Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Op::RotatePairs {
                cos: cos.to_vec(),
                sin: sin.to_vec(),
            },
        )
    }

    /// Multiply each row i of `self` by the scalar in row i of `s` ([rows x 1]).
    pub fn row_scale(&self, s: &Tensor<T>) -> Tensor<T> {
        let rows = self.rows();
        assert_eq!(
            s.shape(),
            vec![rows, 1],
            "row_scale expects [{} x 1] factors, got {:?}",
            rows,
            s.shape()
        );
        let cols = self.cols();
        let a = self.inner.borrow();
        let f = s.inner.borrow();
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                data[r * cols + j] = a.data[r * cols + j] * f.data[r];
            }
        }
        let shape = a.shape.clone();
        drop(a);
        drop(f);
        Tensor::from_op(shape, data, vec![self.clone(), s.clone()], Op::RowScale)
    }

    /// Multiply each row by a fixed (non-differentiable) factor.
    pub fn row_scale_const(&self, factors: &[T]) -> Tensor<T> {
        let rows = self.rows();
        let cols = self.cols();
        assert_eq!(factors.len(), rows);
        let a = self.inner.borrow();
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for j in 0..cols {
                data[r * cols + j] = a.data[r * cols + j] * factors[r];
            }
        }
        let shape = a.shape.clone();
        drop(a);
        Tensor::from_op(
            shape,
            data,
            vec![self.clone()],
            Op::RowScaleConst(factors.to_vec()),
        )
    }

    // ---- reductions ----

    pub fn sum(&self) -> Tensor<T> {
        let a = self.inner.borrow();
        let mut s = T::zero();
        for &x in &a.data {
            s += x;
        }
        drop(a);
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], Op::Sum)
    }

    pub fn mean(&self) -> Tensor<T> {
        let a = self.inner.borrow();
        let n = a.data.len();
        let mut s = T::zero();
        for &x in &a.data {
            s += x;
        }
        drop(a);
        let m = s / T::from_f64(n as f64);
        Tensor::from_op(vec![1], vec![m], vec![self.clone()], Op::Mean)
    }

    /// Mean squared error against `other`.
    pub fn mse(&self, other: &Tensor<T>) -> Tensor<T> {
        let d = self.sub(other);
        d.mul(&d).mean()
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy_mean(&self, targets: &[usize]) -> Tensor<T> {
        let rows = self.rows();
        let cols = self.cols();
        assert_eq!(targets.len(), rows, "one target per logit row");
        let a = self.inner.borrow();
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < cols, "target {} out of vocab {}", t, cols);
            let row = &a.data[r * cols..(r + 1) * cols];
            let mut m = T::neg_infinity();
            for &x in row {
                m = m.maximum(x);
            }
            let mut sum = T::zero();
            for &x in row {
                sum += (x - m).exp();
            }
            loss += sum.ln() + m - row[t];
        }
        drop(a);
        let out = loss / T::from_f64(rows as f64);
        Tensor::from_op(
            vec![1],
            vec![out],
            vec![self.clone()],
            Op::CrossEntropyMean(targets.to_vec()),
        )
    }

    // ---- backward ----

    /// Reverse-mode gradient of a scalar output. Visits each node once.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward requires a scalar output");
        let topo = self.topo_order();
        self.inner.borrow_mut().grad = Some(vec![T::one()]);
        for node in topo.iter().rev() {
            let contribs = {
                let inner = node.inner.borrow();
                let (op, grad) = match (&inner.op, &inner.grad) {
                    (Some(op), Some(grad)) => (op, grad),
                    _ => continue,
                };
                backward_contribs(op, &inner.shape, &inner.data, grad, &inner.parents)
            };
            let inner = node.inner.borrow();
            for (parent, contrib) in inner.parents.iter().zip(contribs) {
                if let Some(c) = contrib {
                    if parent.tracks() {
                        parent.accumulate_grad(&c);
                    }
                }
            }
        }
    }

    fn accumulate_grad(&self, contrib: &[T]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![T::zero(); n]);
        for (g, &c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const RefCell<Inner<T>>> = HashSet::new();
        // Iterative DFS: (node, child cursor).
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(Rc::as_ptr(&self.inner));
        while let Some((node, cursor)) = stack.pop() {
            let next = {
                let inner = node.inner.borrow();
                inner.parents.get(cursor).cloned()
            };
            match next {
                Some(parent) => {
                    stack.push((node, cursor + 1));
                    if parent.tracks() && visited.insert(Rc::as_ptr(&parent.inner)) {
                        stack.push((parent, 0));
                    }
                }
                None => order.push(node),
            }
        }
        order
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn layer_norm_raw<T: Scalar>(data: &[T], cols: usize, eps: T) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    let nc = T::from_f64(cols as f64);
    for (r, row) in data.chunks(cols).enumerate() {
        let mut mean = T::zero();
        for &x in row {
            mean += x;
        }
        mean = mean / nc;
        let mut var = T::zero();
        for &x in row {
            let d = x - mean;
            var += d * d;
        }
        var = var / nc;
        let inv = T::one() / (var + eps).sqrt();
        for (j, &x) in row.iter().enumerate() {
            out[r * cols + j] = (x - mean) * inv;
        }
    }
    out
}

/// Gradient contributions for each parent given the node's output gradient.
fn backward_contribs<T: Scalar>(
    op: &Op<T>,
    shape: &[usize],
    out_data: &[T],
    grad: &[T],
    parents: &[Tensor<T>],
) -> Vec<Option<Vec<T>>> {
    match op {
        Op::Add => vec![Some(grad.to_vec()), Some(grad.to_vec())],
        Op::Sub => vec![
            Some(grad.to_vec()),
            Some(grad.iter().map(|&g| -g).collect()),
        ],
        Op::Mul => {
            let a = parents[0].inner.borrow();
            let b = parents[1].inner.borrow();
            let da = grad.iter().zip(&b.data).map(|(&g, &y)| g * y).collect();
            let db = grad.iter().zip(&a.data).map(|(&g, &x)| g * x).collect();
            vec![Some(da), Some(db)]
        }
        Op::Scale(c) => vec![Some(grad.iter().map(|&g| g * *c).collect())],
        Op::AddScalar(_) => vec![Some(grad.to_vec())],
        Op::MatMul => {
            let a = parents[0].inner.borrow();
            let b = parents[1].inner.borrow();
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            // dA = g . B^T
            let mut da = vec![T::zero(); m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut s = T::zero();
                    for j in 0..n {
                        s += grad[i * n + j] * b.data[p * n + j];
                    }
                    da[i * k + p] = s;
                }
            }
            // dB = A^T . g
            let mut db = vec![T::zero(); k * n];
            for p in 0..k {
                for i in 0..m {
                    let av = a.data[i * k + p];
                    for j in 0..n {
                        db[p * n + j] += av * grad[i * n + j];
                    }
                }
            }
            vec![Some(da), Some(db)]
        }
        Op::Transpose => {
            let (n, m) = (shape[0], shape[1]);
            let mut da = vec![T::zero(); m * n];
            for i in 0..n {
                for j in 0..m {
                    da[j * n + i] = grad[i * m + j];
                }
            }
            vec![Some(da)]
        }
        Op::Silu => {
            let a = parents[0].inner.borrow();
            let da = grad
                .iter()
                .zip(&a.data)
                .map(|(&g, &x)| {
                    let s = sigmoid(x);
                    g * (s + x * s * (T::one() - s))
                })
                .collect();
            vec![Some(da)]
        }
        Op::Softmax => {
            let cols = *shape.last().unwrap();
            let mut da = vec![T::zero(); grad.len()];
            for r in 0..grad.len() / cols {
                let y = &out_data[r * cols..(r + 1) * cols];
                let g = &grad[r * cols..(r + 1) * cols];
                let mut dot = T::zero();
                for j in 0..cols {
                    dot += y[j] * g[j];
                }
                for j in 0..cols {
                    da[r * cols + j] = y[j] * (g[j] - dot);
                }
            }
            vec![Some(da)]
        }
        Op::LayerNorm { eps } => {
            let cols = *shape.last().unwrap();
            let a = parents[0].inner.borrow();
            let nc = T::from_f64(cols as f64);
            let mut da = vec![T::zero(); grad.len()];
            for r in 0..grad.len() / cols {
                let x = &a.data[r * cols..(r + 1) * cols];
                let y = &out_data[r * cols..(r + 1) * cols];
                let g = &grad[r * cols..(r + 1) * cols];
                let mut mean = T::zero();
                for &v in x {
                    mean += v;
                }
                mean = mean / nc;
                let mut var = T::zero();
                for &v in x {
                    let d = v - mean;
                    var += d * d;
                }
                var = var / nc;
                let inv = T::one() / (var + *eps).sqrt();
                let mut gm = T::zero();
                let mut gym = T::zero();
                for j in 0..cols {
                    gm += g[j];
                    gym += g[j] * y[j];
                }
                gm = gm / nc;
                gym = gym / nc;
                for j in 0..cols {
                    da[r * cols + j] = inv * (g[j] - gm - y[j] * gym);
                }
            }
            vec![Some(da)]
        }
        Op::SelectRows(idx) => {
            let cols = shape[1];
            let parent_len = parents[0].len();
            let mut da = vec![T::zero(); parent_len];
            for (r, &i) in idx.iter().enumerate() {
                for j in 0..cols {
                    da[i * cols + j] += grad[r * cols + j];
                }
            }
            vec![Some(da)]
        }
        Op::ConcatRows(counts) => {
            let cols = shape[1];
            let mut out = Vec::with_capacity(counts.len());
            let mut off = 0;
            for &c in counts {
                out.push(Some(grad[off * cols..(off + c) * cols].to_vec()));
                off += c;
            }
            out
        }
        Op::SliceCols { start } => {
            let rows = shape[0];
            let width = shape[1];
            let pcols = parents[0].cols();
            let mut da = vec![T::zero(); rows * pcols];
            for r in 0..rows {
                for j in 0..width {
                    da[r * pcols + start + j] = grad[r * width + j];
                }
            }
            vec![Some(da)]
        }
        Op::ConcatCols(widths) => {
            let rows = shape[0];
            let total = shape[1];
            let mut out = Vec::with_capacity(widths.len());
            let mut off = 0;
            for &w in widths {
                let mut da = vec![T::zero(); rows * w];
                for r in 0..rows {
                    da[r * w..(r + 1) * w]
                        .copy_from_slice(&grad[r * total + off..r * total + off + w]);
                }
                out.push(Some(da));
                off += w;
            }
            out
        }
        Op::RotatePairs { cos, sin } => {
            let cols = shape[1];
            let half = cols / 2;
            let rows = shape[0];
            let mut da = vec![T::zero(); rows * cols];
            for r in 0..rows {
                for j in 0..half {
                    let (c, s) = (cos[r * half + j], sin[r * half + j]);
                    let g0 = grad[r * cols + 2 * j];
                    let g1 = grad[r * cols + 2 * j + 1];
                    da[r * cols + 2 * j] = g0 * c + g1 * s;
                    da[r * cols + 2 * j + 1] = -g0 * s + g1 * c;
                }
            }
            vec![Some(da)]
        }
        Op::RowScale => {
            let rows = shape[0];
            let cols = shape[1];
            let x = parents[0].inner.borrow();
            let f = parents[1].inner.borrow();
            let mut dx = vec![T::zero(); rows * cols];
            let mut df = vec![T::zero(); rows];
            for r in 0..rows {
                for j in 0..cols {
                    dx[r * cols + j] = grad[r * cols + j] * f.data[r];
                    df[r] += grad[r * cols + j] * x.data[r * cols + j];
                }
            }
            vec![Some(dx), Some(df)]
        }
        Op::RowScaleConst(factors) => {
            let rows = shape[0];
            let cols = shape[1];
            let mut dx = vec![T::zero(); rows * cols];
            for r in 0..rows {
                for j in 0..cols {
                    dx[r * cols + j] = grad[r * cols + j] * factors[r];
                }
            }
            vec![Some(dx)]
        }
        Op::Sum => {
            let g = grad[0];
            vec![Some(vec![g; parents[0].len()])]
        }
        Op::Mean => {
            let n = parents[0].len();
            let g = grad[0] / T::from_f64(n as f64);
            vec![Some(vec![g; n])]
        }
        Op::CrossEntropyMean(targets) => {
            let a = parents[0].inner.borrow();
            let cols = a.shape[1];
            let rows = a.shape[0];
            let g = grad[0] / T::from_f64(rows as f64);
            let mut da = vec![T::zero(); rows * cols];
            for (r, &t) in targets.iter().enumerate() {
                let row = &a.data[r * cols..(r + 1) * cols];
                let mut m = T::neg_infinity();
                for &x in row {
                    m = m.maximum(x);
                }
                let mut sum = T::zero();
                for &x in row {
                    sum += (x - m).exp();
                }
                for j in 0..cols {
                    let p = (row[j] - m).exp() / sum;
                    let y = if j == t { T::one() } else { T::zero() };
                    da[r * cols + j] = (p - y) * g;
                }
            }
            vec![Some(da)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let id = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::from_vec(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(id.matmul(&b).data(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_scalar() {
        let a = Tensor::<f64>::from_vec(vec![1, 1], vec![2.0]);
        let b = Tensor::from_vec(vec![1, 1], vec![3.0]);
        assert_eq!(a.matmul(&b).data(), vec![6.0]);
    }

    #[test]
    #[should_panic(expected = "matmul dimension error")]
    fn matmul_shape_mismatch_names_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zeros() {
        let x = Tensor::<f64>::from_vec(vec![1, 4], vec![5.0, 5.0, 5.0, 5.0]);
        let y = x.layer_norm(1e-5);
        for v in y.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let x = Tensor::<f64>::from_vec(vec![1, 2], vec![1.0, -1.0]);
        let y = x.layer_norm(1e-5).data();
        assert!((y[0] - 1.0).abs() < 1e-2);
        assert!((y[1] + 1.0).abs() < 1e-2);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f64>::randn(vec![3, 8], 2.0, &mut rng);
        let y = x.layer_norm(1e-5).data();
        for row in y.chunks(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6, "row mean {}", mean);
            assert!((var - 1.0).abs() < 1e-3, "row var {}", var);
        }
    }

    #[test]
    fn silu_values() {
        let x = Tensor::<f64>::from_vec(vec![1, 3], vec![0.0, 50.0, 1.0]);
        let y = x.silu().data();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 50.0).abs() < 1e-9);
        assert!((y[2] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-6);
        assert!((y[2] - 0.731059).abs() < 1e-5);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = Tensor::<f64>::from_vec(vec![1, 2], vec![0.0, 0.0]);
        assert_eq!(x.softmax().data(), vec![0.5, 0.5]);

        let x = Tensor::<f64>::from_vec(vec![1, 2], vec![1000.0, 0.0]);
        let y = x.softmax().data();
        assert!(y[0] > 1.0 - 1e-12 && y[1] < 1e-12);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = Tensor::<f64>::from_vec(vec![1, 3], vec![0.3, -1.2, 2.0]);
        let b = Tensor::<f64>::from_vec(vec![1, 3], vec![0.3 + 7.5, -1.2 + 7.5, 2.0 + 7.5]);
        let (ya, yb) = (a.softmax().data(), b.softmax().data());
        for (x, y) in ya.iter().zip(&yb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = Tensor::<f64>::leaf(vec![1], vec![3.0]);
        let y = x.add(&x).sum();
        y.backward();
        assert_eq!(x.grad(), vec![2.0]);
    }

    #[test]
    fn matmul_backward_matches_manual() {
        // d/dA sum(A.B) = 1 . B^T
        let a = Tensor::<f64>::leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f64>::leaf(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        a.matmul(&b).sum().backward();
        assert_eq!(a.grad(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn frozen_leaf_gets_zero_grad() {
        let w = Tensor::<f64>::from_vec(vec![1, 2], vec![1.0, 2.0]);
        let x = Tensor::<f64>::leaf(vec![2, 1], vec![3.0, 4.0]);
        w.matmul(&x).sum().backward();
        assert_eq!(w.grad(), vec![0.0, 0.0]);
        assert_eq!(x.grad(), vec![1.0, 2.0]);
    }

    #[test]
    fn deep_graph_drop_does_not_overflow() {
        let mut t = Tensor::<f64>::leaf(vec![1], vec![1.0]);
        for _ in 0..200_000 {
            t = t.add_scalar(0.0);
        }
        drop(t);
    }
}
