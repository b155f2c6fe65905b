//! Minimal reverse-mode autodiff over flat f64 buffers.
//!
//! A [`Tape`] records every executed operation; [`Tensor`] handles index into
//! it. Backward walks the tape once in reverse execution order and
//! accumulates analytic gradients additively into every `requires_grad`
//! ancestor. There is no broadcasting beyond scalar-with-tensor; reshape is
//! explicit.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use nalgebra::Matrix3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("gather index {index} out of bounds for {len} rows")]
    GatherOutOfBounds { index: usize, len: usize },
    #[error("backward root must be scalar, got {0} elements")]
    NonScalarRoot(usize),
    #[error("tape already consumed by a previous backward call")]
    StaleTape,
    #[error("rigid fit needs at least 3 rows, got {0}")]
    TooFewPoints(usize),
}

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone)]
struct KabschCache {
    u: Matrix3<f64>,
    v: Matrix3<f64>,
    sigma: [f64; 3],
    det_sign: f64,
    mu_src: [f64; 3],
    src_centered: Vec<[f64; 3]>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    ScalarAdd(usize),
    MatMul(usize, usize),
    Concat { axis: usize, parts: Vec<usize> },
    Gather { src: usize, rows: Vec<usize> },
    Relu(usize),
    LeakyRelu(usize, f64),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Recip(usize),
    Sum { src: usize, axis: Option<usize> },
    Max { src: usize, axis: usize, argmax: Vec<usize> },
    Softmax { src: usize, axis: usize },
    SquaredNorm { src: usize, axis: usize },
    Reshape(usize),
    Transpose(usize),
    StopGradient(#[allow(dead_code)] usize),
    KabschFit { dst: usize, cache: KabschCache },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Records operations in execution order; owns all tensor storage.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A handle into a [`Tape`].
#[derive(Debug, Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
    shape: Vec<usize>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// outer/mid/inner split around `axis`.
fn axes(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis { axis, rank: shape.len() });
    }
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, mid, inner))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { shape: shape.clone(), data, grad: None, requires_grad, op });
        Tensor { tape: self.clone(), id, shape }
    }

    /// New leaf tensor participating in gradient computation.
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(numel(shape), data.len(), "leaf data length must match shape");
        self.push(shape.to_vec(), data, requires_grad, Op::Leaf)
    }

    /// New constant (non-differentiable) tensor.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Tensor {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(&[1], vec![v])
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs reverse-mode accumulation from a scalar root. Each tape can be
    /// walked once; a second call errors with [`TensorError::StaleTape`].
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::StaleTape);
        }
        if numel(&inner.nodes[root.id].shape) != 1 {
            return Err(TensorError::NonScalarRoot(numel(&inner.nodes[root.id].shape)));
        }
        inner.consumed = true;
        for node in inner.nodes.iter_mut() {
            if node.requires_grad {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        if let Some(g) = inner.nodes[root.id].grad.as_mut() {
            g[0] = 1.0;
        } else {
            // root does not depend on any differentiable leaf; nothing to do
            return Ok(());
        }
        for id in (0..inner.nodes.len()).rev() {
            if !inner.nodes[id].requires_grad {
                continue;
            }
            backward_node(&mut inner.nodes, id);
        }
        Ok(())
    }
}

/// Propagates node `id`'s gradient into its parents.
fn backward_node(nodes: &mut [Node], id: usize) {
    let grad = match nodes[id].grad.as_ref() {
        Some(g) => g.clone(),
        None => return,
    };
    // split borrows: read parent data before writing parent grads
    macro_rules! acc {
        ($pid:expr, $idx:expr, $val:expr) => {
            if nodes[$pid].requires_grad {
                if let Some(g) = nodes[$pid].grad.as_mut() {
                    g[$idx] += $val;
                }
            }
        };
    }
    // ops are matched on a shallow copy of the metadata we need
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (a, b) = (*a, *b);
            let (la, lb) = (nodes[a].data.len(), nodes[b].data.len());
            for (i, g) in grad.iter().enumerate() {
                acc!(a, if la == 1 { 0 } else { i }, *g);
                acc!(b, if lb == 1 { 0 } else { i }, *g);
            }
        }
        Op::Sub(a, b) => {
            let (a, b) = (*a, *b);
            let (la, lb) = (nodes[a].data.len(), nodes[b].data.len());
            for (i, g) in grad.iter().enumerate() {
                acc!(a, if la == 1 { 0 } else { i }, *g);
                acc!(b, if lb == 1 { 0 } else { i }, -*g);
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let (la, lb) = (nodes[a].data.len(), nodes[b].data.len());
            for (i, g) in grad.iter().enumerate() {
                let av = nodes[a].data[if la == 1 { 0 } else { i }];
                let bv = nodes[b].data[if lb == 1 { 0 } else { i }];
                acc!(a, if la == 1 { 0 } else { i }, g * bv);
                acc!(b, if lb == 1 { 0 } else { i }, g * av);
            }
        }
        Op::ScalarMul(a, c) => {
            let (a, c) = (*a, *c);
            for (i, g) in grad.iter().enumerate() {
                acc!(a, i, g * c);
            }
        }
        Op::ScalarAdd(a) => {
            let a = *a;
            for (i, g) in grad.iter().enumerate() {
                acc!(a, i, *g);
            }
        }
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            if nodes[a].requires_grad {
                // dA = G B^T
                let mut da = vec![0.0; m * k];
                unsafe {
                    matrixmultiply::dgemm(
                        m, n, k, 1.0,
                        grad.as_ptr(), n as isize, 1,
                        nodes[b].data.as_ptr(), 1, n as isize, // B^T
                        0.0, da.as_mut_ptr(), k as isize, 1,
                    );
                }
                if let Some(g) = nodes[a].grad.as_mut() {
                    for (gi, di) in g.iter_mut().zip(da) {
                        *gi += di;
                    }
                }
            }
            if nodes[b].requires_grad {
                // dB = A^T G
                let mut db = vec![0.0; k * n];
                unsafe {
                    matrixmultiply::dgemm(
                        k, m, n, 1.0,
                        nodes[a].data.as_ptr(), 1, k as isize, // A^T
                        grad.as_ptr(), n as isize, 1,
                        0.0, db.as_mut_ptr(), n as isize, 1,
                    );
                }
                if let Some(g) = nodes[b].grad.as_mut() {
                    for (gi, di) in g.iter_mut().zip(db) {
                        *gi += di;
                    }
                }
            }
        }
        Op::Concat { axis, parts } => {
            let axis = *axis;
            let parts = parts.clone();
            let (outer, _, inner) = axes(&nodes[id].shape, axis).unwrap();
            let total_mid: usize = nodes[id].shape[axis];
            let mut offset = 0usize;
            for pid in parts {
                let pm = nodes[pid].shape[axis];
                if nodes[pid].requires_grad {
                    for o in 0..outer {
                        for m in 0..pm {
                            let src_base = (o * total_mid + offset + m) * inner;
                            let dst_base = (o * pm + m) * inner;
                            for i in 0..inner {
                                acc!(pid, dst_base + i, grad[src_base + i]);
                            }
                        }
                    }
                }
                offset += pm;
            }
        }
        Op::Gather { src, rows } => {
            let src = *src;
            let rows = rows.clone();
            let row_len: usize = nodes[id].shape[1..].iter().product();
            for (out_r, src_r) in rows.iter().enumerate() {
                for i in 0..row_len {
                    acc!(src, src_r * row_len + i, grad[out_r * row_len + i]);
                }
            }
        }
        Op::Relu(a) => {
            let a = *a;
            for (i, g) in grad.iter().enumerate() {
                let x = nodes[a].data[i];
                acc!(a, i, if x > 0.0 { *g } else { 0.0 });
            }
        }
        Op::LeakyRelu(a, slope) => {
            let (a, slope) = (*a, *slope);
            for (i, g) in grad.iter().enumerate() {
                let x = nodes[a].data[i];
                acc!(a, i, if x > 0.0 { *g } else { g * slope });
            }
        }
        Op::Exp(a) => {
            let a = *a;
            for (i, g) in grad.iter().enumerate() {
                let y = nodes[id].data[i];
                acc!(a, i, g * y);
            }
        }
        Op::Log(a) => {
            let a = *a;
            for (i, g) in grad.iter().enumerate() {
                let x = nodes[a].data[i];
                acc!(a, i, g / x);
            }
        }
        Op::Sqrt(a) => {
            let a = *a;
            for (i, g) in grad.iter().enumerate() {
                let y = nodes[id].data[i];
                acc!(a, i, g * 0.5 / y);
            }
        }
        Op::Recip(a) => {
            let a = *a;
            for (i, g) in grad.iter().enumerate() {
                let y = nodes[id].data[i];
                acc!(a, i, -g * y * y);
            }
        }
        Op::Sum { src, axis } => {
            let (src, axis) = (*src, *axis);
            match axis {
                None => {
                    let g = grad[0];
                    for i in 0..nodes[src].data.len() {
                        acc!(src, i, g);
                    }
                }
                Some(ax) => {
                    let (outer, mid, inner) = axes(&nodes[src].shape, ax).unwrap();
                    for o in 0..outer {
                        for m in 0..mid {
                            for i in 0..inner {
                                acc!(src, (o * mid + m) * inner + i, grad[o * inner + i]);
                            }
                        }
                    }
                }
            }
        }
        Op::Max { src, axis, argmax } => {
            let (src, axis) = (*src, *axis);
            let argmax = argmax.clone();
            let (outer, mid, inner) = axes(&nodes[src].shape, axis).unwrap();
            for o in 0..outer {
                for i in 0..inner {
                    let m = argmax[o * inner + i];
                    acc!(src, (o * mid + m) * inner + i, grad[o * inner + i]);
                }
            }
        }
        Op::Softmax { src, axis } => {
            let (src, axis) = (*src, *axis);
            let (outer, mid, inner) = axes(&nodes[id].shape, axis).unwrap();
            for o in 0..outer {
                for i in 0..inner {
                    let mut dot = 0.0;
                    for m in 0..mid {
                        let idx = (o * mid + m) * inner + i;
                        dot += grad[idx] * nodes[id].data[idx];
                    }
                    for m in 0..mid {
                        let idx = (o * mid + m) * inner + i;
                        let y = nodes[id].data[idx];
                        acc!(src, idx, y * (grad[idx] - dot));
                    }
                }
            }
        }
        Op::SquaredNorm { src, axis } => {
            let (src, axis) = (*src, *axis);
            let (outer, mid, inner) = axes(&nodes[src].shape, axis).unwrap();
            for o in 0..outer {
                for m in 0..mid {
                    for i in 0..inner {
                        let idx = (o * mid + m) * inner + i;
                        let x = nodes[src].data[idx];
                        acc!(src, idx, 2.0 * x * grad[o * inner + i]);
                    }
                }
            }
        }
        Op::Reshape(a) | Op::Transpose(a) if matches!(nodes[id].op, Op::Reshape(_)) => {
            let a = *a;
            for (i, g) in grad.iter().enumerate() {
                acc!(a, i, *g);
            }
        }
        Op::Transpose(a) => {
            let a = *a;
            let (rows, cols) = (nodes[id].shape[0], nodes[id].shape[1]);
            for r in 0..rows {
                for c in 0..cols {
                    acc!(a, c * rows + r, grad[r * cols + c]);
                }
            }
        }
        Op::Reshape(_) => unreachable!(),
        Op::StopGradient(_) => {}
        Op::KabschFit { dst, cache } => {
            let dst = *dst;
            let cache = cache.clone();
            kabsch_backward(nodes, id, dst, &cache, &grad);
        }
    }
}

/// SVD-based backward of the rigid fit: routes d(loss)/d([R|t]) into the
/// destination point rows.
fn kabsch_backward(nodes: &mut [Node], _id: usize, dst: usize, cache: &KabschCache, grad: &[f64]) {
    let n = cache.src_centered.len();
    // grad is over the (3, 4) output [R | t]
    let mut r_bar = Matrix3::<f64>::zeros();
    let mut t_bar = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            r_bar[(i, j)] = grad[i * 4 + j];
        }
        t_bar[i] = grad[i * 4 + 3];
    }
    // t = mu_d - R mu_s: extra rotation gradient -t_bar mu_s^T
    for i in 0..3 {
        for j in 0..3 {
            r_bar[(i, j)] -= t_bar[i] * cache.mu_src[j];
        }
    }
    // R = V D U^T with D = diag(1, 1, det_sign)
    let d = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, cache.det_sign));
    let u_bar = r_bar.transpose() * cache.v * d;
    let v_bar = r_bar * cache.u * d;

    // SVD backward for square H = U S V^T with no direct S dependence
    let mut f = Matrix3::<f64>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                let denom = cache.sigma[j] * cache.sigma[j] - cache.sigma[i] * cache.sigma[i];
                f[(i, j)] = if denom.abs() < 1e-12 { 0.0 } else { 1.0 / denom };
            }
        }
    }
    let ut_ubar = cache.u.transpose() * u_bar;
    let vt_vbar = cache.v.transpose() * v_bar;
    let j_u = f.component_mul(&(ut_ubar - ut_ubar.transpose()));
    let j_v = f.component_mul(&(vt_vbar - vt_vbar.transpose()));
    let s = Matrix3::from_diagonal(&nalgebra::Vector3::new(
        cache.sigma[0],
        cache.sigma[1],
        cache.sigma[2],
    ));
    let h_bar = cache.u * (j_u * s + s * j_v) * cache.v.transpose();

    // H = sum_i src_c_i dst_c_i^T; dst_c = dst - mu_d
    // d(dst_i) = src_c_i H_bar - mean_j(src_c_j H_bar) + t_bar / n
    let mut rows = vec![[0.0; 3]; n];
    let mut mean = [0.0; 3];
    for (i, sc) in cache.src_centered.iter().enumerate() {
        for b in 0..3 {
            let mut v = 0.0;
            for a in 0..3 {
                v += sc[a] * h_bar[(a, b)];
            }
            rows[i][b] = v;
            mean[b] += v / n as f64;
        }
    }
    if let Some(g) = nodes[dst].grad.as_mut() {
        for (i, row) in rows.iter().enumerate() {
            for b in 0..3 {
                g[i * 3 + b] += row[b] - mean[b] + t_bar[b] / n as f64;
            }
        }
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.tape.inner.borrow(), |inner| nodes_data(inner, self.id))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data()[0]
    }

    /// Gradient after backward; `None` if the tensor does not require grad
    /// or backward has not run.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn rg(&self, other: Option<&Tensor>) -> bool {
        self.requires_grad() || other.map(|t| t.requires_grad()).unwrap_or(false)
    }

    fn same_or_scalar(&self, other: &Tensor, op: &str) -> Result<Vec<usize>> {
        if self.shape == other.shape {
            Ok(self.shape.clone())
        } else if other.numel() == 1 {
            Ok(self.shape.clone())
        } else if self.numel() == 1 {
            Ok(other.shape.clone())
        } else {
            Err(TensorError::ShapeMismatch(format!(
                "{op}: {:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let inner = self.tape.inner.borrow();
        let a = nodes_data(&inner, self.id);
        let b = nodes_data(&inner, other.id);
        let n = a.len().max(b.len());
        (0..n)
            .map(|i| f(a[if a.len() == 1 { 0 } else { i }], b[if b.len() == 1 { 0 } else { i }]))
            .collect()
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let shape = self.same_or_scalar(other, "add")?;
        let data = self.zip(other, |a, b| a + b);
        Ok(self.tape.push(shape, data, self.rg(Some(other)), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let shape = self.same_or_scalar(other, "sub")?;
        let data = self.zip(other, |a, b| a - b);
        Ok(self.tape.push(shape, data, self.rg(Some(other)), Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let shape = self.same_or_scalar(other, "mul")?;
        let data = self.zip(other, |a, b| a * b);
        Ok(self.tape.push(shape, data, self.rg(Some(other)), Op::Mul(self.id, other.id)))
    }

    pub fn scalar_mul(&self, c: f64) -> Tensor {
        let data = self.to_vec().iter().map(|v| v * c).collect();
        self.tape.push(self.shape.clone(), data, self.rg(None), Op::ScalarMul(self.id, c))
    }

    /// Handle to the tape this tensor lives on.
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    /// Elementwise addition of a scalar constant.
    pub fn scalar_add(&self, c: f64) -> Tensor {
        let data = self.to_vec().iter().map(|v| v + c).collect();
        self.tape.push(self.shape.clone(), data, self.rg(None), Op::ScalarAdd(self.id))
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        {
            let inner = self.tape.inner.borrow();
            let a = nodes_data(&inner, self.id);
            let b = nodes_data(&inner, other.id);
            unsafe {
                matrixmultiply::dgemm(
                    m, k, n, 1.0,
                    a.as_ptr(), k as isize, 1,
                    b.as_ptr(), n as isize, 1,
                    0.0, out.as_mut_ptr(), n as isize, 1,
                );
            }
        }
        Ok(self.tape.push(vec![m, n], out, self.rg(Some(other)), Op::MatMul(self.id, other.id)))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        assert!(!parts.is_empty());
        let first = parts[0];
        let rank = first.shape.len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        for p in parts {
            if p.shape.len() != rank
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let (outer, total_mid, inner_sz) = axes(&shape, axis)?;
        let mut data = vec![0.0; numel(&shape)];
        {
            let inner = first.tape.inner.borrow();
            let mut offset = 0usize;
            for p in parts {
                let pd = nodes_data(&inner, p.id);
                let pm = p.shape[axis];
                for o in 0..outer {
                    for m in 0..pm {
                        let dst = (o * total_mid + offset + m) * inner_sz;
                        let src = (o * pm + m) * inner_sz;
                        data[dst..dst + inner_sz].copy_from_slice(&pd[src..src + inner_sz]);
                    }
                }
                offset += pm;
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first.tape.push(
            shape,
            data,
            rg,
            Op::Concat { axis, parts: parts.iter().map(|p| p.id).collect() },
        ))
    }

    /// Gathers rows (axis 0). Duplicate indices accumulate gradient.
    pub fn gather(&self, rows: &[usize]) -> Result<Tensor> {
        let n_rows = self.shape[0];
        let row_len: usize = self.shape[1..].iter().product();
        for &r in rows {
            if r >= n_rows {
                return Err(TensorError::GatherOutOfBounds { index: r, len: n_rows });
            }
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        let mut data = vec![0.0; rows.len() * row_len];
        {
            let inner = self.tape.inner.borrow();
            let src = nodes_data(&inner, self.id);
            for (i, &r) in rows.iter().enumerate() {
                data[i * row_len..(i + 1) * row_len]
                    .copy_from_slice(&src[r * row_len..(r + 1) * row_len]);
            }
        }
        Ok(self.tape.push(shape, data, self.rg(None), Op::Gather { src: self.id, rows: rows.to_vec() }))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Tensor {
        let data = self.to_vec().iter().map(|v| f(*v)).collect();
        self.tape.push(self.shape.clone(), data, self.rg(None), op)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(|v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(self.id, slope))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Tensor {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, Op::Sqrt(self.id))
    }

    /// Elementwise reciprocal 1/x.
    pub fn recip(&self) -> Tensor {
        self.unary(f64::recip, Op::Recip(self.id))
    }

    /// |x| composed from hinges so the subgradient at 0 is 0.
    pub fn abs(&self) -> Result<Tensor> {
        self.relu().add(&self.scalar_mul(-1.0).relu())
    }

    /// Sum over one axis (collapsing it) or over all elements (axis `None`).
    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor> {
        match axis {
            None => {
                let total: f64 = self.data().iter().sum();
                Ok(self.tape.push(vec![1], vec![total], self.rg(None), Op::Sum { src: self.id, axis: None }))
            }
            Some(ax) => {
                let (outer, mid, inner_sz) = axes(&self.shape, ax)?;
                let mut data = vec![0.0; outer * inner_sz];
                {
                    let inner = self.tape.inner.borrow();
                    let src = nodes_data(&inner, self.id);
                    for o in 0..outer {
                        for m in 0..mid {
                            for i in 0..inner_sz {
                                data[o * inner_sz + i] += src[(o * mid + m) * inner_sz + i];
                            }
                        }
                    }
                }
                let mut shape: Vec<usize> =
                    self.shape.iter().enumerate().filter(|(d, _)| *d != ax).map(|(_, s)| *s).collect();
                if shape.is_empty() {
                    shape.push(1);
                }
                Ok(self.tape.push(shape, data, self.rg(None), Op::Sum { src: self.id, axis: Some(ax) }))
            }
        }
    }

    /// Max over an axis; gradient routes to the lowest-index maximizer.
    pub fn max(&self, ax: usize) -> Result<Tensor> {
        let (outer, mid, inner_sz) = axes(&self.shape, ax)?;
        assert!(mid > 0);
        let mut data = vec![f64::NEG_INFINITY; outer * inner_sz];
        let mut argmax = vec![0usize; outer * inner_sz];
        {
            let inner = self.tape.inner.borrow();
            let src = nodes_data(&inner, self.id);
            for o in 0..outer {
                for m in 0..mid {
                    for i in 0..inner_sz {
                        let v = src[(o * mid + m) * inner_sz + i];
                        let lane = o * inner_sz + i;
                        if v > data[lane] {
                            data[lane] = v;
                            argmax[lane] = m;
                        }
                    }
                }
            }
        }
        let mut shape: Vec<usize> =
            self.shape.iter().enumerate().filter(|(d, _)| *d != ax).map(|(_, s)| *s).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.tape.push(shape, data, self.rg(None), Op::Max { src: self.id, axis: ax, argmax }))
    }

    pub fn softmax(&self, ax: usize) -> Result<Tensor> {
        let (outer, mid, inner_sz) = axes(&self.shape, ax)?;
        let mut data = vec![0.0; self.numel()];
        {
            let inner = self.tape.inner.borrow();
            let src = nodes_data(&inner, self.id);
            for o in 0..outer {
                for i in 0..inner_sz {
                    let mut mx = f64::NEG_INFINITY;
                    for m in 0..mid {
                        mx = mx.max(src[(o * mid + m) * inner_sz + i]);
                    }
                    let mut z = 0.0;
                    for m in 0..mid {
                        let idx = (o * mid + m) * inner_sz + i;
                        data[idx] = (src[idx] - mx).exp();
                        z += data[idx];
                    }
                    for m in 0..mid {
                        data[(o * mid + m) * inner_sz + i] /= z;
                    }
                }
            }
        }
        Ok(self.tape.push(self.shape.clone(), data, self.rg(None), Op::Softmax { src: self.id, axis: ax }))
    }

    /// Sum of squares along an axis (the axis collapses).
    pub fn squared_norm(&self, ax: usize) -> Result<Tensor> {
        let (outer, mid, inner_sz) = axes(&self.shape, ax)?;
        let mut data = vec![0.0; outer * inner_sz];
        {
            let inner = self.tape.inner.borrow();
            let src = nodes_data(&inner, self.id);
            for o in 0..outer {
                for m in 0..mid {
                    for i in 0..inner_sz {
                        let v = src[(o * mid + m) * inner_sz + i];
                        data[o * inner_sz + i] += v * v;
                    }
                }
            }
        }
        let mut shape: Vec<usize> =
            self.shape.iter().enumerate().filter(|(d, _)| *d != ax).map(|(_, s)| *s).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.tape.push(shape, data, self.rg(None), Op::SquaredNorm { src: self.id, axis: ax }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape: {:?} -> {:?}",
                self.shape, shape
            )));
        }
        Ok(self.tape.push(shape.to_vec(), self.to_vec(), self.rg(None), Op::Reshape(self.id)))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!("transpose: rank {}", self.shape.len())));
        }
        let (rows, cols) = (self.shape[0], self.shape[1]);
        let src = self.to_vec();
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(self.tape.push(vec![cols, rows], data, self.rg(None), Op::Transpose(self.id)))
    }

    /// Value passthrough that contributes zero gradient.
    pub fn stop_gradient(&self) -> Tensor {
        self.tape.push(self.shape.clone(), self.to_vec(), false, Op::StopGradient(self.id))
    }

    /// Differentiable rigid fit of constant source points onto the (n, 3)
    /// destination rows of `self`. Output is the (3, 4) matrix [R | t].
    pub fn kabsch_fit(src: &[[f64; 3]], dst: &Tensor) -> Result<Tensor> {
        let n = src.len();
        if dst.shape.len() != 2 || dst.shape[1] != 3 || dst.shape[0] != n {
            return Err(TensorError::ShapeMismatch(format!(
                "kabsch_fit: src {n} x 3 vs dst {:?}",
                dst.shape
            )));
        }
        if n < 3 {
            return Err(TensorError::TooFewPoints(n));
        }
        let dst_data = dst.to_vec();
        let mut mu_s = [0.0; 3];
        let mut mu_d = [0.0; 3];
        for i in 0..n {
            for k in 0..3 {
                mu_s[k] += src[i][k] / n as f64;
                mu_d[k] += dst_data[i * 3 + k] / n as f64;
            }
        }
        let src_centered: Vec<[f64; 3]> =
            src.iter().map(|p| [p[0] - mu_s[0], p[1] - mu_s[1], p[2] - mu_s[2]]).collect();
        let mut h = Matrix3::<f64>::zeros();
        for i in 0..n {
            for a in 0..3 {
                for b in 0..3 {
                    h[(a, b)] += src_centered[i][a] * (dst_data[i * 3 + b] - mu_d[b]);
                }
            }
        }
        let svd = h.svd(true, true);
        let u = svd.u.expect("svd");
        let v = svd.v_t.expect("svd").transpose();
        let sigma = [svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]];
        let det_sign = if (v * u.transpose()).determinant() < 0.0 { -1.0 } else { 1.0 };
        let d = Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, det_sign));
        let r = v * d * u.transpose();
        let mut out = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 4 + j] = r[(i, j)];
            }
            out[i * 4 + 3] =
                mu_d[i] - (r[(i, 0)] * mu_s[0] + r[(i, 1)] * mu_s[1] + r[(i, 2)] * mu_s[2]);
        }
        let cache = KabschCache { u, v, sigma, det_sign, mu_src: mu_s, src_centered };
        Ok(dst.tape.push(
            vec![3, 4],
            out,
            dst.rg(None),
            Op::KabschFit { dst: dst.id, cache },
        ))
    }
}

fn nodes_data(inner: &TapeInner, id: usize) -> &[f64] {
    &inner.nodes[id].data
}

pub mod check {
    //! Finite-difference gradient oracle for tests (unit and integration).

    use super::*;

    /// Central finite differences of a scalar function of flat leaf inputs,
    /// compared against analytic gradients. Returns the worst relative error.
    pub fn finite_diff<F>(inputs: &[Vec<f64>], shapes: &[Vec<usize>], f: F, h: f64) -> f64
    where
        F: Fn(&Tape, &[Tensor]) -> Tensor,
    {
        let tape = Tape::new();
        let leaves: Vec<Tensor> = inputs
            .iter()
            .zip(shapes)
            .map(|(d, s)| tape.leaf(s, d.clone(), true))
            .collect();
        let root = f(&tape, &leaves);
        tape.backward(&root).unwrap();
        let grads: Vec<Vec<f64>> = leaves.iter().map(|l| l.grad().unwrap()).collect();

        let mut worst: f64 = 0.0;
        for (li, input) in inputs.iter().enumerate() {
            for k in 0..input.len() {
                let eval = |delta: f64| -> f64 {
                    let tape = Tape::new();
                    let leaves: Vec<Tensor> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, d)| {
                            let mut d = d.clone();
                            if j == li {
                                d[k] += delta;
                            }
                            tape.leaf(&shapes[j], d, true)
                        })
                        .collect();
                    f(&tape, &leaves).item()
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = grads[li][k];
                let denom = num.abs().max(ana.abs()).max(1.0);
                worst = worst.max((num - ana).abs() / denom);
            }
        }
        worst
    }
}
