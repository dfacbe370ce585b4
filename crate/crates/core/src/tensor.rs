//! Dense row-major tensors of rank 1 to 3 and the numeric primitives the
//! attention kernels are built from.
//!
//! Every batched matrix product goes through [`matmul_batched_with`], which
//! bumps a thread-local dot-product counter by `s·p·r`. Attention variants
//! read that counter before and after their score products, so all of them
//! are counted the same way.
//!
//! `-inf` is a legal entry (mask sentinel, pre-softmax scores). NaN is not.

use std::cell::Cell;
use std::fmt;

use crate::error::{Error, Result};

#[cfg(feature = "rayon")]
use rayon::prelude::*;

/// Execution strategy for the data-parallel kernels.
///
/// Both strategies evaluate every output element with the same summation
/// order, so results are bitwise identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Falls back to [`Exec::Sequential`] when the `rayon` feature is off.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "rayon") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    #[cfg(feature = "rayon")]
    fn is_parallel(self) -> bool {
        self == Exec::Parallel
    }

    /// `items.map(f)`, keeping input order in the result.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "rayon")]
        if self.is_parallel() {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }
}

/// Applies `f(index, chunk)` to consecutive `chunk`-sized pieces of `out`.
fn for_each_chunk<F>(out: &mut [f64], chunk: usize, exec: Exec, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "rayon")]
    if exec.is_parallel() {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = exec;
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

thread_local! {
    static DOT_PRODUCTS: Cell<u64> = const { Cell::new(0) };
}

/// Dot products performed by batched matmuls on the current thread.
pub fn dot_products() -> u64 {
    DOT_PRODUCTS.with(Cell::get)
}

fn add_dot_products(k: u64) {
    DOT_PRODUCTS.with(|c| c.set(c.get() + k));
}

/// Runs `f` and returns its result with the number of dot products it performed.
pub fn count_dot_products<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = dot_products();
    let out = f();
    (out, dot_products() - before)
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 32 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} elements]", self.shape, self.data.len())
        }
    }
}

fn check_rank(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(Error::InvalidShape {
            op,
            msg: format!("rank must be 1..=3, got shape {shape:?}"),
        });
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_rank("Tensor::new", &shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                msg: format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            });
        }
        if data.iter().any(|x| x.is_nan()) {
            return Err(Error::NonFinite("NaN entry in tensor data".into()));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from already-validated parts.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape {
                op: "Tensor::from_rows",
                msg: "ragged rows".into(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single element of a rank-1 tensor of length one.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Rows × columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                op,
                msg: format!("expected a matrix, got shape {:?}", self.shape),
            }),
        }
    }

    /// Batch × rows × columns; matrices are treated as a batch of one.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [r, c] => Ok((1, r, c)),
            [b, r, c] => Ok((b, r, c)),
            _ => Err(Error::InvalidShape {
                op,
                msg: format!("expected rank 2 or 3, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[self.rank() - 1] + j]
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_rank("reshape", shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Swaps the last two axes (rank 2 or 3).
    pub fn transpose_last2(&self) -> Result<Self> {
        let (b, p, q) = self.dims3("transpose")?;
        let mut out = vec![0.0; self.numel()];
        for s in 0..b {
            let src = &self.data[s * p * q..(s + 1) * p * q];
            let dst = &mut out[s * p * q..(s + 1) * p * q];
            for i in 0..p {
                for j in 0..q {
                    dst[j * p + i] = src[i * q + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        Ok(Self::from_parts(shape, out))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|x| *x = f(*x));
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        self.same_shape(other, op)?;
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add_inplace(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `max |self - other|`; `-inf` entries at the same position compare equal.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| if a == b { 0.0 } else { (a - b).abs() })
            .fold(0.0, f64::max))
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|x| x.is_nan())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Batched product on the last two axes: `s×p×q · s×q×r → s×p×r`.
pub fn matmul_batched(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_batched_with(a, b, Exec::default())
}

pub fn matmul_batched_with(a: &Tensor, b: &Tensor, exec: Exec) -> Result<Tensor> {
    let (sa, p, q) = a.dims3("matmul_batched")?;
    let (sb, qb, r) = b.dims3("matmul_batched")?;
    if sa != sb || q != qb || a.rank() != b.rank() {
        return Err(Error::Shape {
            op: "matmul_batched",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let numel = sa
        .checked_mul(p)
        .and_then(|x| x.checked_mul(r))
        .ok_or_else(|| Error::InvalidArgument("matmul output size overflows".into()))?;
    let mut out = Vec::new();
    out.try_reserve_exact(numel)
        .map_err(|_| Error::InvalidArgument(format!("cannot allocate {numel} output elements")))?;
    out.resize(numel, 0.0);

    let (ad, bd) = (&a.data, &b.data);
    for_each_chunk(&mut out, r, exec, |row, orow| {
        let s = row / p.max(1);
        let arow = &ad[row * q..(row + 1) * q];
        let bmat = &bd[s * q * r..(s + 1) * q * r];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &bmat[t * r..(t + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    add_dot_products((sa * p * r) as u64);

    let shape = if a.rank() == 2 {
        vec![p, r]
    } else {
        vec![sa, p, r]
    };
    Ok(Tensor::from_parts(shape, out))
}

/// Row-wise softmax over the last axis, with row-max subtraction.
pub fn softmax_lastdim(t: &Tensor) -> Result<Tensor> {
    softmax_lastdim_with(t.clone(), Exec::default())
}

/// In-place variant used by the kernels; consumes and returns the buffer.
pub fn softmax_lastdim_with(mut t: Tensor, exec: Exec) -> Result<Tensor> {
    let c = *t.shape.last().unwrap();
    if c == 0 {
        return Ok(t);
    }
    let degenerate = std::sync::atomic::AtomicUsize::new(usize::MAX);
    for_each_chunk(&mut t.data, c, exec, |i, row| {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            degenerate.fetch_min(i, std::sync::atomic::Ordering::Relaxed);
            return;
        }
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = 1.0 / sum;
        for x in row.iter_mut() {
            *x *= inv;
        }
    });
    match degenerate.into_inner() {
        usize::MAX => Ok(t),
        row => Err(Error::DegenerateRow { row }),
    }
}

/// Gathers rows of a matrix; out-of-range indices produce a row of `pad`.
pub fn gather_rows_padded(m: &Tensor, indices: &[isize], pad: f64) -> Result<Tensor> {
    let (n, d) = m.dims2("gather_rows_padded")?;
    let mut out = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        if i >= 0 && (i as usize) < n {
            out.extend_from_slice(m.row(i as usize));
        } else {
            out.extend(std::iter::repeat_n(pad, d));
        }
    }
    Ok(Tensor::from_parts(vec![indices.len(), d], out))
}

/// Stacks matrices that share a column count.
pub fn concat_axis0(blocks: &[Tensor]) -> Result<Tensor> {
    let first = blocks.first().ok_or_else(|| Error::InvalidShape {
        op: "concat_axis0",
        msg: "no blocks".into(),
    })?;
    let (_, d) = first.dims2("concat_axis0")?;
    let mut rows = 0;
    for b in blocks {
        let (r, c) = b.dims2("concat_axis0")?;
        if c != d {
            return Err(Error::Shape {
                op: "concat_axis0",
                left: first.shape.clone(),
                right: b.shape.clone(),
            });
        }
        rows += r;
    }
    let mut out = Vec::with_capacity(rows * d);
    for b in blocks {
        out.extend_from_slice(&b.data);
    }
    Ok(Tensor::from_parts(vec![rows, d], out))
}

/// Concatenates matrices with equal row counts along the last axis.
pub fn concat_cols(blocks: &[Tensor]) -> Result<Tensor> {
    let first = blocks.first().ok_or_else(|| Error::InvalidShape {
        op: "concat_cols",
        msg: "no blocks".into(),
    })?;
    let (n, _) = first.dims2("concat_cols")?;
    let mut width = 0;
    for b in blocks {
        let (r, c) = b.dims2("concat_cols")?;
        if r != n {
            return Err(Error::Shape {
                op: "concat_cols",
                left: first.shape.clone(),
                right: b.shape.clone(),
            });
        }
        width += c;
    }
    let mut out = Vec::with_capacity(n * width);
    for i in 0..n {
        for b in blocks {
            out.extend_from_slice(b.row(i));
        }
    }
    Ok(Tensor::from_parts(vec![n, width], out))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    None,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::LeakyRelu(alpha) => leaky_relu(x, alpha),
        }
    }
}

pub fn leaky_relu(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        alpha * x
    }
}

/// `act(X·W + b)` with `W: p×q` and `b` of length `q`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor, activation: Activation) -> Result<Tensor> {
    let (_, q) = w.dims2("affine")?;
    if b.numel() != q {
        return Err(Error::Shape {
            op: "affine",
            left: w.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = matmul_batched(x, w)?;
    for row in out.data.chunks_mut(q) {
        for (o, bv) in row.iter_mut().zip(&b.data) {
            *o = activation.apply(*o + bv);
        }
    }
    Ok(out)
}
