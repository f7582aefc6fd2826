//! Dense float64 kernels used by the engine.
//!
//! Every kernel fixes the per-element reduction order: an output element is
//! always produced by the same sequence of floating-point operations no matter
//! how many rows are processed at once or how the work is split across
//! threads. This is what makes frame-parallel and frame-sequential execution,
//! batched and single-stream execution, and 1-thread and N-thread runs agree
//! bit for bit.

use rayon::prelude::*;
use thiserror::Error;

use crate::netdef::Activation;

/// Work (multiply-adds) below which a product is computed on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("element-wise fold needs at least one input")]
    NoInputs,
    #[error("softmax derivative is only defined fused with the cross-entropy error")]
    StandaloneSoftmaxDerivative,
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, KernelError> {
        if data.len() != rows * cols {
            return Err(KernelError::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn view(&self) -> MatRef<'_> {
        MatRef::new(&self.data, self.rows, self.cols)
    }

    pub fn view_mut(&mut self) -> MatMut<'_> {
        MatMut::new(&mut self.data, self.rows, self.cols)
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Borrowed row-major view with an explicit row stride.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols)
    }

    /// Row `r` starts at `data[r * stride]`.
    pub fn strided(data: &'a [f64], rows: usize, cols: usize, stride: usize) -> Self {
        assert!(stride >= cols, "row stride {stride} smaller than width {cols}");
        if rows > 0 {
            assert!(
                data.len() >= (rows - 1) * stride + cols,
                "view of {rows}x{cols} (stride {stride}) exceeds {} values",
                data.len()
            );
        }
        Self {
            data,
            rows,
            cols,
            stride,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.stride + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &'a [f64] {
        let start = r * self.stride;
        &self.data[start..start + self.cols]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| self.at(r, c))
    }
}

/// Mutable counterpart of [`MatRef`].
#[derive(Debug)]
pub struct MatMut<'a> {
    data: &'a mut [f64],
    rows: usize,
    cols: usize,
    stride: usize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols)
    }

    pub fn strided(data: &'a mut [f64], rows: usize, cols: usize, stride: usize) -> Self {
        assert!(stride >= cols, "row stride {stride} smaller than width {cols}");
        if rows > 0 {
            assert!(
                data.len() >= (rows - 1) * stride + cols,
                "view of {rows}x{cols} (stride {stride}) exceeds {} values",
                data.len()
            );
        }
        Self {
            data,
            rows,
            cols,
            stride,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let start = r * self.stride;
        &mut self.data[start..start + self.cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

#[inline]
fn op_dims(m: &MatRef<'_>, t: Transpose) -> (usize, usize) {
    match t {
        Transpose::No => (m.rows, m.cols),
        Transpose::Yes => (m.cols, m.rows),
    }
}

/// `C += op(A) · op(B)`.
///
/// Each output element is updated as `c = c + a[r][p] * b[p][j]` for
/// `p = 0, 1, ..., k-1` in that order, exactly like the textbook triple loop.
/// Threads only partition the output, so the result is independent of the
/// thread count.
pub fn gemm(
    a: MatRef<'_>,
    trans_a: Transpose,
    b: MatRef<'_>,
    trans_b: Transpose,
    mut c: MatMut<'_>,
) -> Result<(), KernelError> {
    let (m, k) = op_dims(&a, trans_a);
    let (kb, n) = op_dims(&b, trans_b);
    if k != kb || c.rows != m || c.cols != n {
        return Err(KernelError::DimensionMismatch(format!(
            "op(A) is {m}x{k}, op(B) is {kb}x{n}, C is {}x{}",
            c.rows, c.cols
        )));
    }
    if m == 0 || n == 0 || k == 0 {
        return Ok(());
    }
    match trans_b {
        Transpose::No => gemm_rowwise(a, trans_a, b, &mut c),
        Transpose::Yes => {
            let bt = b.to_matrix().transpose();
            gemm_rowwise(a, trans_a, bt.view(), &mut c)
        }
    }
    Ok(())
}

/// `C += op(A) · B` with `B` laid out `k x n`.
fn gemm_rowwise(a: MatRef<'_>, trans_a: Transpose, b: MatRef<'_>, c: &mut MatMut<'_>) {
    let (m, k) = op_dims(&a, trans_a);
    let n = b.cols;
    let a_at = |r: usize, p: usize| match trans_a {
        Transpose::No => a.at(r, p),
        Transpose::Yes => a.at(p, r),
    };
    let row_kernel = |r: usize, out: &mut [f64], col0: usize| {
        for p in 0..k {
            let av = a_at(r, p);
            let brow = &b.row(p)[col0..col0 + out.len()];
            for (o, bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };

    let threads = rayon::current_num_threads();
    if threads == 1 || m * n * k < PAR_THRESHOLD {
        for r in 0..m {
            row_kernel(r, c.row_mut(r), 0);
        }
        return;
    }

    if m >= 2 * threads {
        let stride = c.stride;
        let cols = c.cols;
        let used = (m - 1) * stride + cols;
        c.data[..used]
            .par_chunks_mut(stride)
            .enumerate()
            .with_min_len((PAR_THRESHOLD / (n * k)).max(1))
            .for_each(|(r, chunk)| row_kernel(r, &mut chunk[..cols], 0));
    } else {
        // Few rows: split columns into bands computed out of place.
        let bands = threads.min(n);
        let width = n.div_ceil(bands);
        let snapshot: Vec<Vec<f64>> = (0..m).map(|r| c.row_mut(r).to_vec()).collect();
        let results: Vec<(usize, Vec<f64>)> = (0..bands)
            .into_par_iter()
            .filter_map(|band| {
                let col0 = band * width;
                if col0 >= n {
                    return None;
                }
                let w = width.min(n - col0);
                let mut local = vec![0.0; m * w];
                for r in 0..m {
                    let out = &mut local[r * w..(r + 1) * w];
                    out.copy_from_slice(&snapshot[r][col0..col0 + w]);
                    row_kernel(r, out, col0);
                }
                Some((col0, local))
            })
            .collect();
        for (col0, local) in results {
            let w = local.len() / m;
            for r in 0..m {
                c.row_mut(r)[col0..col0 + w].copy_from_slice(&local[r * w..(r + 1) * w]);
            }
        }
    }
}

/// Values for a set of time frames across a set of streams.
///
/// The vector for frame `t` of stream `n` occupies the contiguous slice
/// starting at `(t * streams + n) * width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    width: usize,
    frames: usize,
    streams: usize,
    data: Vec<f64>,
}

impl Batch {
    pub fn zeros(width: usize, frames: usize, streams: usize) -> Self {
        Self {
            width,
            frames,
            streams,
            data: vec![0.0; width * frames * streams],
        }
    }

    pub fn from_vec(
        width: usize,
        frames: usize,
        streams: usize,
        data: Vec<f64>,
    ) -> Result<Self, KernelError> {
        if data.len() != width * frames * streams {
            return Err(KernelError::DimensionMismatch(format!(
                "{} values for width {width}, {frames} frames, {streams} streams",
                data.len()
            )));
        }
        Ok(Self {
            width,
            frames,
            streams,
            data,
        })
    }

    pub fn filled(width: usize, frames: usize, streams: usize, v: f64) -> Self {
        Self {
            width,
            frames,
            streams,
            data: vec![v; width * frames * streams],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn streams(&self) -> usize {
        self.streams
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.frames, self.streams)
    }

    /// Number of (frame, stream) columns.
    pub fn columns(&self) -> usize {
        self.frames * self.streams
    }

    #[inline]
    pub fn column_index(&self, t: usize, n: usize) -> usize {
        t * self.streams + n
    }

    pub fn column(&self, t: usize, n: usize) -> &[f64] {
        let start = self.column_index(t, n) * self.width;
        &self.data[start..start + self.width]
    }

    pub fn column_mut(&mut self, t: usize, n: usize) -> &mut [f64] {
        let start = self.column_index(t, n) * self.width;
        &mut self.data[start..start + self.width]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Columns as rows of a `(frames * streams) x width` matrix view.
    pub fn view(&self) -> MatRef<'_> {
        MatRef::new(&self.data, self.columns(), self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EwiseOp {
    Add,
    Mul,
}

/// Left fold of `op` over `inputs`, element by element.
pub fn ewise(op: EwiseOp, inputs: &[&Batch]) -> Result<Batch, KernelError> {
    let (first, rest) = inputs.split_first().ok_or(KernelError::NoInputs)?;
    let mut out = (*first).clone();
    for b in rest {
        if b.shape() != out.shape() {
            return Err(KernelError::ShapeMismatch {
                expected: out.shape(),
                got: b.shape(),
            });
        }
        match op {
            EwiseOp::Add => add_assign(&mut out.data, &b.data),
            EwiseOp::Mul => mul_assign(&mut out.data, &b.data),
        }
    }
    Ok(out)
}

#[inline]
pub fn add_assign(acc: &mut [f64], x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}

#[inline]
pub fn mul_assign(acc: &mut [f64], x: &[f64]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, v) in acc.iter_mut().zip(x) {
        *a *= v;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Applies `f` to consecutive rows of `width` values. Softmax normalizes each row.
pub fn activate_rows(f: Activation, s: &[f64], y: &mut [f64], width: usize) {
    debug_assert_eq!(s.len(), y.len());
    match f {
        Activation::Identity => y.copy_from_slice(s),
        Activation::Sigmoid => {
            for (o, &v) in y.iter_mut().zip(s) {
                *o = sigmoid(v);
            }
        }
        Activation::Tanh => {
            for (o, &v) in y.iter_mut().zip(s) {
                *o = v.tanh();
            }
        }
        Activation::Softmax => {
            for (out, inp) in y.chunks_exact_mut(width).zip(s.chunks_exact(width)) {
                softmax_row(inp, out);
            }
        }
    }
}

fn softmax_row(s: &[f64], y: &mut [f64]) {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in y.iter_mut().zip(s) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in y.iter_mut() {
        *o /= sum;
    }
}

/// `ln softmax(s)[j]`, computed without forming the probabilities.
pub fn log_softmax_at(s: &[f64], j: usize) -> f64 {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = s.iter().map(|&v| (v - max).exp()).sum();
    s[j] - max - sum.ln()
}

/// `f'(s)` expressed through the activation output `y = f(s)`.
pub fn derivative_from_output(f: Activation, y: f64) -> Result<f64, KernelError> {
    match f {
        Activation::Identity => Ok(1.0),
        Activation::Sigmoid => Ok(y * (1.0 - y)),
        Activation::Tanh => Ok(1.0 - y * y),
        Activation::Softmax => Err(KernelError::StandaloneSoftmaxDerivative),
    }
}

/// `acc[i] *= f'(s_i)` given `y_i = f(s_i)`.
pub fn scale_by_derivative(f: Activation, y: &[f64], acc: &mut [f64]) -> Result<(), KernelError> {
    match f {
        Activation::Identity => {}
        Activation::Sigmoid => {
            for (a, &v) in acc.iter_mut().zip(y) {
                *a *= v * (1.0 - v);
            }
        }
        Activation::Tanh => {
            for (a, &v) in acc.iter_mut().zip(y) {
                *a *= 1.0 - v * v;
            }
        }
        Activation::Softmax => return Err(KernelError::StandaloneSoftmaxDerivative),
    }
    Ok(())
}

pub fn activation(f: Activation, s: &Batch) -> Batch {
    let mut y = Batch::zeros(s.width, s.frames, s.streams);
    activate_rows(f, &s.data, &mut y.data, s.width);
    y
}

pub fn activation_deriv(f: Activation, y: &Batch) -> Result<Batch, KernelError> {
    let mut d = Batch::filled(y.width, y.frames, y.streams, 1.0);
    scale_by_derivative(f, &y.data, &mut d.data)?;
    Ok(d)
}

pub fn check_finite(values: &[f64]) -> Result<(), KernelError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(KernelError::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}
