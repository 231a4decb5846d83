//! Dense row-major tensors, the handful of kernels the layers need, and the
//! seeded random stream every stochastic step draws from.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64`, stored row-major.
///
/// `shape` extents are all positive and their product equals `data.len()`.
/// Constructors and the public numeric operations reject NaN and infinities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Shape consistency is still
    /// asserted. Used on hot paths whose outputs are checked at a boundary.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert!(check_shape(&shape).is_ok());
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    /// 2-D tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != n) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(vec![m, n], data)
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the leading (batch) axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of values per leading-axis entry.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &extent)| {
                assert!(i < extent, "index out of bounds");
                acc * extent + i
            })
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let [m, n] = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self::from_parts(vec![n, m], out))
    }

    /// Rows `indices` of the leading axis, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::from_parts(shape, data)
    }

    pub(crate) fn dims2(&self, op: &str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [m, n] => Ok([m, n]),
            _ => Err(Error::Dimension(format!(
                "{op} expects a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Dimension(format!(
            "extents must be positive, got {shape:?}"
        )));
    }
    Ok(())
}

/// Standard matrix product of `a` (m×k) and `b` (k×n).
///
/// Each output entry accumulates its k products in ascending order starting
/// from zero, so results equal a naive triple loop bit for bit.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {m}x{k} by {k2}x{n}"
        )));
    }
    let mut c = vec![0.0; m * n];
    kernels::gemm_nn(m, k, n, a.data(), k, b.data(), n, &mut c, n);
    Tensor::from_parts(vec![m, n], c).ensure_finite("matmul")
}

/// Valid (unpadded, stride 1) cross-correlation of one `C×H×W` image with
/// `F×C×kH×kW` kernels, plus a per-filter bias. Computed as im2col then
/// matmul.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match input.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(Error::Dimension(format!("conv2d input must be C×H×W, got {s:?}"))),
    };
    let (f, kc, kh, kw) = match kernels.shape() {
        &[f, kc, kh, kw] => (f, kc, kh, kw),
        s => {
            return Err(Error::Dimension(format!(
                "conv2d kernels must be F×C×kH×kW, got {s:?}"
            )))
        }
    };
    if kc != c {
        return Err(Error::Dimension(format!(
            "kernel channels {kc} differ from input channels {c}"
        )));
    }
    if kh > h || kw > w {
        return Err(Error::Dimension(format!(
            "kernel {kh}×{kw} larger than input {h}×{w}"
        )));
    }
    if bias.shape() != [f] {
        return Err(Error::Dimension(format!(
            "bias must have shape [{f}], got {:?}",
            bias.shape()
        )));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let patch = c * kh * kw;
    let mut cols = vec![0.0; patch * oh * ow];
    kernels::im2col(input.data(), c, h, w, kh, kw, &mut cols);
    let mut out = vec![0.0; f * oh * ow];
    kernels::gemm_nn(f, patch, oh * ow, kernels.data(), patch, &cols, oh * ow, &mut out, oh * ow);
    for (fi, chunk) in out.chunks_exact_mut(oh * ow).enumerate() {
        let b = bias.data()[fi];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Tensor::from_parts(vec![f, oh, ow], out).ensure_finite("conv2d")
}

/// `n` independent draws from U[0,1).
pub fn uniform(rs: &mut RandomStream, n: usize) -> Tensor {
    assert!(n >= 1, "uniform needs at least one draw");
    Tensor::from_parts(vec![n], (0..n).map(|_| rs.next_f64()).collect())
}

/// Stream ids used under one run seed, so that shuffling and jamming,
/// the train/test split, and weight initialization never share draws.
pub mod streams {
    pub const TRAIN: u64 = 0;
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SUBSET: u64 = 3;
}

/// Deterministic random stream.
///
/// Backed by ChaCha8 keyed through `SeedableRng::seed_from_u64`, whose
/// seed expansion and output are specified independently of platform.
/// Distinct `stream` ids under one seed give independent sequences.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in [0,1) with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

/// Slice-level kernels shared by the tensor ops and the batched layers.
pub(crate) mod kernels {
    /// `c += a·b` with `a` m×k, `b` k×n, leading dimensions given explicitly.
    #[allow(clippy::too_many_arguments)]
    pub fn gemm_nn(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
        ldc: usize,
    ) {
        for i in 0..m {
            let c_row = &mut c[i * ldc..i * ldc + n];
            for p in 0..k {
                let aip = a[i * lda + p];
                let b_row = &b[p * ldb..p * ldb + n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += aip * bv;
                }
            }
        }
    }

    /// `c += aᵀ·b` with `a` k×m (so `aᵀ` is m×k) and `b` k×n.
    #[allow(clippy::too_many_arguments)]
    pub fn gemm_tn(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
        ldc: usize,
    ) {
        for p in 0..k {
            let b_row = &b[p * ldb..p * ldb + n];
            for i in 0..m {
                let api = a[p * lda + i];
                let c_row = &mut c[i * ldc..i * ldc + n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += api * bv;
                }
            }
        }
    }

    /// `c += a·bᵀ` with `a` m×k and `b` n×k.
    #[allow(clippy::too_many_arguments)]
    pub fn gemm_nt(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        lda: usize,
        b: &[f64],
        ldb: usize,
        c: &mut [f64],
        ldc: usize,
    ) {
        for i in 0..m {
            let a_row = &a[i * lda..i * lda + k];
            for j in 0..n {
                c[i * ldc + j] += dot(a_row, &b[j * ldb..j * ldb + k]);
            }
        }
    }

    /// Dot product with four interleaved accumulators.
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = [0.0f64; 4];
        let ca = a.chunks_exact(4);
        let cb = b.chunks_exact(4);
        let tail: f64 = ca
            .remainder()
            .iter()
            .zip(cb.remainder())
            .map(|(x, y)| x * y)
            .sum();
        for (x, y) in ca.zip(cb) {
            acc[0] += x[0] * y[0];
            acc[1] += x[1] * y[1];
            acc[2] += x[2] * y[2];
            acc[3] += x[3] * y[3];
        }
        (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
    }

    /// Unrolls every kH×kW patch of a C×H×W image into a column.
    /// Output is (C·kH·kW)×(H′·W′), rows ordered (c, kh, kw).
    pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, cols: &mut [f64]) {
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut row = 0;
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for di in 0..kh {
                for dj in 0..kw {
                    let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                    for oi in 0..oh {
                        let src = &plane[(oi + di) * w + dj..(oi + di) * w + dj + ow];
                        dst[oi * ow..(oi + 1) * ow].copy_from_slice(src);
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatters columns back, accumulating overlaps.
    pub fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, x: &mut [f64]) {
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut row = 0;
        for ci in 0..c {
            let plane = &mut x[ci * h * w..(ci + 1) * h * w];
            for di in 0..kh {
                for dj in 0..kw {
                    let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                    for oi in 0..oh {
                        let dst = &mut plane[(oi + di) * w + dj..(oi + di) * w + dj + ow];
                        for (d, s) in dst.iter_mut().zip(&src[oi * ow..(oi + 1) * ow]) {
                            *d += s;
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
