//! Dense row-major tensors and the raw kernels the autodiff graph is built on.
//!
//! Shapes follow the `[batch, channels, ...spatial]` convention. Dense
//! activations are `[batch, features]`, convolutional ones `[batch, C, H, W]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| T::c(v)).collect())
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the leading (batch) axis.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per row.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    /// Size of axis 1 (1 for rank < 2).
    pub fn channels(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Product of axes after axis 1.
    pub fn spatial(&self) -> usize {
        if self.shape.len() <= 2 {
            1
        } else {
            self.shape[2..].iter().product()
        }
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::c(self.data.len().max(1) as f64)
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-row sums, shape `[rows]`.
    pub fn row_sums(&self) -> Vec<T> {
        let r = self.row_len();
        self.data.chunks(r.max(1)).map(|c| c.iter().copied().sum()).collect()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let r = self.row_len();
        &self.data[i * r..(i + 1) * r]
    }

    /// Rows `start..start+count` as a new tensor.
    pub fn rows_range(&self, start: usize, count: usize) -> Self {
        let r = self.row_len();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Self { shape, data: self.data[start * r..(start + count) * r].to_vec() }
    }

    /// Gathers rows by index.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let r = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * r);
        for &i in idx {
            data.extend_from_slice(&self.data[i * r..(i + 1) * r]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self { shape, data }
    }

    /// Stacks `times` copies of the whole batch: rows `(k, n)` at `k * N + n`.
    pub fn repeat_batch(&self, times: usize) -> Self {
        let mut shape = self.shape.clone();
        shape[0] *= times;
        let mut data = Vec::with_capacity(self.data.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Self { shape, data }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::c(v.f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }
}

/// `[m,k] x [k,n]` with optional transposes of either operand given their
/// stored shapes. Result is written (or accumulated when `accumulate`) into `out`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_into<T: Scalar>(
    a: &[T],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[T],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    out: &mut [T],
    accumulate: bool,
) {
    let (m, k) = if trans_a { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (k2, n) = if trans_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(out.len(), m * n);
    let (rsa, csa) = if trans_a { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    // SAFETY: slice lengths were checked against the logical shapes above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2D convolution over `[N, C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(in_c: usize, in_h: usize, in_w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let out_h = (in_h + 2 * pad - k) / stride + 1;
        let out_w = (in_w + 2 * pad - k) / stride + 1;
        Self { in_c, in_h, in_w, k_h: k, k_w: k, stride, pad, out_h, out_w }
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_c * self.k_h * self.k_w
    }

    pub fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image `[C,H,W]` into a `[C*kh*kw, out_h*out_w]` patch matrix.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let os = g.out_spatial();
    for c in 0..g.in_c {
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let dst = &mut cols[row * os..(row + 1) * os];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.out_w + ox] = if iy >= 0
                            && (iy as usize) < g.in_h
                            && ix >= 0
                            && (ix as usize) < g.in_w
                        {
                            img[(c * g.in_h + iy as usize) * g.in_w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a patch matrix back into an image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let os = g.out_spatial();
    for c in 0..g.in_c {
        for ky in 0..g.k_h {
            for kx in 0..g.k_w {
                let row = (c * g.k_h + ky) * g.k_w + kx;
                let src = &cols[row * os..(row + 1) * os];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.in_h {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.in_w {
                            continue;
                        }
                        img[(c * g.in_h + iy as usize) * g.in_w + ix as usize] += src[oy * g.out_w + ox];
                    }
                }
            }
        }
    }
}

/// Source index along one axis for nearest-neighbour resizing.
#[inline]
pub fn nearest_src(dst: usize, dst_len: usize, src_len: usize) -> usize {
    ((dst * src_len) / dst_len).min(src_len - 1)
}
