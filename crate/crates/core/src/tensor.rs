//! Dense row-major tensors and the raw kernels the tape is built on.
//!
//! Nothing in here records gradients; see [`crate::autodiff`] for that.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (all gradient checks).
pub trait Real: Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static {
    const NAME: &'static str;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place `self += other` for equal shapes.
    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Numpy-style broadcast of two shapes (right-aligned, extents equal or 1).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::Dimension(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index into `in_shape` that
/// broadcasting reads from.
pub(crate) fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = row_major_strides(in_shape);
    let mut strides = vec![0; rank];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            strides[i + offset] = in_strides[i];
        }
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..total {
        map.push(idx);
        for d in (0..rank).rev() {
            counter[d] += 1;
            idx += strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            idx -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

/// Sum a gradient of `out_shape` back down to `in_shape`.
pub(crate) fn reduce_to_shape<T: Real>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    if g.shape() == in_shape {
        return g.clone();
    }
    let map = broadcast_index_map(in_shape, g.shape());
    let mut out = Tensor::zeros(in_shape.to_vec());
    for (j, &i) in map.iter().enumerate() {
        out.data[i] = out.data[i] + g.data[j];
    }
    out
}

/// Shape with the given axes collapsed to extent 1.
pub(crate) fn keepdim_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect()
}

/// `a[m×k] · b[k×p]`
pub(crate) fn matmul_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[p×k]ᵀ`
pub(crate) fn matmul_nt_kernel<T: Real>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..p {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * p + j] = acc;
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×p]`
pub(crate) fn matmul_tn_kernel<T: Real>(a: &[T], b: &[T], k: usize, m: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    for kk in 0..k {
        let brow = &b[kk * p..(kk + 1) * p];
        for i in 0..m {
            let av = a[kk * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects B×C×H×W input and O×C×kh×kw kernel, got {x:?} and {k:?}"
            )));
        }
        if x[1] != k[1] {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {} vs kernel {}",
                x[1], k[1]
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        let (ph, pw) = (x[2] + 2 * pad, x[3] + 2 * pad);
        if ph < k[2] || pw < k[3] {
            return Err(Error::Dimension(format!(
                "kernel {}×{} larger than padded input {ph}×{pw}",
                k[2], k[3]
            )));
        }
        Ok(ConvGeometry {
            batch: x[0],
            in_channels: x[1],
            in_h: x[2],
            in_w: x[3],
            out_channels: k[0],
            kh: k[2],
            kw: k[3],
            stride,
            pad,
            out_h: (ph - k[2]) / stride + 1,
            out_w: (pw - k[3]) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Input coordinate for (patch row, output position), or `None` in the padding.
    #[inline]
    fn source(&self, c: usize, i: usize, j: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + i) as isize - self.pad as isize;
        let x = (ox * self.stride + j) as isize - self.pad as isize;
        if y < 0 || x < 0 || y as usize >= self.in_h || x as usize >= self.in_w {
            None
        } else {
            Some((c * self.in_h + y as usize) * self.in_w + x as usize)
        }
    }
}

/// Unfold one image (C×H×W) into a `patch_len × positions` matrix.
pub(crate) fn im2col<T: Real>(geo: &ConvGeometry, image: &[T]) -> Vec<T> {
    let mut cols = vec![T::zero(); geo.patch_len() * geo.positions()];
    let mut row = 0;
    for c in 0..geo.in_channels {
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let dst = &mut cols[row * geo.positions()..(row + 1) * geo.positions()];
                for oy in 0..geo.out_h {
                    for ox in 0..geo.out_w {
                        if let Some(src) = geo.source(c, i, j, oy, ox) {
                            dst[oy * geo.out_w + ox] = image[src];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back into an image.
pub(crate) fn col2im<T: Real>(geo: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let mut row = 0;
    for c in 0..geo.in_channels {
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let src = &cols[row * geo.positions()..(row + 1) * geo.positions()];
                for oy in 0..geo.out_h {
                    for ox in 0..geo.out_w {
                        if let Some(dst) = geo.source(c, i, j, oy, ox) {
                            image[dst] = image[dst] + src[oy * geo.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
