//! Dense rank-4 tensors of `f64`, their complex counterparts, the 4-D DFT
//! pair and the elementwise primitives used by sign-gradient PGD.
//!
//! Everything here is a pure function of its inputs. Tensors are plain
//! row-major buffers; there is no broadcasting and no views.

mod checkpoint;
mod fft;

pub use checkpoint::{
    read_complex, read_tensor, read_tensor_from, write_complex, write_tensor, write_tensor_to,
};
pub use fft::{fft4, ifft4, real_ifft4_adjoint};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type Shape4 = [usize; 4];

/// Real rank-4 tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(n, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape4, value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Standard normal entries drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: Shape4, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Self { shape, data }
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut([usize; 4]) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for a in 0..shape[0] {
            for b in 0..shape[1] {
                for c in 0..shape[2] {
                    for d in 0..shape[3] {
                        data.push(f([a, b, c, d]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, b, c, d] = self.shape;
        ((idx[0] * b + idx[1]) * c + idx[2]) * d + idx[3]
    }

    pub fn get(&self, idx: [usize; 4]) -> f64 {
        self.data[self.offset(idx)]
    }

    /// Copy with one entry replaced.
    pub fn with_entry(&self, idx: [usize; 4], value: f64) -> Self {
        let mut out = self.clone();
        let o = out.offset(idx);
        out.data[o] = value;
        out
    }

    /// Copy with the entry at row-major position `flat` replaced.
    pub fn with_entry_flat(&self, flat: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.data[flat] = value;
        out
    }

    pub fn ensure_same_shape(&self, other: &Tensor4) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor4) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Tensor4, b: f64) -> Result<Self> {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    pub fn dot(&self, other: &Tensor4) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }
}

/// Complex rank-4 tensor stored as separate real and imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor4 {
    pub re: Tensor4,
    pub im: Tensor4,
}

impl ComplexTensor4 {
    pub fn new(re: Tensor4, im: Tensor4) -> Result<Self> {
        re.ensure_same_shape(&im)?;
        Ok(Self { re, im })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self {
            re: Tensor4::zeros(shape),
            im: Tensor4::zeros(shape),
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.re.shape()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            re: self.re.scale(s),
            im: self.im.scale(s),
        }
    }

    pub fn lincomb(&self, a: f64, other: &ComplexTensor4, b: f64) -> Result<Self> {
        Ok(Self {
            re: self.re.lincomb(a, &other.re, b)?,
            im: self.im.lincomb(a, &other.im, b)?,
        })
    }

    /// Real inner product treating `(re, im)` as one real vector.
    pub fn dot(&self, other: &ComplexTensor4) -> Result<f64> {
        Ok(self.re.dot(&other.re)? + self.im.dot(&other.im)?)
    }

    pub fn max_abs_diff(&self, other: &ComplexTensor4) -> Result<f64> {
        Ok(self
            .re
            .max_abs_diff(&other.re)?
            .max(self.im.max_abs_diff(&other.im)?))
    }

    pub fn max_abs(&self) -> f64 {
        self.re.max_abs().max(self.im.max_abs())
    }
}

/// Keeps the real part of a complex tensor.
///
/// After independent sign steps on the real and imaginary spectra the
/// spectrum is no longer Hermitian, so the inverse transform is complex.
/// Taking the real part is the orthogonal projection back onto real latents.
pub fn project_real(f: &ComplexTensor4) -> Tensor4 {
    f.re.clone()
}

/// Clamps `y` into the L∞ ball of radius `eps` around `center`.
pub fn clamp_linf(y: &Tensor4, center: &Tensor4, eps: f64) -> Result<Tensor4> {
    if eps < 0.0 || eps.is_nan() {
        return Err(Error::NegativeBound(eps));
    }
    y.zip_map(center, |v, c| v.min(upper(c, eps)).max(lower(c, eps)))
}

// Ball edges pulled inward by rounding error so that the computed
// distance `|v - c|` never exceeds `eps`.
fn upper(c: f64, eps: f64) -> f64 {
    let mut hi = c + eps;
    while hi - c > eps {
        hi = hi.next_down();
    }
    hi
}

fn lower(c: f64, eps: f64) -> f64 {
    let mut lo = c - eps;
    while c - lo > eps {
        lo = lo.next_up();
    }
    lo
}

/// Elementwise sign with `sign(0) == 0`.
pub fn sign(x: &Tensor4) -> Tensor4 {
    x.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}
