//! Dense row-major arrays and the scalar trait shared by the 32-bit production
//! path and the 64-bit gradient-check path.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Floating-point scalar usable as tensor element.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    fn erf(self) -> Self;

    /// Lossless for f64, rounds for f32.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Real for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Real for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Rank 1–4 dense array, row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(dim_err!("rank must be 1..=4, got shape {shape:?}"));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_rank(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    /// Builds a tensor from a nested row list; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err!("ragged rows"));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.iter().map(|&v| T::of(v)))
            .collect();
        Self::from_vec(&[rows.len(), cols], data)
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

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[T] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_rank(shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Gathers rows of a `[N, C]` tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let c = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            shape: vec![rows.len(), c],
            data,
        }
    }
}

/// `a[M×K] · b[K×N]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(dim_err!(
            "matmul expects rank-2 operands, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(dim_err!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); m * n];
    crate::kernels::gemm(&a.data, &b.data, &mut out, m, k, n);
    let out = Tensor::from_vec(&[m, n], out)?;
    out.ensure_finite("matmul")?;
    Ok(out)
}

/// Single-sample convolution of `x[H×W×Cin]` with `w[kh×kw×Cin×Cout]`
/// (or `w[kh×kw×1×C]` when `depthwise`).
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
    depthwise: bool,
) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(dim_err!("conv2d expects H×W×C input, got {:?}", x.shape()));
    }
    let batched = x
        .clone()
        .reshape(&[1, x.shape[0], x.shape[1], x.shape[2]])?;
    let cout = *w.shape().last().unwrap_or(&0);
    let bias = Tensor::zeros(&[cout]);
    let geom =
        crate::kernels::ConvGeom::new(batched.shape(), w.shape(), stride, padding, depthwise)?;
    let out = crate::kernels::conv_forward(&geom, batched.data(), w.data(), bias.data());
    let out = Tensor::from_vec(&[geom.oh, geom.ow, geom.cout], out)?;
    out.ensure_finite("conv2d")?;
    Ok(out)
}

#[inline]
pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// d/dx of x·Φ(x) = Φ(x) + x·φ(x).
#[inline]
pub(crate) fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Exact (erf) GELU.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::from_vec(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let ones = Tensor::<f64>::from_rows(&[&[1.0], &[1.0]]).unwrap();
        assert_eq!(matmul(&a, &ones).unwrap().data(), &[3.0, 7.0]);
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let z = matmul(&Tensor::zeros(&[2, 2]), &a).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            matmul(&a, &Tensor::zeros(&[3, 1])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv_zero_kernel_and_delta() {
        let x = Tensor::<f32>::from_vec(&[4, 4, 1], (0..16).map(|v| v as f32).collect()).unwrap();
        let zero = Tensor::zeros(&[3, 3, 1, 1]);
        let y = conv2d(&x, &zero, 1, 1, false).unwrap();
        assert_eq!(y.shape(), &[4, 4, 1]);
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut delta = Tensor::zeros(&[3, 3, 1, 1]);
        delta.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &delta, 1, 1, false).unwrap(), x);
    }

    #[test]
    fn depthwise_delta_is_identity_per_channel() {
        let x =
            Tensor::<f64>::from_vec(&[3, 5, 2], (0..30).map(|v| v as f64 * 0.5).collect()).unwrap();
        let mut delta = Tensor::zeros(&[3, 3, 1, 2]);
        delta.data_mut()[4 * 2] = 1.0;
        delta.data_mut()[4 * 2 + 1] = 1.0;
        assert_eq!(conv2d(&x, &delta, 1, 1, true).unwrap(), x);
    }

    #[test]
    fn stem_output_extent() {
        // 1024×128 through strides [2,1,2,1], pad 1
        let mut hw = (1024usize, 128usize);
        for s in [2, 1, 2, 1] {
            hw = (
                crate::kernels::out_extent(hw.0, 3, s, 1).unwrap(),
                crate::kernels::out_extent(hw.1, 3, s, 1).unwrap(),
            );
        }
        assert_eq!(hw, (256, 32));
        assert!(crate::kernels::out_extent(1, 5, 1, 0).is_err());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu_scalar(10.0f32) - 10.0).abs() < 1e-5);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-20);
    }
}
