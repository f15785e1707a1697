//! Dense NCHW tensors, convolution parameters and flow fields.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::invalid(format!("unknown precision {other:?}"))),
        }
    }
}

/// Floating-point element type of a tensor.
pub trait Real:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const PRECISION: Precision;

    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary non-negative strides; `c` is row-major with row stride `n`.
    fn gemm(m: usize, k: usize, n: usize, a: Strided<'_, Self>, b: Strided<'_, Self>, beta: Self, c: &mut [Self]);
}

/// A matrix view over a slice: element `(r, c)` lives at `r * rs + c * cs`.
#[derive(Debug, Clone, Copy)]
pub struct Strided<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

fn check_view<T>(v: &Strided<'_, T>, rows: usize, cols: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * v.rs + (cols - 1) * v.cs < v.data.len(), "gemm view out of bounds");
    }
}

macro_rules! gemm_impl {
    ($f:path, $m:ident, $k:ident, $n:ident, $a:ident, $b:ident, $beta:ident, $c:ident) => {{
        check_view(&$a, $m, $k);
        check_view(&$b, $k, $n);
        assert!($c.len() >= $m * $n, "gemm output too small");
        if $m == 0 || $n == 0 {
            return;
        }
        // SAFETY: the views were bounds-checked above and `c` holds m * n elements.
        unsafe {
            $f(
                $m,
                $k,
                $n,
                1.0,
                $a.data.as_ptr(),
                $a.rs as isize,
                $a.cs as isize,
                $b.data.as_ptr(),
                $b.rs as isize,
                $b.cs as isize,
                $beta,
                $c.as_mut_ptr(),
                $n as isize,
                1,
            )
        }
    }};
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline]
    fn cast(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(m: usize, k: usize, n: usize, a: Strided<'_, f32>, b: Strided<'_, f32>, beta: f32, c: &mut [f32]) {
        gemm_impl!(matrixmultiply::sgemm, m, k, n, a, b, beta, c)
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline]
    fn cast(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(m: usize, k: usize, n: usize, a: Strided<'_, f64>, b: Strided<'_, f64>, beta: f64, c: &mut [f64]) {
        gemm_impl!(matrixmultiply::dgemm, m, k, n, a, b, beta, c)
    }
}

/// A dense `(N, C, H, W)` tensor stored row-major.
///
/// All values are finite; constructors reject NaN and infinities.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Tensor4 { dims, data })
    }

    /// Builds a tensor without the finiteness scan. Callers guarantee the
    /// length matches and the values come from finite arithmetic.
    pub(crate) fn from_raw(dims: [usize; 4], data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor4 { dims, data }
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Tensor4 {
            dims,
            data: vec![T::zero(); dims.iter().product()],
        }
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor4::filled([1, 1, 1, 1], value)
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(ni, ci, y, x));
                    }
                }
            }
        }
        Tensor4 { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn n(&self) -> usize {
        self.dims[0]
    }

    pub fn c(&self) -> usize {
        self.dims[1]
    }

    pub fn h(&self) -> usize {
        self.dims[2]
    }

    pub fn w(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.dims;
        ((n * cc + c) * h + y) * w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// Sets one element. Rejects non-finite values.
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::NonFinite("tensor element"));
        }
        let i = self.index(n, c, y, x);
        self.data[i] = v;
        Ok(())
    }

    /// The contiguous `H*W` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Largest absolute elementwise difference; dims must match.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Selects a single sample along the batch axis.
    pub fn sample(&self, n: usize) -> Self {
        let per = self.dims[1] * self.dims[2] * self.dims[3];
        Tensor4 {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks equally-shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor4<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.dims;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.dims[1..] != [c, h, w] {
                return Err(Error::shape(format!(
                    "stack: {:?} vs {:?}",
                    t.dims, first.dims
                )));
            }
            n += t.dims[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            dims: [n, c, h, w],
            data,
        })
    }

    /// Clamps every value into `[lo, hi]`.
    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }
}

/// Weights `(C_out, C_in, K, K)` and bias `C_out` of a stride-1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor4<T>,
    pub bias: Vec<T>,
    pub trainable: bool,
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor4<T>, bias: Vec<T>, trainable: bool) -> Result<Self> {
        let p = ConvParams {
            weight,
            bias,
            trainable,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize, trainable: bool) -> Result<Self> {
        ConvParams::new(
            Tensor4::zeros([c_out, c_in, k, k]),
            vec![T::zero(); c_out],
            trainable,
        )
    }

    /// Identity mapping as a 3x3 Dirac kernel; requires `C_in = C_out`.
    pub fn dirac(channels: usize, trainable: bool) -> Self {
        let weight = Tensor4::from_fn([channels, channels, 3, 3], |o, i, y, x| {
            if o == i && y == 1 && x == 1 {
                T::one()
            } else {
                T::zero()
            }
        });
        ConvParams {
            weight,
            bias: vec![T::zero(); channels],
            trainable,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [_, _, kh, kw] = self.weight.dims();
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape(format!(
                "kernel must be 1x1 or 3x3, got {kh}x{kw}"
            )));
        }
        if self.bias.len() != self.c_out() {
            return Err(Error::shape(format!(
                "bias length {} != C_out {}",
                self.bias.len(),
                self.c_out()
            )));
        }
        if self.weight.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conv weight"));
        }
        if self.bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conv bias"));
        }
        Ok(())
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn bias_tensor(&self) -> Tensor4<T> {
        Tensor4::from_raw([1, self.bias.len(), 1, 1], self.bias.clone())
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|b| U::cast(b.as_f64())).collect(),
            trainable: self.trainable,
        }
    }
}

/// Per-pixel displacements `(dx, dy)` in pixels for `N` samples of `H x W`.
///
/// A warp samples the source feature at `p + flow(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    n: usize,
    h: usize,
    w: usize,
    dx: Vec<T>,
    dy: Vec<T>,
}

impl<T: Real> FlowField<T> {
    pub fn new(n: usize, h: usize, w: usize, dx: Vec<T>, dy: Vec<T>) -> Result<Self> {
        let len = n * h * w;
        if dx.len() != len || dy.len() != len {
            return Err(Error::shape(format!(
                "flow {n}x{h}x{w} needs {len} values per component"
            )));
        }
        if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow"));
        }
        Ok(FlowField { n, h, w, dx, dy })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        FlowField {
            n,
            h,
            w,
            dx: vec![T::zero(); n * h * w],
            dy: vec![T::zero(); n * h * w],
        }
    }

    pub fn uniform(n: usize, h: usize, w: usize, dx: T, dy: T) -> Self {
        FlowField {
            n,
            h,
            w,
            dx: vec![dx; n * h * w],
            dy: vec![dy; n * h * w],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize) -> (T, T) {
        let i = (n * self.h + y) * self.w + x;
        (self.dx[i], self.dy[i])
    }

    pub fn dx(&self) -> &[T] {
        &self.dx
    }

    pub fn dy(&self) -> &[T] {
        &self.dy
    }

    pub fn cast<U: Real>(&self) -> FlowField<U> {
        FlowField {
            n: self.n,
            h: self.h,
            w: self.w,
            dx: self.dx.iter().map(|v| U::cast(v.as_f64())).collect(),
            dy: self.dy.iter().map(|v| U::cast(v.as_f64())).collect(),
        }
    }

    /// Concatenates per-sample flows along the batch axis.
    pub fn stack(items: &[FlowField<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero flows"))?;
        let mut out = FlowField {
            n: 0,
            h: first.h,
            w: first.w,
            dx: Vec::new(),
            dy: Vec::new(),
        };
        for f in items {
            if (f.h, f.w) != (first.h, first.w) {
                return Err(Error::shape("flow stack spatial mismatch"));
            }
            out.n += f.n;
            out.dx.extend_from_slice(&f.dx);
            out.dy.extend_from_slice(&f.dy);
        }
        Ok(out)
    }
}
