//! Dense NCHW tensors, spatial reductions and 2-d convolution kernels.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batch x channel x height x width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one (n, c) plane.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per sample.
    pub const fn sample(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::InvalidShape(self.dims()));
        }
        Ok(())
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape4 {
    fn from(d: [usize; 4]) -> Self {
        Shape4::new(d[0], d[1], d[2], d[3])
    }
}

/// Per-plane reductions over the H x W positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialReduce {
    Sum,
    SumOfSquares,
    MaxAbs,
    SumAbs,
}

#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: impl Into<Shape4>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::shape("Tensor4::new", shape.len(), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Shape4>, value: T) -> Self {
        let shape = shape.into();
        assert!(!shape.dims().contains(&0), "zero-sized shape {shape}");
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a tensor from a function of the (n, c, h, w) index.
    pub fn from_fn(shape: impl Into<Shape4>, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let shape = shape.into();
        let mut out = Self::zeros(shape);
        let mut i = 0;
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        out.data[i] = f(n, c, h, w);
                        i += 1;
                    }
                }
            }
        }
        out
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
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

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    /// The H x W plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape.sample();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn reshape(self, shape: impl Into<Shape4>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape4("zip_map", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape4("add_assign", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Reduces each (n, c) plane to one value; output is (N, C, 1, 1).
    pub fn reduce_spatial(&self, kind: SpatialReduce) -> Self {
        let s = self.shape;
        let mut out = Vec::with_capacity(s.n * s.c);
        for n in 0..s.n {
            for c in 0..s.c {
                let p = self.plane(n, c);
                let v = match kind {
                    SpatialReduce::Sum => p.iter().fold(T::zero(), |a, &x| a + x),
                    SpatialReduce::SumOfSquares => p.iter().fold(T::zero(), |a, &x| a + x * x),
                    SpatialReduce::MaxAbs => p.iter().fold(T::zero(), |a, &x| a.max(x.abs())),
                    SpatialReduce::SumAbs => p.iter().fold(T::zero(), |a, &x| a + x.abs()),
                };
                out.push(v);
            }
        }
        Self {
            shape: Shape4::new(s.n, s.c, 1, 1),
            data: out,
        }
    }

    /// Multiplies plane (n, c) by `factors[n * C + c]`.
    pub fn scale_planes(&self, factors: &[T]) -> Result<Self> {
        let s = self.shape;
        if factors.len() != s.n * s.c {
            return Err(Error::shape("scale_planes", s.n * s.c, factors.len()));
        }
        let p = s.plane();
        let mut data = self.data.clone();
        for (chunk, &f) in data.chunks_mut(p).zip(factors) {
            for v in chunk {
                *v *= f;
            }
        }
        Ok(Self { shape: s, data })
    }

    /// Reorders channels so that output channel `i` is input channel `perm[i]`.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<Self> {
        let s = self.shape;
        if perm.len() != s.c {
            return Err(Error::shape("permute_channels", s.c, perm.len()));
        }
        let mut out = Self::zeros(s);
        for n in 0..s.n {
            for (i, &src) in perm.iter().enumerate() {
                out.plane_mut(n, i).copy_from_slice(self.plane(n, src));
            }
        }
        Ok(out)
    }

    /// Population mean and variance over every element.
    pub fn mean_var(&self) -> (f64, f64) {
        let len = self.data.len() as f64;
        let mean = self.data.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / len;
        let var = self
            .data
            .iter()
            .map(|v| {
                let d = v.to_f64_lossy() - mean;
                d * d
            })
            .sum::<f64>()
            / len;
        (mean, var)
    }
}

/// Output geometry of a strided, zero-padded 2-d window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    /// floor((in + 2p - k) / stride) + 1, or an error when the window does not fit.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::InvalidParam("stride must be >= 1".into()));
        }
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::shape(
                "conv window",
                format!("padded input >= {}x{}", self.kernel_h, self.kernel_w),
                format!("{ph}x{pw}"),
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }
}

fn check_conv_shapes(x: Shape4, weight: Shape4, g: ConvGeometry) -> Result<Shape4> {
    if weight.c != x.c {
        return Err(Error::shape("conv2d input channels", weight.c, x.c));
    }
    if weight.h != g.kernel_h || weight.w != g.kernel_w {
        return Err(Error::shape(
            "conv2d kernel",
            format!("{}x{}", g.kernel_h, g.kernel_w),
            format!("{}x{}", weight.h, weight.w),
        ));
    }
    let (ho, wo) = g.output_hw(x.h, x.w)?;
    Ok(Shape4::new(x.n, weight.n, ho, wo))
}

/// Unfolds sample `n` into a (C*kH*kW) x (Ho*Wo) column matrix.
fn im2col<T: Scalar>(x: &Tensor4<T>, n: usize, g: ConvGeometry, ho: usize, wo: usize, cols: &mut [T]) {
    let s = x.shape();
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..s.c {
        let plane = x.plane(n, c);
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        dst[oi * wo + oj] = if ii >= 0 && jj >= 0 && (ii as usize) < s.h && (jj as usize) < s.w {
                            plane[ii as usize * s.w + jj as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column matrix back into the plane layout of one sample.
fn col2im<T: Scalar>(cols: &[T], grad: &mut Tensor4<T>, n: usize, g: ConvGeometry, ho: usize, wo: usize) {
    let s = grad.shape();
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..s.c {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let plane = grad.plane_mut(n, c);
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii as usize >= s.h {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - pad;
                        if jj < 0 || jj as usize >= s.w {
                            continue;
                        }
                        plane[ii as usize * s.w + jj as usize] += src[oi * wo + oj];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation of `x` with `weight` (C_out, C_in, kH, kW), im2col + GEMM.
pub fn conv2d_forward<T: Scalar>(x: &Tensor4<T>, weight: &Tensor4<T>, g: ConvGeometry) -> Result<Tensor4<T>> {
    let out_shape = check_conv_shapes(x.shape(), weight.shape(), g)?;
    let (ho, wo) = (out_shape.h, out_shape.w);
    let k = x.shape().c * g.kernel_h * g.kernel_w;
    let mut cols = vec![T::zero(); k * ho * wo];
    let mut out = Tensor4::zeros(out_shape);
    let per_sample = out_shape.sample();
    for n in 0..x.shape().n {
        im2col(x, n, g, ho, wo, &mut cols);
        let dst = &mut out.data_mut()[n * per_sample..(n + 1) * per_sample];
        T::gemm(out_shape.c, k, ho * wo, T::one(), weight.data(), false, &cols, false, T::zero(), dst);
    }
    Ok(out)
}

/// Same contract as [`conv2d_forward`], computed with direct loops.
pub fn conv2d_forward_direct<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    g: ConvGeometry,
) -> Result<Tensor4<T>> {
    let out_shape = check_conv_shapes(x.shape(), weight.shape(), g)?;
    let s = x.shape();
    let pad = g.padding as isize;
    let mut out = Tensor4::zeros(out_shape);
    for n in 0..s.n {
        for co in 0..out_shape.c {
            for oi in 0..out_shape.h {
                for oj in 0..out_shape.w {
                    let mut acc = T::zero();
                    for ci in 0..s.c {
                        for ki in 0..g.kernel_h {
                            let ii = (oi * g.stride + ki) as isize - pad;
                            if ii < 0 || ii as usize >= s.h {
                                continue;
                            }
                            for kj in 0..g.kernel_w {
                                let jj = (oj * g.stride + kj) as isize - pad;
                                if jj < 0 || jj as usize >= s.w {
                                    continue;
                                }
                                acc += x.at(n, ci, ii as usize, jj as usize) * weight.at(co, ci, ki, kj);
                            }
                        }
                    }
                    let o = out.offset(n, co, oi, oj);
                    out.data_mut()[o] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input and its weight.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &Tensor4<T>,
    grad_out: &Tensor4<T>,
    g: ConvGeometry,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let out_shape = check_conv_shapes(x.shape(), weight.shape(), g)?;
    if grad_out.shape() != out_shape {
        return Err(Error::shape4("conv2d_backward grad_out", out_shape, grad_out.shape()));
    }
    let (ho, wo) = (out_shape.h, out_shape.w);
    let k = x.shape().c * g.kernel_h * g.kernel_w;
    let mut cols = vec![T::zero(); k * ho * wo];
    let mut grad_cols = vec![T::zero(); k * ho * wo];
    let mut grad_x = Tensor4::zeros(x.shape());
    let mut grad_w = Tensor4::zeros(weight.shape());
    let per_sample = out_shape.sample();
    for n in 0..x.shape().n {
        let go = &grad_out.data()[n * per_sample..(n + 1) * per_sample];
        im2col(x, n, g, ho, wo, &mut cols);
        // dW += dY (Cout x HW) * cols^T (HW x K)
        T::gemm(out_shape.c, ho * wo, k, T::one(), go, false, &cols, true, T::one(), grad_w.data_mut());
        // dcols = W^T (K x Cout) * dY (Cout x HW)
        T::gemm(k, out_shape.c, ho * wo, T::one(), weight.data(), true, go, false, T::zero(), &mut grad_cols);
        col2im(&grad_cols, &mut grad_x, n, g, ho, wo);
    }
    Ok((grad_x, grad_w))
}
