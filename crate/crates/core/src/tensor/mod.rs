//! Dense NCHW tensors and the numeric kernels the network is built from.
//!
//! Every kernel produces each output element in exactly one place with a
//! fixed accumulation order, so results do not depend on how many rayon
//! workers are available.

mod activation;
mod arith;
mod conv;
mod norm;
mod resize;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{shape_err, Error, Result};

pub use activation::{relu6, relu6_inplace, sigmoid, softmax_lastdim};
pub use arith::{
    add, add_inplace, concat_channels, hadamard, matmul_batched, scale, split_channels,
    transpose_last2,
};
pub use conv::{conv2d, depthwise_conv2d};
pub(crate) use conv::{conv2d_grad_input, conv2d_grad_weight};
pub use norm::{batch_norm, batch_norm_inplace, batchnorm_fold, BatchNormParams, BN_EPS};
pub use resize::{adaptive_avg_pool, bilinear_upsample};
pub(crate) use resize::{adaptive_avg_pool_backward, bilinear_upsample_backward};

/// Element types the kernels operate on: `f32` for inference, `f64` for
/// gradient checking.
pub trait Scalar: Float + FromPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    const DTYPE: DType;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// `(n, c, h, w)`.
pub type Dims = [usize; 4];

/// Casts an `f64` literal into the kernel scalar type.
#[inline]
pub(crate) fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("finite literal")
}

/// Rank-4 contiguous row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Dims,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor<{:?}>{:?}", T::DTYPE, self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_dims(dims: Dims) -> Result<usize> {
    const AXES: [&str; 4] = ["n", "c", "h", "w"];
    for (axis, &d) in AXES.iter().zip(dims.iter()) {
        if d == 0 {
            return Err(shape_err(
                axis,
                format!("dimension must be positive, got {dims:?}"),
            ));
        }
    }
    Ok(dims.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        let len = check_dims(dims)?;
        if data.len() != len {
            return Err(shape_err(
                "data",
                format!("{dims:?} needs {len} elements, got {}", data.len()),
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: Dims, value: T) -> Result<Self> {
        let len = check_dims(dims)?;
        Ok(Self {
            dims,
            data: vec![value; len],
        })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let len = check_dims(dims)?;
        Ok(Self {
            dims,
            data: (0..len).map(&mut f).collect(),
        })
    }

    /// Unchecked constructor for kernels whose output dims are known valid.
    pub(crate) fn raw(dims: Dims, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn c(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.dims[2]
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.dims[3]
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// Reinterprets the same contiguous data under new dims.
    pub fn reshape(self, dims: Dims) -> Result<Self> {
        let len = check_dims(dims)?;
        if len != self.data.len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {dims:?}", self.dims),
            ));
        }
        Ok(Self {
            dims,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::raw(self.dims, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::raw(
            self.dims,
            self.data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        )
    }

    /// Contiguous `h * w` slice of one channel plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(
            T::zero(),
            |acc, &v| if v.abs() > acc { v.abs() } else { acc },
        )
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        ensure_same_dims(self, other, "compare")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| {
                let d = (a - b).abs();
                if d > acc || d.is_nan() {
                    d
                } else {
                    acc
                }
            }))
    }

    /// `max|self - reference| / max|reference|`.
    pub fn max_rel_diff(&self, reference: &Self) -> Result<T> {
        let diff = self.max_abs_diff(reference)?;
        let scale = reference.max_abs();
        Ok(if scale > T::zero() {
            diff / scale
        } else {
            diff
        })
    }

    pub fn mean(&self) -> T {
        let sum = self.data.iter().fold(T::zero(), |a, &b| a + b);
        sum / lit::<T>(self.data.len() as f64)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn ensure_same_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    const AXES: [&str; 4] = ["n", "c", "h", "w"];
    for i in 0..4 {
        if a.dims[i] != b.dims[i] {
            return Err(shape_err(
                AXES[i],
                format!("{op}: {:?} vs {:?}", a.dims, b.dims),
            ));
        }
    }
    Ok(())
}

/// Convolution hyper-parameters. Weight dims are
/// `(out_ch, in_ch / groups, kh, kw)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square `k x k` convolution with "same" padding `k / 2` and no bias.
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel: (k, k),
            stride: (stride, stride),
            padding: (k / 2, k / 2),
            groups: 1,
            has_bias: false,
        }
    }

    pub fn pointwise(in_ch: usize, out_ch: usize) -> Self {
        Self::new(in_ch, out_ch, 1, 1)
    }

    pub fn depthwise(ch: usize, k: usize, stride: usize) -> Self {
        Self {
            groups: ch,
            ..Self::new(ch, ch, k, stride)
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    pub fn weight_dims(&self) -> Dims {
        [
            self.out_ch,
            self.in_per_group(),
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_dims().iter().product()
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_ch && self.groups == self.out_ch
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.in_ch == 0 || self.out_ch == 0 || self.groups == 0 {
            problems.push(format!("channels and groups must be positive: {self:?}"));
        } else {
            if self.in_ch % self.groups != 0 {
                problems.push(format!(
                    "in_ch {} not divisible by groups {}",
                    self.in_ch, self.groups
                ));
            }
            if self.out_ch % self.groups != 0 {
                problems.push(format!(
                    "out_ch {} not divisible by groups {}",
                    self.out_ch, self.groups
                ));
            }
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            problems.push(format!("kernel and stride must be positive: {self:?}"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Output `(h, w)` for an input of `(h, w)`; `None` when the padded input
    /// is smaller than the kernel.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ph < self.kernel.0 || pw < self.kernel.1 {
            return None;
        }
        Some((
            (ph - self.kernel.0) / self.stride.0 + 1,
            (pw - self.kernel.1) / self.stride.1 + 1,
        ))
    }
}
