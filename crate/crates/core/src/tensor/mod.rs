//! Dense row-major tensors and the reverse-mode tape built on them.
//!
//! Feature maps use NCHW layout throughout. Values are immutable once they
//! enter a [`Tape`]; only the tape's gradient buffers are written during
//! [`Tape::backward`].

mod gradcheck;
mod kernels;
mod snapshot;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::error::{dim_err, Error, Result};

pub use gradcheck::{finite_diff_check, finite_diff_check_with};
pub use snapshot::{Snapshot, SnapshotItem, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};
pub use tape::{Activation, BinaryKind, CellPartition, Tape, Var};

// `MatView` is public only because it appears in `Scalar::gemm_view`.

/// Floating-point element type. `f32` is used for training and inference,
/// `f64` for gradient checking.
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + Sum + 'static {
    const NAME: &'static str;

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = a · b + beta · c` for row-major matrices. `a` is `m×k` (or `k×m`
    /// when `trans_a`), `b` is `k×n` (or `n×k` when `trans_b`), `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        n: usize,
        k: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        beta: Self,
    ) {
        let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        Self::gemm_view(
            (m, n, k),
            (a, MatView::new(0, rsa, csa)),
            (b, MatView::new(0, rsb, csb)),
            (c, MatView::new(0, n, 1)),
            beta,
        );
    }

    /// `c = a · b + beta · c` over strided views: `a` is `m×k`, `b` is `k×n`,
    /// `c` is `m×n`. Panics if any view reaches past its slice.
    fn gemm_view(
        dims: (usize, usize, usize),
        a: (&[Self], MatView),
        b: (&[Self], MatView),
        c: (&mut [Self], MatView),
        beta: Self,
    );
}

/// Offset and row/column strides of a matrix inside a flat slice.
#[derive(Clone, Copy, Debug)]
pub struct MatView {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn new(offset: usize, rs: usize, cs: usize) -> Self {
        MatView { offset, rs, cs }
    }

    fn check(&self, rows: usize, cols: usize, len: usize) {
        if rows > 0 && cols > 0 {
            let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < len, "matrix view reaches {last} in a slice of {len}");
        }
    }
}

macro_rules! impl_gemm_view {
    ($kernel:path) => {
        fn gemm_view(
            (m, n, k): (usize, usize, usize),
            (a, av): (&[Self], MatView),
            (b, bv): (&[Self], MatView),
            (c, cv): (&mut [Self], MatView),
            beta: Self,
        ) {
            if m == 0 || n == 0 {
                return;
            }
            av.check(m, k, a.len());
            bv.check(k, n, b.len());
            cv.check(m, n, c.len());
            // SAFETY: every view was checked against its slice above.
            unsafe {
                $kernel(
                    m,
                    k,
                    n,
                    1.0,
                    a.as_ptr().add(av.offset),
                    av.rs as isize,
                    av.cs as isize,
                    b.as_ptr().add(bv.offset),
                    bv.rs as isize,
                    bv.cs as isize,
                    beta,
                    c.as_mut_ptr().add(cv.offset),
                    cv.rs as isize,
                    cv.cs as isize,
                );
            }
        }
    };
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    impl_gemm_view!(matrixmultiply::sgemm);
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    impl_gemm_view!(matrixmultiply::dgemm);
}

/// Sums in `f64` regardless of `T`, which keeps f32 reductions over whole
/// feature maps from drifting with their length.
pub(crate) fn wide_sum<T: Scalar>(xs: &[T]) -> T {
    T::lit(xs.iter().map(|v| v.as_f64()).sum())
}

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!(
                "shape {:?} holds {} elements but {} were supplied",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    /// Rank-0 tensor.
    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Extents of a rank-4 NCHW tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(dim_err!("expected NCHW tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum accumulated in `f64`.
    pub fn sum(&self) -> T {
        wide_sum(&self.data)
    }

    /// Largest absolute elementwise difference; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NumericDomain(format!(
                "{what} produced a non-finite value"
            )))
        }
    }
}
