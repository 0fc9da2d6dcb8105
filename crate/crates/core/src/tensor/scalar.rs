use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// A strided read-only matrix view used by [`Scalar::gemm`].
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Dense row-major `rows x cols` matrix.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transposed view of a dense row-major matrix stored as `cols x rows`.
    pub fn dense_t(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: 1,
            col_stride: rows,
        }
    }

    /// Column block `[col0, col0 + width)` of a dense row-major matrix with
    /// `stride` columns, restricted to `rows` rows starting at `row0`.
    pub fn block(
        data: &'a [T],
        stride: usize,
        row0: usize,
        rows: usize,
        col0: usize,
        width: usize,
    ) -> Self {
        MatRef {
            data,
            offset: row0 * stride + col0,
            rows,
            cols: width,
            row_stride: stride,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Mutable counterpart of [`MatRef`].
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        MatMut {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn block(
        data: &'a mut [T],
        stride: usize,
        row0: usize,
        rows: usize,
        col0: usize,
        width: usize,
    ) -> Self {
        MatMut {
            data,
            offset: row0 * stride + col0,
            rows,
            cols: width,
            row_stride: stride,
            col_stride: 1,
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Element type of the tensor engine. The pipeline runs in `f32`; the
/// gradient checker instantiates the same kernels in `f64`.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = beta * c + a · b` for arbitrary strided views.
    fn gemm_raw(a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: MatMut<'_, Self>);

    fn gemm(a: MatRef<'_, Self>, b: MatRef<'_, Self>, accumulate: bool, c: MatMut<'_, Self>) {
        assert_eq!(a.cols, b.rows, "gemm inner dimension");
        assert_eq!(a.rows, c.rows, "gemm output rows");
        assert_eq!(b.cols, c.cols, "gemm output cols");
        if a.rows == 0 || b.cols == 0 {
            return;
        }
        assert!(a.rows == 0 || a.cols == 0 || a.last_index() < a.data.len());
        assert!(b.rows == 0 || b.cols == 0 || b.last_index() < b.data.len());
        assert!(c.last_index() < c.data.len());
        let beta = if accumulate { Self::one() } else { Self::zero() };
        Self::gemm_raw(a, b, beta, c);
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm_raw(a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: MatMut<'_, Self>) {
                let k = a.cols;
                if k == 0 {
                    // matrixmultiply requires k > 0 for pointer validity; handle the
                    // empty reduction by scaling c directly.
                    for i in 0..c.rows {
                        for j in 0..c.cols {
                            let idx = c.offset + i * c.row_stride + j * c.col_stride;
                            c.data[idx] *= beta;
                        }
                    }
                    return;
                }
                // SAFETY: bounds of every view were checked against the backing
                // slices in `Scalar::gemm`, and `c` does not alias `a` or `b`
                // because it is borrowed mutably.
                unsafe {
                    $gemm(
                        a.rows,
                        k,
                        b.cols,
                        1.0,
                        a.data.as_ptr().add(a.offset),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr().add(b.offset),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        c.data.as_mut_ptr().add(c.offset),
                        c.row_stride as isize,
                        c.col_stride as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
