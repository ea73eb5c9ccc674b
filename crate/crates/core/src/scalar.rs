//! Floating-point element types the tensor engine is generic over.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Element type of a [`Tensor`](crate::tensor::Tensor): `f32` or `f64`.
///
/// Besides the usual float arithmetic, each implementation supplies a dense
/// matrix-multiply kernel so that the engine can stay generic while the hot
/// loops run on a tuned, type-specific routine.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// `C <- alpha * A * B + beta * C` over raw strided storage.
    ///
    /// # Safety
    /// Every element addressed through the given dimensions and strides must
    /// lie inside the allocation behind the respective pointer, and `c` must
    /// not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Lossless-as-possible conversion from `f64`; panics only for types that
    /// cannot represent finite `f64` values at all.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("scalar conversion from f64")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided, read-only matrix view over a slice.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Contiguous row-major matrix.
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose, as a view (no copy).
    pub fn t(self) -> Self {
        Self {
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

/// Safe wrapper over [`Scalar::gemm_raw`]: `C <- A * B + (accumulate ? C : 0)`
/// where `C` is row-major with the given row stride starting at `c_offset`.
pub(crate) fn gemm<T: Scalar>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    c_offset: usize,
    c_row_stride: usize,
    accumulate: bool,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                let start = c_offset + i * c_row_stride;
                c[start..start + n].iter_mut().for_each(|x| *x = T::zero());
            }
        }
        return;
    }
    assert!(a.last_index() < a.data.len(), "gemm: A view out of bounds");
    assert!(b.last_index() < b.data.len(), "gemm: B view out of bounds");
    assert!(
        c_offset + (m - 1) * c_row_stride + n <= c.len(),
        "gemm: C view out of bounds"
    );
    assert!(c_row_stride >= n, "gemm: C rows overlap");
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds of all three views were checked above; `c` is a unique
    // borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_row_stride as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_and_transpose_views() {
        let a: Vec<f64> = (0..6).map(|x| x as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|x| (x as f64).sin()).collect();
        let expect = naive(&a, &b, 2, 3, 4);
        let mut c = vec![0.0; 8];
        gemm(
            MatRef::row_major(&a, 2, 3),
            MatRef::row_major(&b, 3, 4),
            &mut c,
            0,
            4,
            false,
        );
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // (Bᵀ Aᵀ)ᵀ == A B
        let mut ct = vec![0.0; 8];
        gemm(
            MatRef::row_major(&b, 3, 4).t(),
            MatRef::row_major(&a, 2, 3).t(),
            &mut ct,
            0,
            2,
            false,
        );
        for i in 0..2 {
            for j in 0..4 {
                assert!((ct[j * 2 + i] - expect[i * 4 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_f32_accumulates() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        gemm(
            MatRef::row_major(&a, 1, 2),
            MatRef::row_major(&b, 2, 1),
            &mut c,
            0,
            1,
            true,
        );
        assert_eq!(c[0], 21.0);
    }
}
