use core::fmt::Debug;
use core::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type of every tensor in the crate.
///
/// Training runs in `f32`; gradient checks run the same code paths in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// Dtype tag used in checkpoint manifests.
    const DTYPE: &'static str;

    /// `C = alpha * A * B + beta * C` over strided row/column layouts.
    ///
    /// # Safety
    /// Every strided access must land inside the pointed-to allocations.
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

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

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
    const DTYPE: &'static str = "f64";

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

/// Strided view used to describe one GEMM operand.
#[derive(Clone, Copy, Debug)]
pub struct Strided {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Strided {
    pub const fn row_major(cols: usize) -> Self {
        Self {
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Row-major operand read as its transpose.
    pub const fn transposed(cols: usize) -> Self {
        Self {
            offset: 0,
            row_stride: 1,
            col_stride: cols,
        }
    }

    pub const fn at(self, offset: usize) -> Self {
        Self { offset, ..self }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
    }
}

/// Bounds-checked strided GEMM: `c = alpha * a(m×k) * b(k×n) + beta * c(m×n)`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    sa: Strided,
    b: &[T],
    sb: Strided,
    beta: T,
    c: &mut [T],
    sc: Strided,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(sc.last_index(m, n) < c.len(), "gemm: output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = sc.offset + i * sc.row_stride + j * sc.col_stride;
                c[idx] = if beta == T::zero() {
                    T::zero()
                } else {
                    c[idx] * beta
                };
            }
        }
        return;
    }
    assert!(sa.last_index(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(sb.last_index(k, n) < b.len(), "gemm: rhs out of bounds");
    // SAFETY: all three operands were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(sa.offset),
            sa.row_stride as isize,
            sa.col_stride as isize,
            b.as_ptr().add(sb.offset),
            sb.row_stride as isize,
            sb.col_stride as isize,
            beta,
            c.as_mut_ptr().add(sc.offset),
            sc.row_stride as isize,
            sc.col_stride as isize,
        );
    }
}

/// Numerically stable `log(1 + exp(x))`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
