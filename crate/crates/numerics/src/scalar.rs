use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` (training and inference) and `f64` (gradient
/// checking).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// General matrix multiply `C ← α·A·B + β·C` over strided views.
    ///
    /// # Safety
    /// Every index reached through the given dimensions and strides must be
    /// in bounds of the pointed-to buffers, and `c` must not alias `a`/`b`.
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
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
        backend(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
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
        backend(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Single-threaded call into the `gemm` crate. Its convention is
/// `dst ← α'·dst + β'·lhs·rhs`, so our `alpha`/`beta` swap places, and a zero
/// `beta` means the destination is not read at all.
#[allow(clippy::too_many_arguments)]
unsafe fn backend<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: *const T,
    rsa: isize,
    csa: isize,
    b: *const T,
    rsb: isize,
    csb: isize,
    beta: T,
    c: *mut T,
    rsc: isize,
    csc: isize,
) {
    gemm::gemm(
        m,
        n,
        k,
        c,
        csc,
        rsc,
        beta != T::zero(),
        a,
        csa,
        rsa,
        b,
        csb,
        rsb,
        beta,
        alpha,
        false,
        false,
        false,
        gemm::Parallelism::None,
    );
}

/// Row/column strides of a matrix view.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Row-major `rows × cols` storage.
    pub fn row_major(cols: usize) -> Self {
        Layout { rs: cols, cs: 1 }
    }

    /// Transposed view of row-major storage that has `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Layout { rs: 1, cs: cols }
    }

    fn max_offset(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// Safe wrapper over [`Scalar::gemm_raw`]: `c ← α·a·b + β·c` where `a` is
/// `m × k`, `b` is `k × n` and `c` is `m × n`, each read through its layout.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > la.max_offset(m, k), "gemm: lhs out of bounds");
    assert!(k == 0 || b.len() > lb.max_offset(k, n), "gemm: rhs out of bounds");
    assert!(c.len() > lc.max_offset(m, n), "gemm: output out of bounds");
    // SAFETY: bounds checked above; `c` is a unique borrow so it cannot alias.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}
