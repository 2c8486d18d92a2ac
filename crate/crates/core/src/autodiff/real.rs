use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the autodiff engine.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    /// Raw strided GEMM: `c = a·b + beta·c`.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must be
    /// in bounds of the corresponding pointer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn of_f32(v: f32) -> Self {
        Self::from(v).expect("f32 converts to any Real")
    }

    fn as_f32(self) -> f32 {
        self.to_f32().expect("Real converts to f32")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
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
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix product `c (+)= op(a) · op(b)`.
///
/// `a_dims` and `b_dims` are the stored (rows, cols) of the row-major
/// buffers; the `trans_*` flags select the transposed view.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Real>(
    a: &[F],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[F],
    b_dims: (usize, usize),
    trans_b: bool,
    c: &mut [F],
    accumulate: bool,
) {
    let (m, k, rsa, csa) = if trans_a {
        (a_dims.1, a_dims.0, 1, a_dims.1 as isize)
    } else {
        (a_dims.0, a_dims.1, a_dims.1 as isize, 1)
    };
    let (kb, n, rsb, csb) = if trans_b {
        (b_dims.1, b_dims.0, 1, b_dims.1 as isize)
    } else {
        (b_dims.0, b_dims.1, b_dims.1 as isize, 1)
    };
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!(a.len(), a_dims.0 * a_dims.1);
    assert_eq!(b.len(), b_dims.0 * b_dims.1);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = F::zero());
        }
        return;
    }
    // SAFETY: the asserts above pin every buffer to exactly the extent the
    // strides address.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
