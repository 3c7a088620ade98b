use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of the tensor engine.
///
/// Training runs in `f32`; gradient checks and exactness tests run in `f64`.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a @ b + beta * c` with arbitrary strides on `a` and `b`.
    /// `c` is dense row-major `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n, "gemm output buffer too small");
                if k == 0 {
                    for v in c[..m * n].iter_mut() {
                        *v *= beta;
                    }
                    return;
                }
                let last = |rs: isize, cs: isize, rows: usize, cols: usize| {
                    (rows as isize - 1) * rs + (cols as isize - 1) * cs
                };
                assert!(last(rsa, csa, m, k) < a.len() as isize, "gemm lhs out of bounds");
                assert!(last(rsb, csb, k, n) < b.len() as isize, "gemm rhs out of bounds");
                // SAFETY: extents checked above; strides are non-negative in all callers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
