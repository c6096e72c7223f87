use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a [`Tensor`](super::Tensor).
///
/// `f32` is used for training and inference; `f64` exists so that gradients
/// can be checked against central finite differences.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Size in bytes of one element.
    const BYTES: usize;

    /// `c = a·b (+ c if accumulate)` for dense row-major matrices.
    ///
    /// `a` is `m×k` (stored `k×m` when `a_t`), `b` is `k×n` (stored `n×k`
    /// when `b_t`), `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // Logical (rows × cols) matrix; stored as cols × rows when transposed.
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $bytes:expr) => {
        impl Scalar for $t {
            const BYTES: usize = $bytes;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|x| *x = 0.0);
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above guarantee every index touched by
                // the strided views lies inside the slices.
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

impl_scalar!(f32, matrixmultiply::sgemm, 4);
impl_scalar!(f64, matrixmultiply::dgemm, 8);
