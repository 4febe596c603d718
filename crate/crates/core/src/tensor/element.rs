use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Scalar arithmetic width.
///
/// `Standard` trains in 32-bit; `Verification` runs the same graph in 64-bit
/// so centered finite differences can be compared at tight tolerances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    #[default]
    Standard,
    Verification,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Standard => "standard",
            Precision::Verification => "verification",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" | "f32" => Some(Precision::Standard),
            "verification" | "f64" => Some(Precision::Verification),
            _ => None,
        }
    }
}

/// Scalar type a tensor can hold.
pub trait Element:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const PRECISION: Precision;
    /// Checkpoint dtype code.
    const DTYPE_CODE: u8;
    const BYTES: usize;

    /// `c = alpha * a @ b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary (row, column) strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

#[inline]
fn span(rows: usize, cols: usize, strides: (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * strides.0 + (cols - 1) * strides.1 + 1
    }
}

fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    a: usize,
    sa: (usize, usize),
    b: usize,
    sb: (usize, usize),
    c: usize,
    sc: (usize, usize),
) {
    assert!(span(m, k, sa) <= a, "gemm: lhs out of bounds");
    assert!(span(k, n, sb) <= b, "gemm: rhs out of bounds");
    assert!(span(m, n, sc) <= c, "gemm: output out of bounds");
}

macro_rules! impl_element {
    ($t:ty, $prec:expr, $code:expr, $gemm:path) => {
        impl Element for $t {
            const PRECISION: Precision = $prec;
            const DTYPE_CODE: u8 = $code;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                sa: (usize, usize),
                b: &[Self],
                sb: (usize, usize),
                beta: Self,
                c: &mut [Self],
                sc: (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_gemm_bounds(m, k, n, a.len(), sa, b.len(), sb, c.len(), sc);
                // SAFETY: every addressed element lies inside the slices, checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        sa.0 as isize,
                        sa.1 as isize,
                        b.as_ptr(),
                        sb.0 as isize,
                        sb.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        sc.0 as isize,
                        sc.1 as isize,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_element!(f32, Precision::Standard, 0, matrixmultiply::sgemm);
impl_element!(f64, Precision::Verification, 1, matrixmultiply::dgemm);
