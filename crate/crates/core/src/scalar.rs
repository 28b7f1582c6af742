//! Floating-point element types the numeric substrate is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Storage precision tag written into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            4 => Some(DType::F32),
            8 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        self.code() as usize
    }
}

/// A real scalar usable as tensor element: `f32` or `f64`.
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
    const DTYPE: DType;

    /// `c = alpha * a·b + beta * c` over strided row/column views.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    /// Replaces every element by its exponential.
    fn exp_in_place(xs: &mut [Self]);

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every float type")
    }

    fn lit(v: f64) -> Self {
        Self::from_f64_lossy(v)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm: {what} view exceeds buffer ({last} >= {len})");
}

/// Polynomial single-precision exponential (relative error about 2e-7)
/// written branch-free so the loop vectorizes. Inputs below −87 saturate
/// to `exp(−87)`.
fn exp_f32(xs: &mut [f32]) {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    // Adding 1.5·2^23 rounds to the nearest integer, which then sits in the
    // low mantissa bits.
    const SHIFT: f32 = 12_582_912.0;
    for v in xs.iter_mut() {
        let x = v.clamp(-87.0, 88.0);
        let t = x * LOG2E + SHIFT;
        let fi = (t.to_bits() as i32).wrapping_sub(SHIFT.to_bits() as i32);
        let f = t - SHIFT;
        let r = x - f * 0.693_359_4 + f * 2.121_944_4e-4;
        let z = r * r;
        let p = ((((1.987_569_1e-4 * r + 1.398_199_9e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r
            + 1.666_666_5e-1)
            * r
            + 5.000_000_1e-1;
        let y = p * z + r + 1.0;
        *v = y * f32::from_bits((fi.wrapping_add(127) as u32) << 23);
    }
}

fn exp_f64(xs: &mut [f64]) {
    for v in xs.iter_mut() {
        *v = v.exp();
    }
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $kernel:path, $exp:path, $bytes:expr) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, rsa, csa, "lhs");
                check_extent(b.len(), k, n, rsb, csb, "rhs");
                check_extent(c.len(), m, n, rsc, csc, "out");
                // SAFETY: every view was bounds-checked against its buffer above,
                // and `c` is uniquely borrowed so it cannot alias `a` or `b`.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    );
                }
            }

            fn exp_in_place(xs: &mut [Self]) {
                $exp(xs)
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm, exp_f32, 4);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm, exp_f64, 8);
