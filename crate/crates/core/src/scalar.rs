use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type tag, matching the dtype code of the bundle format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating point element of a [`Tensor`](crate::Tensor).
///
/// Every kernel is written once against this trait; `f32` is the working
/// precision and `f64` is used for gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    const DTYPE: DType;

    fn push_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Raw bit pattern, for bit-exact comparisons.
    fn to_bits_u64(self) -> u64;
    /// `c (m×n) += a (m×k) · b (k×n)` over strided operands.
    fn gemm_acc(m: usize, k: usize, n: usize, a: (&[Self], isize, isize), b: (&[Self], isize, isize), c: &mut [Self]);
}

/// Checks that every strided operand stays inside its slice.
fn check_gemm<T>(m: usize, k: usize, n: usize, a: (&[T], isize, isize), b: (&[T], isize, isize), c: &[T]) {
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs) as usize
    };
    assert!(m * k == 0 || last(m, k, a.1, a.2) < a.0.len(), "gemm: lhs out of bounds");
    assert!(k * n == 0 || last(k, n, b.1, b.2) < b.0.len(), "gemm: rhs out of bounds");
    assert!(c.len() >= m * n, "gemm: output out of bounds");
}

impl Scalar for f32 {
    fn gemm_acc(m: usize, k: usize, n: usize, a: (&[Self], isize, isize), b: (&[Self], isize, isize), c: &mut [Self]) {
        check_gemm(m, k, n, a, b, c);
        // SAFETY: `check_gemm` keeps every strided access inside its slice.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, 1.0, c.as_mut_ptr(), n as isize, 1)
        }
    }

    const DTYPE: DType = DType::F32;

    fn push_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    fn gemm_acc(m: usize, k: usize, n: usize, a: (&[Self], isize, isize), b: (&[Self], isize, isize), c: &mut [Self]) {
        check_gemm(m, k, n, a, b, c);
        // SAFETY: `check_gemm` keeps every strided access inside its slice.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.0.as_ptr(), a.1, a.2, b.0.as_ptr(), b.1, b.2, 1.0, c.as_mut_ptr(), n as isize, 1)
        }
    }

    const DTYPE: DType = DType::F64;

    fn push_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn sc<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}
