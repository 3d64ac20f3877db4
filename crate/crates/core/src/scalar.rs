//! Floating-point element types usable by the network.
//!
//! Every numeric kernel in this crate is written against [`Scalar`], so the
//! same model can be run in `f32` for speed or in `f64` for gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use safetensors::Dtype;

/// Element type of tensors and parameters.
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
    /// Name used in model files (`"f32"` / `"f64"`).
    const NAME: &'static str;
    /// Storage dtype in named-tensor archives.
    const DTYPE: Dtype;

    /// Gauss error function.
    fn erf(self) -> Self;

    /// `C = alpha * A * B + beta * C` on strided row/column views.
    ///
    /// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`. Strides are in elements.
    /// When `beta == 0` the previous contents of `C` are ignored (NaNs included).
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

    /// Little-endian bytes of a slice.
    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;

    /// Read from little-endian bytes stored with `dtype`; `None` on unsupported dtype.
    fn from_le_bytes_slice(bytes: &[u8], dtype: Dtype) -> Option<Vec<Self>>;

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

#[inline]
fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $dtype:expr, $erf:path, $gemm:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;
            const DTYPE: Dtype = $dtype;

            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }

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
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: A too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: B too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: C too short");
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(
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

            fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
                values.iter().flat_map(|v| v.to_le_bytes()).collect()
            }

            fn from_le_bytes_slice(bytes: &[u8], dtype: Dtype) -> Option<Vec<Self>> {
                match dtype {
                    Dtype::F32 => Some(
                        bytes
                            .chunks_exact(4)
                            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as $t)
                            .collect(),
                    ),
                    Dtype::F64 => Some(
                        bytes
                            .chunks_exact(8)
                            .map(|c| {
                                let mut raw = [0u8; 8];
                                raw.copy_from_slice(c);
                                f64::from_le_bytes(raw) as $t
                            })
                            .collect(),
                    ),
                    _ => None,
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", Dtype::F32, libm::erff, matrixmultiply::sgemm);
impl_scalar!(f64, "f64", Dtype::F64, libm::erf, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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
    fn gemm_matches_naive_with_transposed_view() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let expected = naive(m, k, n, &a, &b);
        // B supplied transposed: bt is n x k, read as k x n with rs=1, cs=k.
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![f64::NAN; m * n];
        f64::gemm(m, k, n, 1.0, &a, k, 1, &bt, 1, k, 0.0, &mut c, n, 1);
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn erf_reference_points() {
        assert!((Scalar::erf(1.0f64) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((Scalar::erf(0.5f32) - 0.520_499_9).abs() < 1e-6);
    }

    #[test]
    fn bytes_roundtrip_across_dtypes() {
        let v = [1.5f32, -2.25, 3.0e-8];
        let bytes = f32::to_le_bytes_vec(&v);
        let back = f64::from_le_bytes_slice(&bytes, Dtype::F32).unwrap();
        assert_eq!(back, vec![1.5f64, -2.25, 3.0e-8f32 as f64]);
        assert!(f32::from_le_bytes_slice(&bytes, Dtype::I64).is_none());
    }
}
