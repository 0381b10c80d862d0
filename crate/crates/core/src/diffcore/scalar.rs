//! Element types the engine runs on: f32 for training, f64 for verification.

use num_traits::Float;

/// Floating-point element of tensors. The precision mode of a tape is fixed
/// by this type parameter at tape creation.
pub trait Scalar:
    Float + Default + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// exp() as used inside softmax/sigmoid kernels. The f32 version is a
    /// branch-free polynomial (Cephes-style, ~1 ulp on the clamped range)
    /// that autovectorizes; f64 keeps libm precision for verification runs.
    fn fexp(self) -> Self;

    #[inline]
    fn fsigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).fexp())
    }

    /// C = alpha * A(m x k) * B(k x n) + beta * C, row-major strides.
    ///
    /// # Safety
    /// Pointers must reference buffers of at least the implied extents.
    unsafe fn gemm(
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
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn fexp(self) -> Self {
        // 2^n * e^r with r = x - n ln2, |r| <= ln2/2; degree-6 minimax poly.
        let x = self.clamp(-87.0, 88.0);
        let n = (x * std::f32::consts::LOG2_E + 0.5).floor();
        let r = x - n * 0.693_359_4 - n * -2.121_944_4e-4;
        let mut p = 1.987_569_2e-4f32;
        p = p * r + 1.398_200_0e-3;
        p = p * r + 8.333_452_0e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 1.666_666_6e-1;
        p = p * r + 5.000_000_1e-1;
        let y = p * r * r + r + 1.0;
        let scale = f32::from_bits((((n as i32) + 127) << 23) as u32);
        y * scale
    }

    unsafe fn gemm(
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn fexp(self) -> Self {
        self.exp()
    }

    unsafe fn gemm(
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}
