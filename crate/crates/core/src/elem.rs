//! Scalar abstraction for the whole math stack.
//!
//! Everything numeric is generic over [`Elem`], implemented for `f32` and
//! `f64`. Training runs in `f32`; gradient verification builds the same
//! graphs in `f64`, where central differences have enough headroom to
//! resolve 1e-4 relative error.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Elem:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` constant (hyperparameter, literal) into this scalar.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("finite literal")
    }

    /// Widens to `f64` for metric aggregation and reporting.
    fn as_f64(self) -> f64;

    /// `c ← alpha·a·b + beta·c` for row-major buffers with explicit strides.
    ///
    /// `a` is `m×k` with strides `(rsa, csa)`, `b` is `k×n` with `(rsb, csb)`,
    /// `c` is `m×n` with `(rsc, csc)`. Strides express transposed views, so
    /// one entry point covers `A·B`, `Aᵀ·B`, and `A·Bᵀ`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn check_gemm_bounds(m: usize, k: usize, n: usize, alen: usize, blen: usize, clen: usize) {
    debug_assert!(m > 0 && k > 0 && n > 0, "gemm with empty extent");
    debug_assert!(alen >= m * k, "gemm lhs buffer too short: {alen} < {m}x{k}");
    debug_assert!(blen >= k * n, "gemm rhs buffer too short: {blen} < {k}x{n}");
    debug_assert!(clen >= m * n, "gemm out buffer too short: {clen} < {m}x{n}");
}

impl Elem for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds(m, k, n, a.len(), b.len(), c.len());
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Elem for f64 {
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds(m, k, n, a.len(), b.len(), c.len());
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}
