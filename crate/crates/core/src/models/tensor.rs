//! Row-major matrices and the float abstraction shared by f32 training and
//! f64 gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
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
    );

    fn from_f64c(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 conversion")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("to f64")
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: bounds are asserted by the callers in `Mat`; c is m×n row-major.
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
                n as isize,
                1,
            )
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        assert!(c.len() >= m * n);
        // SAFETY: as above.
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
                n as isize,
                1,
            )
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: {rows}x{cols}");
        Mat { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, rhs.rows, "matmul inner dims");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        if self.rows == 0 || rhs.cols == 0 || self.cols == 0 {
            return out;
        }
        T::gemm(
            self.rows,
            self.cols,
            rhs.cols,
            T::one(),
            &self.data,
            self.cols as isize,
            1,
            &rhs.data,
            rhs.cols as isize,
            1,
            T::zero(),
            &mut out.data,
        );
        out
    }

    /// `selfᵀ · rhs`, accumulated into `out` (which must be cols×rhs.cols).
    pub fn t_matmul_acc(&self, rhs: &Mat<T>, out: &mut [T]) {
        assert_eq!(self.rows, rhs.rows, "t_matmul inner dims");
        assert_eq!(out.len(), self.cols * rhs.cols);
        if self.rows == 0 || self.cols == 0 || rhs.cols == 0 {
            return;
        }
        T::gemm(
            self.cols,
            self.rows,
            rhs.cols,
            T::one(),
            &self.data,
            1,
            self.cols as isize,
            &rhs.data,
            rhs.cols as isize,
            1,
            T::one(),
            out,
        );
    }

    /// `self · wᵀ` where `w` is stored row-major as (n × k) in a flat slice.
    pub fn matmul_t_slice(&self, w: &[T], n: usize) -> Mat<T> {
        let k = self.cols;
        assert_eq!(w.len(), n * k);
        let mut out = Mat::zeros(self.rows, n);
        if self.rows == 0 || n == 0 || k == 0 {
            return out;
        }
        T::gemm(
            self.rows,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            w,
            1,
            k as isize,
            T::zero(),
            &mut out.data,
        );
        out
    }

    /// `self · w` where `w` is a flat (k × n) row-major slice.
    pub fn matmul_slice(&self, w: &[T], n: usize) -> Mat<T> {
        let k = self.cols;
        assert_eq!(w.len(), k * n);
        let mut out = Mat::zeros(self.rows, n);
        if self.rows == 0 || n == 0 || k == 0 {
            return out;
        }
        T::gemm(
            self.rows,
            k,
            n,
            T::one(),
            &self.data,
            k as isize,
            1,
            w,
            n as isize,
            1,
            T::zero(),
            &mut out.data,
        );
        out
    }

    /// Column-wise concatenation of equally tall matrices.
    pub fn hcat(parts: &[&Mat<T>]) -> Mat<T> {
        let rows = parts.first().map_or(0, |m| m.rows);
        let cols: usize = parts.iter().map(|m| m.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let dst = out.row_mut(r);
            let mut off = 0;
            for p in parts {
                assert_eq!(p.rows, rows, "hcat row mismatch");
                dst[off..off + p.cols].copy_from_slice(p.row(r));
                off += p.cols;
            }
        }
        out
    }

    /// Inverse of [`Mat::hcat`].
    pub fn hsplit(&self, widths: &[usize]) -> Vec<Mat<T>> {
        assert_eq!(widths.iter().sum::<usize>(), self.cols, "hsplit widths");
        let mut outs: Vec<Mat<T>> = widths.iter().map(|&w| Mat::zeros(self.rows, w)).collect();
        for r in 0..self.rows {
            let src = self.row(r);
            let mut off = 0;
            for (o, &w) in outs.iter_mut().zip(widths) {
                o.row_mut(r).copy_from_slice(&src[off..off + w]);
                off += w;
            }
        }
        outs
    }

    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from_f64c(v.to_f64c())).collect(),
        }
    }
}
