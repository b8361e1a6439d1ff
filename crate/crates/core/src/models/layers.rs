//! Differentiable building blocks with hand-written reverse passes.
//!
//! Every layer follows the same contract: `forward` returns the output plus
//! whatever it needs to run `backward`, and `backward` accumulates parameter
//! gradients into a [`ParameterSet`] of the same layout and returns the
//! gradient with respect to its input. Sequences are stored as
//! `(batch * length) × channels` row-major matrices.

use super::params::{Builder, Init, ParamId, ParameterSet};
use super::tensor::{Mat, Scalar};

pub const INIT_STD: f64 = 0.02;

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `ln(1 + eˣ)`, evaluated without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_grad<T: Scalar>(x: T) -> T {
    sigmoid(x)
}

pub fn silu_mat<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    x.map(silu)
}

/// `dy ⊙ silu'(pre)`
pub fn silu_backward<T: Scalar>(pre: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
    let mut out = dy.clone();
    for (o, &p) in out.data.iter_mut().zip(&pre.data) {
        *o *= silu_grad(p);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = bld.param(&format!("{name}.w"), &[d_in, d_out], Init::TruncNormal(INIT_STD));
        let b = bld.param(&format!("{name}.b"), &[d_out], Init::Zeros);
        Linear { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, p: &ParameterSet<T>, x: &Mat<T>) -> Mat<T> {
        assert_eq!(x.cols, self.d_in, "linear input width");
        let mut y = x.matmul_slice(p.data(self.w), self.d_out);
        let bias = p.data(self.b);
        for r in 0..y.rows {
            for (v, &b) in y.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        y
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParameterSet<T>,
        x: &Mat<T>,
        dy: &Mat<T>,
        g: &mut ParameterSet<T>,
        need_dx: bool,
    ) -> Option<Mat<T>> {
        x.t_matmul_acc(dy, g.data_mut(self.w));
        let db = g.data_mut(self.b);
        for r in 0..dy.rows {
            for (acc, &v) in db.iter_mut().zip(dy.row(r)) {
                *acc += v;
            }
        }
        need_dx.then(|| dy.matmul_t_slice(p.data(self.w), self.d_in))
    }
}

/// Perceptron with SiLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    inputs: Vec<Mat<T>>,
    pre: Vec<Mat<T>>,
}

impl Mlp {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, name: &str, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(bld, &format!("{name}.l{i}"), w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("non-empty").d_out
    }

    pub fn forward<T: Scalar>(&self, p: &ParameterSet<T>, x: &Mat<T>) -> (Mat<T>, MlpCache<T>) {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n - 1);
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.forward(p, &h);
            inputs.push(h);
            if i + 1 < n {
                h = silu_mat(&z);
                pre.push(z);
            } else {
                h = z;
            }
        }
        (h, MlpCache { inputs, pre })
    }

    /// Forward pass without keeping intermediates.
    pub fn eval<T: Scalar>(&self, p: &ParameterSet<T>, x: &Mat<T>) -> Mat<T> {
        let n = self.layers.len();
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(p, &h);
            if i + 1 < n {
                h = silu_mat(&h);
            }
        }
        h
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParameterSet<T>,
        cache: &MlpCache<T>,
        dy: &Mat<T>,
        g: &mut ParameterSet<T>,
        need_dx: bool,
    ) -> Option<Mat<T>> {
        let n = self.layers.len();
        let mut d = dy.clone();
        for i in (0..n).rev() {
            if i + 1 < n {
                d = silu_backward(&cache.pre[i], &d);
            }
            let want = i > 0 || need_dx;
            d = self.layers[i].backward(p, &cache.inputs[i], &d, g, want)?;
        }
        Some(d)
    }
}

/// 1-D convolution along the sequence axis, kernel 3, zero padding 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

pub const KERNEL: usize = 3;

impl Conv1d {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, name: &str, c_in: usize, c_out: usize) -> Self {
        let w = bld.param(&format!("{name}.w"), &[KERNEL * c_in, c_out], Init::TruncNormal(INIT_STD));
        let b = bld.param(&format!("{name}.b"), &[c_out], Init::Zeros);
        Conv1d { w, b, c_in, c_out }
    }

    fn im2col<T: Scalar>(&self, x: &Mat<T>, len: usize) -> Mat<T> {
        let c = self.c_in;
        assert_eq!(x.cols, c, "conv input channels");
        assert_eq!(x.rows % len, 0, "conv rows not a multiple of length");
        let batch = x.rows / len;
        let mut col = Mat::zeros(x.rows, KERNEL * c);
        for b in 0..batch {
            for l in 0..len {
                let dst = col.row_mut(b * len + l);
                for k in 0..KERNEL {
                    let src = l as isize + k as isize - 1;
                    if src >= 0 && (src as usize) < len {
                        dst[k * c..(k + 1) * c].copy_from_slice(x.row(b * len + src as usize));
                    }
                }
            }
        }
        col
    }

    /// Returns the output and the im2col buffer needed by `backward`.
    pub fn forward<T: Scalar>(&self, p: &ParameterSet<T>, x: &Mat<T>, len: usize) -> (Mat<T>, Mat<T>) {
        let col = self.im2col(x, len);
        let mut y = col.matmul_slice(p.data(self.w), self.c_out);
        let bias = p.data(self.b);
        for r in 0..y.rows {
            for (v, &b) in y.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        (y, col)
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParameterSet<T>,
        col: &Mat<T>,
        dy: &Mat<T>,
        len: usize,
        g: &mut ParameterSet<T>,
        need_dx: bool,
    ) -> Option<Mat<T>> {
        col.t_matmul_acc(dy, g.data_mut(self.w));
        let db = g.data_mut(self.b);
        for r in 0..dy.rows {
            for (acc, &v) in db.iter_mut().zip(dy.row(r)) {
                *acc += v;
            }
        }
        if !need_dx {
            return None;
        }
        let c = self.c_in;
        let dcol = dy.matmul_t_slice(p.data(self.w), KERNEL * c);
        let batch = dy.rows / len;
        let mut dx = Mat::zeros(dy.rows, c);
        for b in 0..batch {
            for l in 0..len {
                let src = dcol.row(b * len + l);
                for k in 0..KERNEL {
                    let tgt = l as isize + k as isize - 1;
                    if tgt >= 0 && (tgt as usize) < len {
                        let row = dx.row_mut(b * len + tgt as usize);
                        for (a, &v) in row.iter_mut().zip(&src[k * c..(k + 1) * c]) {
                            *a += v;
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

/// Feature-wise affine modulation `(1 + γ) ⊙ h + β`, with γ and β read from
/// row `b` of a per-sample modulation matrix at column offset `off`
/// (γ occupies `[off, off + c)`, β `[off + c, off + 2c)`).
pub fn film_apply<T: Scalar>(h: &Mat<T>, film: &Mat<T>, off: usize, len: usize) -> Mat<T> {
    let c = h.cols;
    let mut y = h.clone();
    for r in 0..h.rows {
        let fr = film.row(r / len);
        let (gamma, beta) = (&fr[off..off + c], &fr[off + c..off + 2 * c]);
        for ((v, &g), &b) in y.row_mut(r).iter_mut().zip(gamma).zip(beta) {
            *v = (T::one() + g) * *v + b;
        }
    }
    y
}

/// Returns `dh` and accumulates into `dfilm`.
pub fn film_backward<T: Scalar>(
    h: &Mat<T>,
    film: &Mat<T>,
    off: usize,
    len: usize,
    dy: &Mat<T>,
    dfilm: &mut Mat<T>,
) -> Mat<T> {
    let c = h.cols;
    let mut dh = Mat::zeros(h.rows, c);
    for r in 0..h.rows {
        let b = r / len;
        let gamma = &film.row(b)[off..off + c];
        let dyr = dy.row(r);
        let hr = h.row(r);
        for (j, d) in dh.row_mut(r).iter_mut().enumerate() {
            *d = (T::one() + gamma[j]) * dyr[j];
        }
        let df = dfilm.row_mut(b);
        for j in 0..c {
            df[off + j] += dyr[j] * hr[j];
            df[off + c + j] += dyr[j];
        }
    }
    dh
}

pub fn avg_pool2<T: Scalar>(x: &Mat<T>, len: usize) -> Mat<T> {
    assert!(len.is_multiple_of(2), "pooling needs an even length");
    let half = T::from_f64c(0.5);
    let out_rows = x.rows / 2;
    let mut y = Mat::zeros(out_rows, x.cols);
    for r in 0..out_rows {
        let (a, b) = (x.row(2 * r), x.row(2 * r + 1));
        for ((v, &p), &q) in y.row_mut(r).iter_mut().zip(a).zip(b) {
            *v = half * (p + q);
        }
    }
    y
}

pub fn avg_pool2_backward<T: Scalar>(dy: &Mat<T>) -> Mat<T> {
    let half = T::from_f64c(0.5);
    let mut dx = Mat::zeros(dy.rows * 2, dy.cols);
    for r in 0..dy.rows {
        for j in 0..dy.cols {
            let v = half * dy.at(r, j);
            dx.row_mut(2 * r)[j] = v;
            dx.row_mut(2 * r + 1)[j] = v;
        }
    }
    dx
}

pub fn upsample2<T: Scalar>(x: &Mat<T>) -> Mat<T> {
    let mut y = Mat::zeros(x.rows * 2, x.cols);
    for r in 0..x.rows {
        y.row_mut(2 * r).copy_from_slice(x.row(r));
        y.row_mut(2 * r + 1).copy_from_slice(x.row(r));
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &Mat<T>) -> Mat<T> {
    let mut dx = Mat::zeros(dy.rows / 2, dy.cols);
    for r in 0..dx.rows {
        for j in 0..dy.cols {
            dx.row_mut(r)[j] = dy.at(2 * r, j) + dy.at(2 * r + 1, j);
        }
    }
    dx
}

/// Sinusoidal timestep embedding: `[sin(t·f_i), cos(t·f_i)]` with
/// `f_i = exp(-ln(10000) · i / (dim/2 - 1))`.
pub fn timestep_embedding<T: Scalar>(t: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let scale = (10000f64).ln() / (half.max(2) - 1) as f64;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let arg = t as f64 * (-(i as f64) * scale).exp();
        out[i] = T::from_f64c(arg.sin());
        out[half + i] = T::from_f64c(arg.cos());
    }
    out
}
