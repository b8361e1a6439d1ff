//! Compact 1-D temporal U-Net used as the noise predictor.
//!
//! One downsample level with a residual bottleneck and a skip connection,
//! conditioned through FiLM on `[timestep embedding ‖ conditioning]`:
//!
//! ```text
//! x ─conv─FiLM─silu─► h1 ─pool─conv─FiLM─silu─► h2 ─conv─silu─(+h2)─► h3
//!                      │                                               │
//!                      └──────────── concat ◄──────── upsample ◄───────┘
//!                                       │
//!                                 conv─FiLM─silu─► h4 ─linear─► ε̂
//! ```

use super::layers::{
    avg_pool2, avg_pool2_backward, film_apply, film_backward, silu_backward, silu_mat,
    upsample2, upsample2_backward, Conv1d, Linear,
};
use super::params::{Builder, ParameterSet};
use super::tensor::{Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnetDims {
    pub horizon: usize,
    pub in_ch: usize,
    pub c1: usize,
    pub c2: usize,
    pub temb: usize,
    pub cond: usize,
}

impl UnetDims {
    pub fn film_width(&self) -> usize {
        4 * self.c1 + 2 * self.c2
    }

    fn off_b(&self) -> usize {
        2 * self.c1
    }

    fn off_d(&self) -> usize {
        2 * self.c1 + 2 * self.c2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalUnet {
    pub dims: UnetDims,
    film: Linear,
    conv_a: Conv1d,
    conv_b: Conv1d,
    conv_c: Conv1d,
    conv_d: Conv1d,
    out: Linear,
}

pub struct UnetCache<T> {
    film_in: Mat<T>,
    film_act: Mat<T>,
    film: Mat<T>,
    col_a: Mat<T>,
    za: Mat<T>,
    fa: Mat<T>,
    col_b: Mat<T>,
    zb: Mat<T>,
    fb: Mat<T>,
    col_c: Mat<T>,
    zc: Mat<T>,
    col_d: Mat<T>,
    zd: Mat<T>,
    fd: Mat<T>,
    h4: Mat<T>,
}

impl TemporalUnet {
    pub fn new<T: Scalar>(bld: &mut Builder<'_, T>, name: &str, dims: UnetDims) -> Self {
        assert!(dims.horizon.is_multiple_of(2), "horizon must be even");
        TemporalUnet {
            dims,
            film: Linear::new(bld, &format!("{name}.film"), dims.temb + dims.cond, dims.film_width()),
            conv_a: Conv1d::new(bld, &format!("{name}.conv_a"), dims.in_ch, dims.c1),
            conv_b: Conv1d::new(bld, &format!("{name}.conv_b"), dims.c1, dims.c2),
            conv_c: Conv1d::new(bld, &format!("{name}.conv_c"), dims.c2, dims.c2),
            conv_d: Conv1d::new(bld, &format!("{name}.conv_d"), dims.c2 + dims.c1, dims.c1),
            out: Linear::new(bld, &format!("{name}.out"), dims.c1, dims.in_ch),
        }
    }

    /// FiLM modulation rows computed from `[temb ‖ cond]`.
    pub fn film_params<T: Scalar>(&self, p: &ParameterSet<T>, temb: &Mat<T>, cond: &Mat<T>) -> Mat<T> {
        let film_in = Mat::hcat(&[temb, cond]);
        self.film.forward(p, &silu_mat(&film_in))
    }

    /// Timestep-only part of the FiLM projection, `silu(temb) · W[..temb]`.
    /// Added to [`TemporalUnet::film_cond_part`] it equals `film_params`.
    pub fn film_time_part<T: Scalar>(&self, p: &ParameterSet<T>, temb: &Mat<T>) -> Mat<T> {
        let f = self.dims.film_width();
        let w = &p.data(self.film.w)[..self.dims.temb * f];
        silu_mat(temb).matmul_slice(w, f)
    }

    /// Conditioning part of the FiLM projection including the bias.
    pub fn film_cond_part<T: Scalar>(&self, p: &ParameterSet<T>, cond: &Mat<T>) -> Mat<T> {
        let f = self.dims.film_width();
        let w = &p.data(self.film.w)[self.dims.temb * f..];
        let mut y = if self.dims.cond == 0 {
            Mat::zeros(cond.rows, f)
        } else {
            silu_mat(cond).matmul_slice(w, f)
        };
        let b = p.data(self.film.b);
        for r in 0..y.rows {
            for (v, &bb) in y.row_mut(r).iter_mut().zip(b) {
                *v += bb;
            }
        }
        y
    }

    /// Runs the body given precomputed FiLM rows (one per sample).
    pub fn forward_with_film<T: Scalar>(&self, p: &ParameterSet<T>, x: &Mat<T>, film: &Mat<T>) -> Mat<T> {
        self.body(p, x, film).0
    }

    /// Full forward pass. `x` is `(B·P) × in_ch`, `temb` is `B × temb`,
    /// `cond` is `B × cond`.
    pub fn forward<T: Scalar>(
        &self,
        p: &ParameterSet<T>,
        x: &Mat<T>,
        temb: &Mat<T>,
        cond: &Mat<T>,
    ) -> (Mat<T>, UnetCache<T>) {
        assert_eq!(cond.cols, self.dims.cond, "conditioning width");
        assert_eq!(temb.cols, self.dims.temb, "timestep embedding width");
        let film_in = Mat::hcat(&[temb, cond]);
        let film_act = silu_mat(&film_in);
        let film = self.film.forward(p, &film_act);
        let (out, mut cache) = self.body(p, x, &film);
        cache.film_in = film_in;
        cache.film_act = film_act;
        cache.film = film;
        (out, cache)
    }

    fn body<T: Scalar>(&self, p: &ParameterSet<T>, x: &Mat<T>, film: &Mat<T>) -> (Mat<T>, UnetCache<T>) {
        let d = self.dims;
        let len = d.horizon;
        let half = len / 2;
        assert_eq!(x.cols, d.in_ch, "trajectory width");
        assert_eq!(x.rows, film.rows * len, "trajectory rows vs batch");

        let (za, col_a) = self.conv_a.forward(p, x, len);
        let fa = film_apply(&za, film, 0, len);
        let h1 = silu_mat(&fa);
        let pooled = avg_pool2(&h1, len);
        let (zb, col_b) = self.conv_b.forward(p, &pooled, half);
        let fb = film_apply(&zb, film, d.off_b(), half);
        let h2 = silu_mat(&fb);
        let (zc, col_c) = self.conv_c.forward(p, &h2, half);
        let mut h3 = silu_mat(&zc);
        h3.add_assign(&h2);
        let up = upsample2(&h3);
        let cat = Mat::hcat(&[&up, &h1]);
        let (zd, col_d) = self.conv_d.forward(p, &cat, len);
        let fd = film_apply(&zd, film, d.off_d(), len);
        let h4 = silu_mat(&fd);
        let out = self.out.forward(p, &h4);
        let empty = Mat::zeros(0, 0);
        (
            out,
            UnetCache {
                film_in: empty.clone(),
                film_act: empty.clone(),
                film: empty,
                col_a,
                za,
                fa,
                col_b,
                zb,
                fb,
                col_c,
                zc,
                col_d,
                zd,
                fd,
                h4,
            },
        )
    }

    /// Accumulates parameter gradients and returns d(loss)/d(cond).
    pub fn backward<T: Scalar>(
        &self,
        p: &ParameterSet<T>,
        c: &UnetCache<T>,
        dout: &Mat<T>,
        g: &mut ParameterSet<T>,
    ) -> Mat<T> {
        let d = self.dims;
        let len = d.horizon;
        let half = len / 2;
        let mut dfilm = Mat::zeros(c.film.rows, c.film.cols);

        let dh4 = self.out.backward(p, &c.h4, dout, g, true).expect("dx");
        let dfd = silu_backward(&c.fd, &dh4);
        let dzd = film_backward(&c.zd, &c.film, d.off_d(), len, &dfd, &mut dfilm);
        let dcat = self.conv_d.backward(p, &c.col_d, &dzd, len, g, true).expect("dx");
        let parts = dcat.hsplit(&[d.c2, d.c1]);
        let dh3 = upsample2_backward(&parts[0]);
        let dzc = silu_backward(&c.zc, &dh3);
        let mut dh2 = dh3;
        dh2.add_assign(&self.conv_c.backward(p, &c.col_c, &dzc, half, g, true).expect("dx"));
        let dfb = silu_backward(&c.fb, &dh2);
        let dzb = film_backward(&c.zb, &c.film, d.off_b(), half, &dfb, &mut dfilm);
        let dpooled = self.conv_b.backward(p, &c.col_b, &dzb, half, g, true).expect("dx");
        let mut dh1 = parts[1].clone();
        dh1.add_assign(&avg_pool2_backward(&dpooled));
        let dfa = silu_backward(&c.fa, &dh1);
        let dza = film_backward(&c.za, &c.film, 0, len, &dfa, &mut dfilm);
        self.conv_a.backward(p, &c.col_a, &dza, len, g, false);

        let dact = self.film.backward(p, &c.film_act, &dfilm, g, true).expect("dx");
        let dfilm_in = silu_backward(&c.film_in, &dact);
        dfilm_in.hsplit(&[d.temb, d.cond]).pop().expect("cond part")
    }
}
