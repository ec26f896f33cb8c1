//! Layer kernels with explicit backward passes. Parameters live in a flat
//! slice addressed by [`Pid`]; backward functions accumulate into a gradient
//! slice with the same layout.

use super::{normal_init, Act, ParamStore, Pid, Real};
use crate::rng::Rng;

/// Row-major `(rows, cols)` matrix, used for per-sample feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }
}

// ---- convolution -----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: Pid,
    pub b: Pid,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

fn im2col<T: Real>(x: &Act<T>, k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let (h, w) = (x.h as isize, x.w as isize);
    let n = x.plane();
    let mut cols = vec![T::ZERO; x.c * k * k * n];
    for ci in 0..x.c {
        let src = &x.data[ci * n..(ci + 1) * n];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for b in 0..x.b {
                    let base = b * x.hw();
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let x0 = (-dx).max(0);
                        let x1 = (w - dx).min(w);
                        if x0 >= x1 {
                            continue;
                        }
                        let o = base + (y * w) as usize;
                        let s = base + (sy * w) as usize;
                        dst[o + x0 as usize..o + x1 as usize]
                            .copy_from_slice(&src[s + (x0 + dx) as usize..s + (x1 + dx) as usize]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], shape: &Act<T>, k: usize) -> Act<T> {
    let mut out = Act::zeros_like(shape);
    let pad = (k / 2) as isize;
    let (h, w) = (shape.h as isize, shape.w as isize);
    let n = shape.plane();
    let hw = shape.hw();
    for ci in 0..shape.c {
        let dst = &mut out.data[ci * n..(ci + 1) * n];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for b in 0..shape.b {
                    let base = b * hw;
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let x0 = (-dx).max(0);
                        let x1 = (w - dx).min(w);
                        if x0 >= x1 {
                            continue;
                        }
                        let o = base + (y * w) as usize;
                        let s = base + (sy * w) as usize;
                        let d = &mut dst[s + (x0 + dx) as usize..s + (x1 + dx) as usize];
                        for (a, b) in d.iter_mut().zip(&src[o + x0 as usize..o + x1 as usize]) {
                            *a += *b;
                        }
                    }
                }
            }
        }
    }
    out
}

impl Conv {
    /// He-normal weights; `zero` gives an all-zero layer (used for outputs
    /// of residual branches and the final projection).
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut Rng,
        zero: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let w = if zero {
            ps.add(format!("{name}.w"), &[cout, cin, k, k], std::iter::repeat(T::ZERO))
        } else {
            let std = (2.0 / fan_in as f64).sqrt();
            ps.add(format!("{name}.w"), &[cout, cin, k, k], normal_init(rng, std, cout * fan_in))
        };
        let b = ps.add(format!("{name}.b"), &[cout], std::iter::repeat(T::ZERO));
        Conv { w, b, cin, cout, k }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Act<T>) -> Act<T> {
        debug_assert_eq!(x.c, self.cin);
        let n = x.plane();
        let kk = self.cin * self.k * self.k;
        let mut y = Act::zeros(self.cout, x.b, x.h, x.w);
        for (co, bias) in self.b.of(p).iter().enumerate() {
            y.data[co * n..(co + 1) * n].fill(*bias);
        }
        let cols_owned;
        let cols: &[T] = if self.k == 1 {
            &x.data
        } else {
            cols_owned = im2col(x, self.k);
            &cols_owned
        };
        T::gemm(
            self.cout,
            kk,
            n,
            T::ONE,
            self.w.of(p),
            kk as isize,
            1,
            cols,
            n as isize,
            1,
            T::ONE,
            &mut y.data,
            n as isize,
            1,
        );
        y
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], x: &Act<T>, dy: &Act<T>) -> Act<T> {
        let n = x.plane();
        let kk = self.cin * self.k * self.k;
        let cols_owned;
        let cols: &[T] = if self.k == 1 {
            &x.data
        } else {
            cols_owned = im2col(x, self.k);
            &cols_owned
        };
        T::gemm(
            self.cout,
            n,
            kk,
            T::ONE,
            &dy.data,
            n as isize,
            1,
            cols,
            1,
            n as isize,
            T::ONE,
            self.w.of_mut(g),
            kk as isize,
            1,
        );
        for (co, gb) in self.b.of_mut(g).iter_mut().enumerate() {
            let mut s = T::ZERO;
            for v in &dy.data[co * n..(co + 1) * n] {
                s += *v;
            }
            *gb += s;
        }
        let mut dcols = vec![T::ZERO; kk * n];
        T::gemm(
            kk,
            self.cout,
            n,
            T::ONE,
            self.w.of(p),
            1,
            kk as isize,
            &dy.data,
            n as isize,
            1,
            T::ZERO,
            &mut dcols,
            n as isize,
            1,
        );
        if self.k == 1 {
            Act {
                c: x.c,
                b: x.b,
                h: x.h,
                w: x.w,
                data: dcols,
            }
        } else {
            col2im(&dcols, x, self.k)
        }
    }
}

// ---- group normalisation ---------------------------------------------------

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: Pid,
    pub beta: Pid,
    pub groups: usize,
    pub c: usize,
}

pub struct GroupNormCache<T> {
    xhat: Act<T>,
    /// `1/std` per `(group, sample)`.
    rstd: Vec<T>,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, c: usize, groups: usize) -> Self {
        let groups = groups.min(c).max(1);
        assert_eq!(c % groups, 0, "channels {c} not divisible into {groups} groups");
        let gamma = ps.add(format!("{name}.gamma"), &[c], std::iter::repeat(T::ONE));
        let beta = ps.add(format!("{name}.beta"), &[c], std::iter::repeat(T::ZERO));
        GroupNorm { gamma, beta, groups, c }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Act<T>) -> (Act<T>, GroupNormCache<T>) {
        let cpg = self.c / self.groups;
        let hw = x.hw();
        let n = x.plane();
        let m = (cpg * hw) as f64;
        let gamma = self.gamma.of(p);
        let beta = self.beta.of(p);
        let mut xhat = Act::zeros_like(x);
        let mut y = Act::zeros_like(x);
        let mut rstd = vec![T::ZERO; self.groups * x.b];
        for g in 0..self.groups {
            for b in 0..x.b {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for c in g * cpg..(g + 1) * cpg {
                    for v in &x.data[c * n + b * hw..c * n + (b + 1) * hw] {
                        let v = v.to_f64();
                        sum += v;
                        sq += v * v;
                    }
                }
                let mean = sum / m;
                let var = (sq / m - mean * mean).max(0.0);
                let r = 1.0 / (var + GN_EPS).sqrt();
                rstd[g * x.b + b] = T::from_f64(r);
                let (mean_t, r_t) = (T::from_f64(mean), T::from_f64(r));
                for c in g * cpg..(g + 1) * cpg {
                    for i in c * n + b * hw..c * n + (b + 1) * hw {
                        let xh = (x.data[i] - mean_t) * r_t;
                        xhat.data[i] = xh;
                        y.data[i] = gamma[c] * xh + beta[c];
                    }
                }
            }
        }
        (y, GroupNormCache { xhat, rstd })
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], cache: &GroupNormCache<T>, dy: &Act<T>) -> Act<T> {
        let xhat = &cache.xhat;
        let cpg = self.c / self.groups;
        let hw = xhat.hw();
        let n = xhat.plane();
        let m = T::from_f64((cpg * hw) as f64);
        let gamma = self.gamma.of(p);
        for c in 0..self.c {
            let mut sg = T::ZERO;
            let mut sb = T::ZERO;
            for i in c * n..(c + 1) * n {
                sg += dy.data[i] * xhat.data[i];
                sb += dy.data[i];
            }
            g[self.gamma.offset + c] += sg;
            g[self.beta.offset + c] += sb;
        }
        let mut dx = Act::zeros_like(dy);
        for gi in 0..self.groups {
            for b in 0..xhat.b {
                let r = cache.rstd[gi * xhat.b + b];
                let mut s1 = T::ZERO;
                let mut s2 = T::ZERO;
                for c in gi * cpg..(gi + 1) * cpg {
                    for i in c * n + b * hw..c * n + (b + 1) * hw {
                        let dxh = dy.data[i] * gamma[c];
                        s1 += dxh;
                        s2 += dxh * xhat.data[i];
                    }
                }
                for c in gi * cpg..(gi + 1) * cpg {
                    for i in c * n + b * hw..c * n + (b + 1) * hw {
                        let dxh = dy.data[i] * gamma[c];
                        dx.data[i] = r / m * (m * dxh - s1 - xhat.data[i] * s2);
                    }
                }
            }
        }
        dx
    }
}

// ---- pointwise -------------------------------------------------------------

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient of SiLU given its input.
pub fn silu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (T::ONE + v * (T::ONE - s))
        })
        .collect()
}

pub fn silu_act<T: Real>(x: &Act<T>) -> Act<T> {
    Act {
        c: x.c,
        b: x.b,
        h: x.h,
        w: x.w,
        data: silu(&x.data),
    }
}

pub fn silu_act_backward<T: Real>(x: &Act<T>, dy: &Act<T>) -> Act<T> {
    Act {
        c: x.c,
        b: x.b,
        h: x.h,
        w: x.w,
        data: silu_backward(&x.data, &dy.data),
    }
}

// ---- dense -----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Pid,
    pub b: Pid,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, fin: usize, fout: usize, rng: &mut Rng, zero: bool) -> Self {
        let w = if zero {
            ps.add(format!("{name}.w"), &[fout, fin], std::iter::repeat(T::ZERO))
        } else {
            let std = (1.0 / fin as f64).sqrt();
            ps.add(format!("{name}.w"), &[fout, fin], normal_init(rng, std, fout * fin))
        };
        let b = ps.add(format!("{name}.b"), &[fout], std::iter::repeat(T::ZERO));
        Linear { w, b, fin, fout }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Mat<T>) -> Mat<T> {
        debug_assert_eq!(x.cols, self.fin);
        let mut y = Mat::zeros(x.rows, self.fout);
        for r in 0..x.rows {
            y.data[r * self.fout..(r + 1) * self.fout].copy_from_slice(self.b.of(p));
        }
        T::gemm(
            x.rows,
            self.fin,
            self.fout,
            T::ONE,
            &x.data,
            self.fin as isize,
            1,
            self.w.of(p),
            1,
            self.fin as isize,
            T::ONE,
            &mut y.data,
            self.fout as isize,
            1,
        );
        y
    }

    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], x: &Mat<T>, dy: &Mat<T>) -> Mat<T> {
        T::gemm(
            self.fout,
            x.rows,
            self.fin,
            T::ONE,
            &dy.data,
            1,
            self.fout as isize,
            &x.data,
            self.fin as isize,
            1,
            T::ONE,
            self.w.of_mut(g),
            self.fin as isize,
            1,
        );
        let gb = self.b.of_mut(g);
        for r in 0..dy.rows {
            for (o, v) in gb.iter_mut().zip(&dy.data[r * self.fout..(r + 1) * self.fout]) {
                *o += *v;
            }
        }
        let mut dx = Mat::zeros(x.rows, self.fin);
        T::gemm(
            x.rows,
            self.fout,
            self.fin,
            T::ONE,
            &dy.data,
            self.fout as isize,
            1,
            self.w.of(p),
            self.fin as isize,
            1,
            T::ZERO,
            &mut dx.data,
            self.fin as isize,
            1,
        );
        dx
    }
}

// ---- resampling ------------------------------------------------------------

pub fn avg_pool2<T: Real>(x: &Act<T>) -> Act<T> {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut y = Act::zeros(x.c, x.b, h2, w2);
    let quarter = T::from_f64(0.25);
    for cb in 0..x.c * x.b {
        let src = &x.data[cb * x.hw()..(cb + 1) * x.hw()];
        let dst = &mut y.data[cb * h2 * w2..(cb + 1) * h2 * w2];
        for r in 0..h2 {
            for c in 0..w2 {
                let i = 2 * r * x.w + 2 * c;
                dst[r * w2 + c] = (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]) * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(dy: &Act<T>) -> Act<T> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Act::zeros(dy.c, dy.b, h, w);
    let quarter = T::from_f64(0.25);
    for cb in 0..dy.c * dy.b {
        let src = &dy.data[cb * dy.hw()..(cb + 1) * dy.hw()];
        let dst = &mut dx.data[cb * h * w..(cb + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                dst[r * w + c] = src[(r / 2) * dy.w + c / 2] * quarter;
            }
        }
    }
    dx
}

pub fn upsample2<T: Real>(x: &Act<T>) -> Act<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut y = Act::zeros(x.c, x.b, h, w);
    for cb in 0..x.c * x.b {
        let src = &x.data[cb * x.hw()..(cb + 1) * x.hw()];
        let dst = &mut y.data[cb * h * w..(cb + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                dst[r * w + c] = src[(r / 2) * x.w + c / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Act<T>) -> Act<T> {
    let (h2, w2) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.c, dy.b, h2, w2);
    for cb in 0..dy.c * dy.b {
        let src = &dy.data[cb * dy.hw()..(cb + 1) * dy.hw()];
        let dst = &mut dx.data[cb * h2 * w2..(cb + 1) * h2 * w2];
        for r in 0..h2 {
            for c in 0..w2 {
                let i = 2 * r * dy.w + 2 * c;
                dst[r * w2 + c] = src[i] + src[i + 1] + src[i + dy.w] + src[i + dy.w + 1];
            }
        }
    }
    dx
}

/// Channel concatenation; with the channel-major layout this is an append.
pub fn concat<T: Real>(a: &Act<T>, b: &Act<T>) -> Act<T> {
    debug_assert_eq!((a.b, a.h, a.w), (b.b, b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Act {
        c: a.c + b.c,
        b: a.b,
        h: a.h,
        w: a.w,
        data,
    }
}

pub fn split<T: Real>(x: &Act<T>, c_first: usize) -> (Act<T>, Act<T>) {
    let cut = c_first * x.plane();
    (
        Act {
            c: c_first,
            b: x.b,
            h: x.h,
            w: x.w,
            data: x.data[..cut].to_vec(),
        },
        Act {
            c: x.c - c_first,
            b: x.b,
            h: x.h,
            w: x.w,
            data: x.data[cut..].to_vec(),
        },
    )
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding<T: Real>(ts: &[f64], dim: usize) -> Mat<T> {
    let half = dim / 2;
    let mut m = Mat::zeros(ts.len(), dim);
    for (r, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            m.data[r * dim + i] = T::from_f64((t * freq).sin());
            m.data[r * dim + half + i] = T::from_f64((t * freq).cos());
        }
    }
    m
}

/// Per-channel, per-sample affine modulation `h * (1 + scale) + shift`
/// where `ss` is `(B, 2C)` holding scales then shifts.
pub fn modulate<T: Real>(h: &Act<T>, ss: &Mat<T>) -> Act<T> {
    let mut y = Act::zeros_like(h);
    let (hw, n) = (h.hw(), h.plane());
    for c in 0..h.c {
        for b in 0..h.b {
            let scale = T::ONE + ss.data[b * 2 * h.c + c];
            let shift = ss.data[b * 2 * h.c + h.c + c];
            for i in c * n + b * hw..c * n + (b + 1) * hw {
                y.data[i] = h.data[i] * scale + shift;
            }
        }
    }
    y
}

/// Returns `(dh, dss)`.
pub fn modulate_backward<T: Real>(h: &Act<T>, ss: &Mat<T>, dy: &Act<T>) -> (Act<T>, Mat<T>) {
    let mut dh = Act::zeros_like(h);
    let mut dss = Mat::zeros(ss.rows, ss.cols);
    let (hw, n) = (h.hw(), h.plane());
    for c in 0..h.c {
        for b in 0..h.b {
            let scale = T::ONE + ss.data[b * 2 * h.c + c];
            let mut ds = T::ZERO;
            let mut dt = T::ZERO;
            for i in c * n + b * hw..c * n + (b + 1) * hw {
                dh.data[i] = dy.data[i] * scale;
                ds += dy.data[i] * h.data[i];
                dt += dy.data[i];
            }
            dss.data[b * 2 * h.c + c] = ds;
            dss.data[b * 2 * h.c + h.c + c] = dt;
        }
    }
    (dh, dss)
}
