//! Layer kernels with hand-derived backward passes. Activations are
//! channels-last; every backward accumulates into the parameter gradients
//! and returns the input gradient.

use crate::params::{Grads, Init, ParamId, ParamStore, Registry, INIT_STD};
use crate::real::Real;
use crate::tensor::Tensor4;

pub const LN_EPS: f64 = 1e-6;

/// Pointwise affine map `cin → cout` applied to every row (voxel or event).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(reg: &mut Registry, name: &str, cin: usize, cout: usize) -> Self {
        let w = reg.add(format!("{name}.weight"), &[cin, cout], Init::TruncNormal(INIT_STD));
        let b = reg.add(format!("{name}.bias"), &[cout], Init::Zeros);
        Linear { w, b, cin, cout }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let (w, b) = (p.get(self.w), p.get(self.b));
        let rows = x.len() / self.cin;
        let mut out = vec![T::zero(); rows * self.cout];
        for (xr, yr) in x.chunks_exact(self.cin).zip(out.chunks_exact_mut(self.cout)) {
            yr.copy_from_slice(b);
            for (&xi, wr) in xr.iter().zip(w.chunks_exact(self.cout)) {
                for (y, &wv) in yr.iter_mut().zip(wr) {
                    *y += xi * wv;
                }
            }
        }
        out
    }

    fn param_grads<T: Real>(&self, g: &mut Grads<T>, x: &[T], dy: &[T]) {
        {
            let dw = g.get_mut(self.w);
            for (xr, dr) in x.chunks_exact(self.cin).zip(dy.chunks_exact(self.cout)) {
                for (&xi, dwr) in xr.iter().zip(dw.chunks_exact_mut(self.cout)) {
                    if xi == T::zero() {
                        continue;
                    }
                    for (d, &dv) in dwr.iter_mut().zip(dr) {
                        *d += xi * dv;
                    }
                }
            }
        }
        let db = g.get_mut(self.b);
        for dr in dy.chunks_exact(self.cout) {
            for (d, &dv) in db.iter_mut().zip(dr) {
                *d += dv;
            }
        }
    }

    pub fn backward<T: Real>(&self, p: &ParamStore<T>, g: &mut Grads<T>, x: &[T], dy: &[T]) -> Vec<T> {
        self.param_grads(g, x, dy);
        let w = p.get(self.w);
        let rows = dy.len() / self.cout;
        let mut dx = vec![T::zero(); rows * self.cin];
        for (dxr, dr) in dx.chunks_exact_mut(self.cin).zip(dy.chunks_exact(self.cout)) {
            for (d, wr) in dxr.iter_mut().zip(w.chunks_exact(self.cout)) {
                let mut s = T::zero();
                for (&a, &b) in wr.iter().zip(dr) {
                    s += a * b;
                }
                *d = s;
            }
        }
        dx
    }

    /// Parameter gradients only, for layers fed by non-trainable inputs.
    pub fn backward_params<T: Real>(&self, g: &mut Grads<T>, x: &[T], dy: &[T]) {
        self.param_grads(g, x, dy);
    }
}

/// Depthwise k×k×k convolution with zero "same" padding and per-channel bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthwiseConv {
    /// Shape (k³, c), offset-major.
    pub w: ParamId,
    pub b: ParamId,
    pub channels: usize,
    pub kernel: usize,
}

impl DepthwiseConv {
    pub fn new(reg: &mut Registry, name: &str, channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        let taps = kernel * kernel * kernel;
        let w = reg.add(format!("{name}.weight"), &[taps, channels], Init::TruncNormal(INIT_STD));
        let b = reg.add(format!("{name}.bias"), &[channels], Init::Zeros);
        DepthwiseConv { w, b, channels, kernel }
    }

    /// Calls `f(out_voxel, in_voxel, tap)` for every in-bounds pair.
    #[inline]
    fn for_each_tap(&self, [d, h, w]: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel as isize;
        let half = k / 2;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let out = x + w * (y + h * z);
                    let mut tap = 0;
                    for oz in -half..=half {
                        let zz = z as isize + oz;
                        if zz < 0 || zz >= d as isize {
                            tap += (k * k) as usize;
                            continue;
                        }
                        for oy in -half..=half {
                            let yy = y as isize + oy;
                            if yy < 0 || yy >= h as isize {
                                tap += k as usize;
                                continue;
                            }
                            let row = w as isize * (yy + h as isize * zz);
                            for ox in -half..=half {
                                let xx = x as isize + ox;
                                if xx >= 0 && xx < w as isize {
                                    f(out, (row + xx) as usize, tap);
                                }
                                tap += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor4<T>) -> Tensor4<T> {
        let c = self.channels;
        let (w, b) = (p.get(self.w), p.get(self.b));
        let xs = x.data();
        let mut out = vec![T::zero(); xs.len()];
        for o in out.chunks_exact_mut(c) {
            o.copy_from_slice(b);
        }
        self.for_each_tap(x.spatial(), |ov, iv, tap| {
            let o = &mut out[ov * c..(ov + 1) * c];
            let i = &xs[iv * c..(iv + 1) * c];
            let wt = &w[tap * c..(tap + 1) * c];
            for ((o, &i), &wt) in o.iter_mut().zip(i).zip(wt) {
                *o += i * wt;
            }
        });
        x.with_channels(c, out)
    }

    pub fn backward<T: Real>(&self, p: &ParamStore<T>, g: &mut Grads<T>, x: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
        let c = self.channels;
        let w = p.get(self.w);
        let xs = x.data();
        let ds = dy.data();
        let mut dx = vec![T::zero(); xs.len()];
        {
            let dw = g.get_mut(self.w);
            self.for_each_tap(x.spatial(), |ov, iv, tap| {
                let d = &ds[ov * c..(ov + 1) * c];
                let i = &xs[iv * c..(iv + 1) * c];
                let wt = &w[tap * c..(tap + 1) * c];
                let dwt = &mut dw[tap * c..(tap + 1) * c];
                let dxi = &mut dx[iv * c..(iv + 1) * c];
                for j in 0..c {
                    dwt[j] += i[j] * d[j];
                    dxi[j] += wt[j] * d[j];
                }
            });
        }
        let db = g.get_mut(self.b);
        for d in ds.chunks_exact(c) {
            for (a, &v) in db.iter_mut().zip(d) {
                *a += v;
            }
        }
        x.with_channels(c, dx)
    }
}

/// Layer normalization over the channels of each row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

impl LayerNorm {
    pub fn new(reg: &mut Registry, name: &str, channels: usize) -> Self {
        let gamma = reg.add(format!("{name}.weight"), &[channels], Init::Ones);
        let beta = reg.add(format!("{name}.bias"), &[channels], Init::Zeros);
        LayerNorm { gamma, beta, channels }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let c = self.channels;
        let (gm, bt) = (p.get(self.gamma), p.get(self.beta));
        let n = T::of(c as f64);
        let eps = T::of(LN_EPS);
        let rows = x.len() / c;
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        for (r, xr) in x.chunks_exact(c).enumerate() {
            let mean = xr.iter().copied().sum::<T>() / n;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let h = (xr[j] - mean) * inv;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gm[j] + bt[j];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(&self, p: &ParamStore<T>, g: &mut Grads<T>, cache: &LayerNormCache<T>, dy: &[T]) -> Vec<T> {
        let c = self.channels;
        let gm = p.get(self.gamma);
        let n = T::of(c as f64);
        {
            let dg = g.get_mut(self.gamma);
            for (dr, hr) in dy.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
                for j in 0..c {
                    dg[j] += dr[j] * hr[j];
                }
            }
        }
        {
            let db = g.get_mut(self.beta);
            for dr in dy.chunks_exact(c) {
                for j in 0..c {
                    db[j] += dr[j];
                }
            }
        }
        let mut dx = vec![T::zero(); dy.len()];
        let mut dh = vec![T::zero(); c];
        for (r, (dr, hr)) in dy.chunks_exact(c).zip(cache.xhat.chunks_exact(c)).enumerate() {
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for j in 0..c {
                dh[j] = dr[j] * gm[j];
                m1 += dh[j];
                m2 += dh[j] * hr[j];
            }
            m1 = m1 / n;
            m2 = m2 / n;
            let inv = cache.inv_std[r];
            for j in 0..c {
                dx[r * c + j] = inv * (dh[j] - m1 - hr[j] * m2);
            }
        }
        dx
    }
}

/// Exact GELU, x·Φ(x). Returns the activation and its derivative.
pub fn gelu<T: Real>(x: &[T]) -> (Vec<T>, Vec<T>) {
    let half = T::of(0.5);
    let rs2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
    let rs2pi = T::of(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
    let mut y = Vec::with_capacity(x.len());
    let mut d = Vec::with_capacity(x.len());
    for &v in x {
        let cdf = half * (T::one() + (v * rs2).erf());
        let pdf = rs2pi * (-(half * v * v)).exp();
        y.push(v * cdf);
        d.push(cdf + v * pdf);
    }
    (y, d)
}

/// Per-channel multiplicative scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerScale {
    pub gamma: ParamId,
    pub channels: usize,
}

impl LayerScale {
    pub fn new(reg: &mut Registry, name: &str, channels: usize, init: f64) -> Self {
        LayerScale { gamma: reg.add(name.to_string(), &[channels], Init::Constant(init)), channels }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &[T]) -> Vec<T> {
        let gm = p.get(self.gamma);
        let mut y = x.to_vec();
        for r in y.chunks_exact_mut(self.channels) {
            for (v, &s) in r.iter_mut().zip(gm) {
                *v *= s;
            }
        }
        y
    }

    pub fn backward<T: Real>(&self, p: &ParamStore<T>, g: &mut Grads<T>, x: &[T], dy: &[T]) -> Vec<T> {
        let c = self.channels;
        let gm = p.get(self.gamma);
        let dg = g.get_mut(self.gamma);
        let mut dx = vec![T::zero(); dy.len()];
        for ((xr, dr), dxr) in x.chunks_exact(c).zip(dy.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
            for j in 0..c {
                dg[j] += dr[j] * xr[j];
                dxr[j] = dr[j] * gm[j];
            }
        }
        dx
    }
}

/// 2×2×2 convolution with stride 2, `cin → cout`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownConv {
    /// Shape (8, cin, cout).
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl DownConv {
    pub fn new(reg: &mut Registry, name: &str, cin: usize, cout: usize) -> Self {
        let w = reg.add(format!("{name}.weight"), &[8, cin, cout], Init::TruncNormal(INIT_STD));
        let b = reg.add(format!("{name}.bias"), &[cout], Init::Zeros);
        DownConv { w, b, cin, cout }
    }

    /// (output voxel, tap, input voxel) for each of the 8 taps of each output.
    fn taps([d, h, w]: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let out = x + ow * (y + oh * z);
                    for t in 0..8 {
                        let (dz, dy, dx) = (t >> 2, (t >> 1) & 1, t & 1);
                        let inp = (2 * x + dx) + w * ((2 * y + dy) + h * (2 * z + dz));
                        f(out, t, inp);
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor4<T>) -> Tensor4<T> {
        let [d, h, w, _] = x.shape();
        let (wt, b) = (p.get(self.w), p.get(self.b));
        let (ci, co) = (self.cin, self.cout);
        let xs = x.data();
        let mut out = vec![T::zero(); (d / 2) * (h / 2) * (w / 2) * co];
        for o in out.chunks_exact_mut(co) {
            o.copy_from_slice(b);
        }
        Self::taps([d, h, w], |ov, t, iv| {
            let o = &mut out[ov * co..(ov + 1) * co];
            for (i, &xv) in xs[iv * ci..(iv + 1) * ci].iter().enumerate() {
                let wr = &wt[(t * ci + i) * co..(t * ci + i + 1) * co];
                for (y, &wv) in o.iter_mut().zip(wr) {
                    *y += xv * wv;
                }
            }
        });
        Tensor4::new([d / 2, h / 2, w / 2, co], out).expect("down-conv shape")
    }

    pub fn backward<T: Real>(&self, p: &ParamStore<T>, g: &mut Grads<T>, x: &Tensor4<T>, dy: &Tensor4<T>) -> Tensor4<T> {
        let [d, h, w, _] = x.shape();
        let wt = p.get(self.w);
        let (ci, co) = (self.cin, self.cout);
        let xs = x.data();
        let ds = dy.data();
        let mut dx = vec![T::zero(); xs.len()];
        {
            let dw = g.get_mut(self.w);
            Self::taps([d, h, w], |ov, t, iv| {
                let dr = &ds[ov * co..(ov + 1) * co];
                for i in 0..ci {
                    let base = (t * ci + i) * co;
                    let xv = xs[iv * ci + i];
                    let mut s = T::zero();
                    for o in 0..co {
                        dw[base + o] += xv * dr[o];
                        s += wt[base + o] * dr[o];
                    }
                    dx[iv * ci + i] += s;
                }
            });
        }
        let db = g.get_mut(self.b);
        for dr in ds.chunks_exact(co) {
            for (a, &v) in db.iter_mut().zip(dr) {
                *a += v;
            }
        }
        x.with_channels(ci, dx)
    }
}

/// Nearest-neighbour 2× upsampling along every spatial axis.
pub fn upsample2<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let [d, h, w, c] = x.shape();
    let (ud, uh, uw) = (2 * d, 2 * h, 2 * w);
    let xs = x.data();
    let mut out = vec![T::zero(); ud * uh * uw * c];
    for z in 0..ud {
        for y in 0..uh {
            for xx in 0..uw {
                let o = (xx + uw * (y + uh * z)) * c;
                let i = ((xx / 2) + w * ((y / 2) + h * (z / 2))) * c;
                out[o..o + c].copy_from_slice(&xs[i..i + c]);
            }
        }
    }
    Tensor4::new([ud, uh, uw, c], out).expect("upsample shape")
}

pub fn upsample2_backward<T: Real>(dy: &Tensor4<T>) -> Tensor4<T> {
    let [ud, uh, uw, c] = dy.shape();
    let (d, h, w) = (ud / 2, uh / 2, uw / 2);
    let ds = dy.data();
    let mut dx = vec![T::zero(); d * h * w * c];
    for z in 0..ud {
        for y in 0..uh {
            for xx in 0..uw {
                let o = (xx + uw * (y + uh * z)) * c;
                let i = ((xx / 2) + w * ((y / 2) + h * (z / 2))) * c;
                for j in 0..c {
                    dx[i + j] += ds[o + j];
                }
            }
        }
    }
    Tensor4::new([d, h, w, c], dx).expect("upsample shape")
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Tensor4<T> {
    let (ca, cb) = (a.channels(), b.channels());
    let mut out = Vec::with_capacity(a.voxels() * (ca + cb));
    for (ra, rb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    a.with_channels(ca + cb, out)
}

pub fn concat_backward<T: Real>(dy: &Tensor4<T>, ca: usize) -> (Tensor4<T>, Tensor4<T>) {
    let c = dy.channels();
    let cb = c - ca;
    let mut da = Vec::with_capacity(dy.voxels() * ca);
    let mut db = Vec::with_capacity(dy.voxels() * cb);
    for r in dy.data().chunks_exact(c) {
        da.extend_from_slice(&r[..ca]);
        db.extend_from_slice(&r[ca..]);
    }
    (dy.with_channels(ca, da), dy.with_channels(cb, db))
}

/// Non-negativity clamp, max(x, 0).
pub fn clamp_min0<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.max(T::zero())).collect()
}

pub fn clamp_min0_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter().zip(dy).map(|(&v, &d)| if v > T::zero() { d } else { T::zero() }).collect()
}
