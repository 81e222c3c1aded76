//! Differentiable building blocks over [`FeatureMap`]s.
//!
//! Every layer exposes `forward` and a `backward` that accumulates parameter
//! gradients and returns the input gradient.

use crate::network::params::{Grads, Init, ParamId, ParamRegistry, ParamStore};
use crate::network::tensor::FeatureMap;
use crate::preprocess::reflect;
use crate::scalar::{sigmoid, Scalar};

/// Square convolution with reflect padding of `k / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub k: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl Conv2d {
    /// Weight layout `[k, k, cin, cout]`.
    pub fn register(
        reg: &mut ParamRegistry,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let weight = reg.add(format!("{name}.weight"), &[k, k, cin, cout], init);
        let bias = bias.then(|| reg.add(format!("{name}.bias"), &[cout], Init::Zeros));
        Self {
            weight,
            bias,
            k,
            cin,
            cout,
            stride,
        }
    }

    pub fn glorot(k: usize, cin: usize, cout: usize) -> Init {
        Init::GlorotUniform {
            fan_in: k * k * cin,
            fan_out: k * k * cout,
        }
    }

    pub fn he(k: usize, cin: usize) -> Init {
        Init::HeNormal { fan_in: k * k * cin }
    }

    pub fn out_dim(&self, n: usize) -> usize {
        (n - 1) / self.stride + 1
    }

    fn taps(&self, n_in: usize, n_out: usize) -> Vec<usize> {
        let pad = (self.k / 2) as isize;
        let mut t = Vec::with_capacity(n_out * self.k);
        for o in 0..n_out {
            for kk in 0..self.k {
                t.push(reflect((o * self.stride) as isize + kk as isize - pad, n_in));
            }
        }
        t
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, x: &FeatureMap<S>) -> FeatureMap<S> {
        debug_assert_eq!(x.c, self.cin);
        let (k, cin, cout) = (self.k, self.cin, self.cout);
        let (ho, wo) = (self.out_dim(x.h), self.out_dim(x.w));
        let (rows, cols) = (self.taps(x.h, ho), self.taps(x.w, wo));
        let w = ps.get(self.weight);
        let mut out = FeatureMap::zeros(ho, wo, cout);
        if let Some(b) = self.bias {
            let b = ps.get(b);
            for px in out.data.chunks_exact_mut(cout) {
                px.copy_from_slice(b);
            }
        }
        for oy in 0..ho {
            for ox in 0..wo {
                let o = (oy * wo + ox) * cout;
                let acc = &mut out.data[o..o + cout];
                for ky in 0..k {
                    let iy = rows[oy * k + ky];
                    for kx in 0..k {
                        let ix = cols[ox * k + kx];
                        let xp = &x.data[(iy * x.w + ix) * cin..][..cin];
                        let wb = &w[(ky * k + kx) * cin * cout..][..cin * cout];
                        for (ci, &xv) in xp.iter().enumerate() {
                            if xv == S::zero() {
                                continue;
                            }
                            let wr = &wb[ci * cout..][..cout];
                            for (a, &wv) in acc.iter_mut().zip(wr) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight and bias gradients; returns `dL/dx` when asked.
    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: &FeatureMap<S>,
        dy: &FeatureMap<S>,
        grads: &mut Grads<S>,
        need_dx: bool,
    ) -> Option<FeatureMap<S>> {
        let (k, cin, cout) = (self.k, self.cin, self.cout);
        let (ho, wo) = (dy.h, dy.w);
        let (rows, cols) = (self.taps(x.h, ho), self.taps(x.w, wo));
        if let Some(b) = self.bias {
            let db = grads.get_mut(b);
            for px in dy.data.chunks_exact(cout) {
                for (a, &v) in db.iter_mut().zip(px) {
                    *a += v;
                }
            }
        }
        {
            let dw = grads.get_mut(self.weight);
            for oy in 0..ho {
                for ox in 0..wo {
                    let dyp = &dy.data[(oy * wo + ox) * cout..][..cout];
                    if dyp.iter().all(|&v| v == S::zero()) {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = rows[oy * k + ky];
                        for kx in 0..k {
                            let ix = cols[ox * k + kx];
                            let xp = &x.data[(iy * x.w + ix) * cin..][..cin];
                            let dwb = &mut dw[(ky * k + kx) * cin * cout..][..cin * cout];
                            for (ci, &xv) in xp.iter().enumerate() {
                                if xv == S::zero() {
                                    continue;
                                }
                                let dwr = &mut dwb[ci * cout..][..cout];
                                for (a, &g) in dwr.iter_mut().zip(dyp) {
                                    *a += xv * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        if !need_dx {
            return None;
        }
        // transposed copy [k, k, cout, cin] keeps the inner loop contiguous
        let w = ps.get(self.weight);
        let mut wt = vec![S::zero(); w.len()];
        for tap in 0..k * k {
            for ci in 0..cin {
                for co in 0..cout {
                    wt[tap * cin * cout + co * cin + ci] = w[tap * cin * cout + ci * cout + co];
                }
            }
        }
        let mut dx = FeatureMap::zeros(x.h, x.w, cin);
        for oy in 0..ho {
            for ox in 0..wo {
                let dyp = &dy.data[(oy * wo + ox) * cout..][..cout];
                for ky in 0..k {
                    let iy = rows[oy * k + ky];
                    for kx in 0..k {
                        let ix = cols[ox * k + kx];
                        let dxp = &mut dx.data[(iy * x.w + ix) * cin..][..cin];
                        let wtb = &wt[(ky * k + kx) * cin * cout..][..cin * cout];
                        for (co, &g) in dyp.iter().enumerate() {
                            if g == S::zero() {
                                continue;
                            }
                            let wr = &wtb[co * cin..][..cin];
                            for (a, &wv) in dxp.iter_mut().zip(wr) {
                                *a += g * wv;
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    }
}

/// Per-pixel normalization over channels with learned gain and offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub offset: ParamId,
    pub c: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNormCache<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
}

impl LayerNorm {
    pub fn register(reg: &mut ParamRegistry, name: &str, c: usize) -> Self {
        Self {
            gain: reg.add(format!("{name}.gain"), &[c], Init::Const(1.0)),
            offset: reg.add(format!("{name}.offset"), &[c], Init::Zeros),
            c,
        }
    }

    pub fn forward<S: Scalar>(&self, ps: &ParamStore<S>, x: &FeatureMap<S>) -> (FeatureMap<S>, LayerNormCache<S>) {
        let c = self.c;
        let (g, b) = (ps.get(self.gain), ps.get(self.offset));
        let n = S::c(c as f64);
        let eps = S::c(LAYER_NORM_EPS);
        let mut out = FeatureMap::zeros(x.h, x.w, c);
        let mut xhat = vec![S::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(x.pixels());
        for (i, px) in x.data.chunks_exact(c).enumerate() {
            let mean = px.iter().copied().sum::<S>() / n;
            let var = px.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..c {
                let xh = (px[j] - mean) * inv;
                xhat[i * c + j] = xh;
                out.data[i * c + j] = g[j] * xh + b[j];
            }
        }
        (out, LayerNormCache { xhat, inv_std })
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        cache: &LayerNormCache<S>,
        dy: &FeatureMap<S>,
        grads: &mut Grads<S>,
    ) -> FeatureMap<S> {
        let c = self.c;
        let g = ps.get(self.gain);
        let n = S::c(c as f64);
        let mut dg = vec![S::zero(); c];
        let mut db = vec![S::zero(); c];
        let mut dx = FeatureMap::zeros(dy.h, dy.w, c);
        let mut dxhat = vec![S::zero(); c];
        for (i, dyp) in dy.data.chunks_exact(c).enumerate() {
            let xh = &cache.xhat[i * c..(i + 1) * c];
            let mut m1 = S::zero();
            let mut m2 = S::zero();
            for j in 0..c {
                dg[j] += dyp[j] * xh[j];
                db[j] += dyp[j];
                dxhat[j] = dyp[j] * g[j];
                m1 += dxhat[j];
                m2 += dxhat[j] * xh[j];
            }
            m1 /= n;
            m2 /= n;
            let inv = cache.inv_std[i];
            for j in 0..c {
                dx.data[i * c + j] = inv * (dxhat[j] - m1 - xh[j] * m2);
            }
        }
        for (a, v) in grads.get_mut(self.gain).iter_mut().zip(dg) {
            *a += v;
        }
        for (a, v) in grads.get_mut(self.offset).iter_mut().zip(db) {
            *a += v;
        }
        dx
    }
}

/// Spatial squeeze-excitation: `y = x * sigmoid(x . w + b)` per pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGate {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c: usize,
}

impl SpatialGate {
    pub fn register(reg: &mut ParamRegistry, name: &str, c: usize) -> Self {
        Self {
            weight: reg.add(format!("{name}.weight"), &[c], Conv2d::glorot(1, c, 1)),
            bias: reg.add(format!("{name}.bias"), &[1], Init::Zeros),
            c,
        }
    }

    /// Gate map `[H, W]`, or all ones when `neutral`.
    pub fn gate<S: Scalar>(&self, ps: &ParamStore<S>, x: &FeatureMap<S>, neutral: bool) -> Vec<S> {
        if neutral {
            return vec![S::one(); x.pixels()];
        }
        let (w, b) = (ps.get(self.weight), ps.get(self.bias)[0]);
        x.data
            .chunks_exact(self.c)
            .map(|px| sigmoid(px.iter().zip(w).map(|(&a, &b)| a * b).sum::<S>() + b))
            .collect()
    }

    /// Backward of `y = x * q` given the upstream gradient; returns `dL/dx`.
    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: &FeatureMap<S>,
        q: &[S],
        dy: &FeatureMap<S>,
        grads: &mut Grads<S>,
        neutral: bool,
    ) -> FeatureMap<S> {
        let c = self.c;
        let w = ps.get(self.weight);
        let mut dx = FeatureMap::zeros(x.h, x.w, c);
        let mut dw = vec![S::zero(); c];
        let mut db = S::zero();
        for (i, (xp, dyp)) in x.data.chunks_exact(c).zip(dy.data.chunks_exact(c)).enumerate() {
            let qi = q[i];
            let dxp = &mut dx.data[i * c..(i + 1) * c];
            for j in 0..c {
                dxp[j] = dyp[j] * qi;
            }
            if neutral {
                continue;
            }
            let dq: S = xp.iter().zip(dyp).map(|(&a, &b)| a * b).sum();
            let dpre = dq * qi * (S::one() - qi);
            db += dpre;
            for j in 0..c {
                dw[j] += dpre * xp[j];
                dxp[j] += dpre * w[j];
            }
        }
        if !neutral {
            for (a, v) in grads.get_mut(self.weight).iter_mut().zip(dw) {
                *a += v;
            }
            grads.get_mut(self.bias)[0] += db;
        }
        dx
    }
}

pub fn relu<S: Scalar>(x: &FeatureMap<S>) -> FeatureMap<S> {
    x.map(|v| v.max(S::zero()))
}

/// Gradient of ReLU given its output.
pub fn relu_backward<S: Scalar>(y: &FeatureMap<S>, dy: &FeatureMap<S>) -> FeatureMap<S> {
    let data = y
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
        .collect();
    FeatureMap::from_vec(y.h, y.w, y.c, data)
}

/// Nearest-neighbor upsizing by 2, cropped to `(h, w)`.
pub fn upsize2<S: Scalar>(x: &FeatureMap<S>, h: usize, w: usize) -> FeatureMap<S> {
    let mut out = FeatureMap::zeros(h, w, x.c);
    for r in 0..h {
        for c in 0..w {
            out.px_mut(r, c).copy_from_slice(x.px(r / 2, c / 2));
        }
    }
    out
}

pub fn upsize2_backward<S: Scalar>(dy: &FeatureMap<S>, h: usize, w: usize) -> FeatureMap<S> {
    let mut dx = FeatureMap::zeros(h, w, dy.c);
    for r in 0..dy.h {
        for c in 0..dy.w {
            let g = dy.px(r, c);
            for (a, &v) in dx.px_mut(r / 2, c / 2).iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    dx
}

/// Reflect-pads `top`/`left` rows and columns, growing to `(h, w)`.
pub fn reflect_pad<S: Scalar>(x: &FeatureMap<S>, top: usize, left: usize, h: usize, w: usize) -> FeatureMap<S> {
    let mut out = FeatureMap::zeros(h, w, x.c);
    for r in 0..h {
        let sr = reflect(r as isize - top as isize, x.h);
        for c in 0..w {
            let sc = reflect(c as isize - left as isize, x.w);
            out.px_mut(r, c).copy_from_slice(x.px(sr, sc));
        }
    }
    out
}

/// Adjoint of [`reflect_pad`]: folds padded gradients back onto the source.
pub fn reflect_pad_backward<S: Scalar>(dy: &FeatureMap<S>, top: usize, left: usize, h: usize, w: usize) -> FeatureMap<S> {
    let mut dx = FeatureMap::zeros(h, w, dy.c);
    for r in 0..dy.h {
        let sr = reflect(r as isize - top as isize, h);
        for c in 0..dy.w {
            let sc = reflect(c as isize - left as isize, w);
            let g = dy.px(r, c);
            for (a, &v) in dx.px_mut(sr, sc).iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    dx
}

pub fn crop<S: Scalar>(x: &FeatureMap<S>, top: usize, left: usize, h: usize, w: usize) -> FeatureMap<S> {
    let mut out = FeatureMap::zeros(h, w, x.c);
    for r in 0..h {
        for c in 0..w {
            out.px_mut(r, c).copy_from_slice(x.px(r + top, c + left));
        }
    }
    out
}

/// Adjoint of [`crop`]: zero-embeds into the larger map.
pub fn crop_backward<S: Scalar>(dy: &FeatureMap<S>, top: usize, left: usize, h: usize, w: usize) -> FeatureMap<S> {
    let mut dx = FeatureMap::zeros(h, w, dy.c);
    for r in 0..dy.h {
        for c in 0..dy.w {
            dx.px_mut(r + top, c + left).copy_from_slice(dy.px(r, c));
        }
    }
    dx
}
