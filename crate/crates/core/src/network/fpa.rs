//! Feature pyramid attention decoder.
//!
//! The input is reflect-padded to a multiple of 8, run through three
//! stride-2 levels (7x7, 5x5, 3x3), merged bottom-up with nearest upsizing
//! followed by a convolution, and the merged map gates a 1x1 projection of
//! the input. A global-pool branch is added and the result cropped back.

use crate::error::{Error, Result};
use crate::network::layers::{
    crop, crop_backward, reflect_pad, reflect_pad_backward, relu, relu_backward, upsize2, upsize2_backward, Conv2d,
};
use crate::network::params::{Grads, ParamRegistry, ParamStore};
use crate::network::tensor::FeatureMap;
use crate::scalar::Scalar;

/// Smallest spatial size the pyramid accepts.
pub const FPA_MIN_SIZE: usize = 8;
const MERGE_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub master: Conv2d,
    pub pool: Conv2d,
    pub down: [Conv2d; 3],
    pub side: [Conv2d; 3],
    pub merge: [Conv2d; 2],
    pub attention: Conv2d,
    pub cin: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct FpaCache<S> {
    input: FeatureMap<S>,
    padded: FeatureMap<S>,
    pooled: FeatureMap<S>,
    down: Vec<FeatureMap<S>>,
    side: Vec<FeatureMap<S>>,
    up3: FeatureMap<S>,
    m2: FeatureMap<S>,
    up2: FeatureMap<S>,
    m1: FeatureMap<S>,
    up1: FeatureMap<S>,
    master: FeatureMap<S>,
    attention: Option<FeatureMap<S>>,
    top: usize,
    left: usize,
}

fn padded_size(n: usize) -> usize {
    n.div_ceil(8) * 8
}

impl FeaturePyramid {
    pub fn register(reg: &mut ParamRegistry, name: &str, cin: usize, width: usize, pyramid: usize) -> Self {
        let conv = |reg: &mut ParamRegistry, part: &str, k: usize, ci: usize, co: usize, stride: usize| {
            Conv2d::register(reg, &format!("{name}.{part}"), k, ci, co, stride, true, Conv2d::glorot(k, ci, co))
        };
        let master = conv(reg, "master", 1, cin, width, 1);
        let pool = conv(reg, "pool", 1, cin, width, 1);
        let d1 = conv(reg, "down1", 7, cin, pyramid, 2);
        let s1 = conv(reg, "side1", 7, pyramid, pyramid, 1);
        let d2 = conv(reg, "down2", 5, pyramid, pyramid, 2);
        let s2 = conv(reg, "side2", 5, pyramid, pyramid, 1);
        let d3 = conv(reg, "down3", 3, pyramid, pyramid, 2);
        let s3 = conv(reg, "side3", 3, pyramid, pyramid, 1);
        let m2 = conv(reg, "merge2", MERGE_KERNEL, pyramid, pyramid, 1);
        let m1 = conv(reg, "merge1", MERGE_KERNEL, pyramid, pyramid, 1);
        let attention = conv(reg, "attention", MERGE_KERNEL, pyramid, width, 1);
        Self {
            master,
            pool,
            down: [d1, d2, d3],
            side: [s1, s2, s3],
            merge: [m2, m1],
            attention,
            cin,
            width,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        x: &FeatureMap<S>,
        zero_attention: bool,
    ) -> Result<(FeatureMap<S>, FpaCache<S>)> {
        if x.h < FPA_MIN_SIZE || x.w < FPA_MIN_SIZE {
            return Err(Error::shape(
                "pyramid input",
                format!("at least {FPA_MIN_SIZE}x{FPA_MIN_SIZE}"),
                format!("{}x{}", x.h, x.w),
            ));
        }
        let (hp, wp) = (padded_size(x.h), padded_size(x.w));
        let (top, left) = ((hp - x.h) / 2, (wp - x.w) / 2);
        let padded = reflect_pad(x, top, left, hp, wp);

        let pooled = FeatureMap::from_vec(1, 1, x.c, x.channel_means());
        let gp = self.pool.forward(ps, &pooled).data;
        let master = self.master.forward(ps, x);

        let mut down = Vec::with_capacity(3);
        let mut side = Vec::with_capacity(3);
        let mut cur = &padded;
        for level in 0..3 {
            down.push(relu(&self.down[level].forward(ps, cur)));
            cur = &down[level];
            side.push(relu(&self.side[level].forward(ps, cur)));
        }
        let up3 = upsize2(&side[2], side[1].h, side[1].w);
        let mut m2 = self.merge[0].forward(ps, &up3);
        m2.add_assign(&side[1]);
        let up2 = upsize2(&m2, side[0].h, side[0].w);
        let mut m1 = self.merge[1].forward(ps, &up2);
        m1.add_assign(&side[0]);
        let up1 = upsize2(&m1, hp, wp);

        let mut out = FeatureMap::zeros(x.h, x.w, self.width);
        let attention = if zero_attention {
            None
        } else {
            let att = crop(&self.attention.forward(ps, &up1), top, left, x.h, x.w);
            for i in 0..out.data.len() {
                out.data[i] = master.data[i] * att.data[i];
            }
            Some(att)
        };
        for px in out.data.chunks_exact_mut(self.width) {
            for (v, &g) in px.iter_mut().zip(&gp) {
                *v += g;
            }
        }
        Ok((
            out,
            FpaCache {
                input: x.clone(),
                padded,
                pooled,
                down,
                side,
                up3,
                m2,
                up2,
                m1,
                up1,
                master,
                attention,
                top,
                left,
            },
        ))
    }

    pub fn backward<S: Scalar>(
        &self,
        ps: &ParamStore<S>,
        cache: &FpaCache<S>,
        dout: &FeatureMap<S>,
        grads: &mut Grads<S>,
    ) -> FeatureMap<S> {
        let x = &cache.input;
        let width = self.width;

        let mut dgp = vec![S::zero(); width];
        for px in dout.data.chunks_exact(width) {
            for (a, &v) in dgp.iter_mut().zip(px) {
                *a += v;
            }
        }
        let dpooled = self
            .pool
            .backward(ps, &cache.pooled, &FeatureMap::from_vec(1, 1, width, dgp), grads, true)
            .expect("dx requested");
        let n = S::c(x.pixels() as f64);
        let mut dx = FeatureMap::zeros(x.h, x.w, x.c);
        for px in dx.data.chunks_exact_mut(x.c) {
            for (a, &g) in px.iter_mut().zip(&dpooled.data) {
                *a = g / n;
            }
        }

        let Some(att) = &cache.attention else {
            // attention disabled: the master branch does not reach the output
            let zero = FeatureMap::zeros(x.h, x.w, width);
            self.master.backward(ps, x, &zero, grads, false);
            return dx;
        };
        let mut dmaster = dout.clone();
        let mut datt = dout.clone();
        for i in 0..dout.data.len() {
            dmaster.data[i] *= att.data[i];
            datt.data[i] *= cache.master.data[i];
        }
        dx.add_assign(&self.master.backward(ps, x, &dmaster, grads, true).expect("dx requested"));

        let (hp, wp) = (cache.padded.h, cache.padded.w);
        let datt_pad = crop_backward(&datt, cache.top, cache.left, hp, wp);
        let dup1 = self
            .attention
            .backward(ps, &cache.up1, &datt_pad, grads, true)
            .expect("dx requested");
        let dm1 = upsize2_backward(&dup1, cache.m1.h, cache.m1.w);
        let dup2 = self.merge[1].backward(ps, &cache.up2, &dm1, grads, true).expect("dx requested");
        let dm2 = upsize2_backward(&dup2, cache.m2.h, cache.m2.w);
        let dup3 = self.merge[0].backward(ps, &cache.up3, &dm2, grads, true).expect("dx requested");
        let ds3 = upsize2_backward(&dup3, cache.side[2].h, cache.side[2].w);

        let dside = [dm1, dm2, ds3];
        let mut ddown: Option<FeatureMap<S>> = None;
        for level in (0..3).rev() {
            let d = &cache.down[level];
            let dpre = relu_backward(&cache.side[level], &dside[level]);
            let mut dd = self.side[level].backward(ps, d, &dpre, grads, true).expect("dx requested");
            if let Some(g) = ddown.take() {
                dd.add_assign(&g);
            }
            let dpre = relu_backward(d, &dd);
            let below = if level == 0 { &cache.padded } else { &cache.down[level - 1] };
            ddown = self.down[level].backward(ps, below, &dpre, grads, true);
        }
        let dpad = ddown.expect("three levels");
        dx.add_assign(&reflect_pad_backward(&dpad, cache.top, cache.left, x.h, x.w));
        dx
    }
}
