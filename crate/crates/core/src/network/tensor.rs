use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channel-last `[H, W, C]` activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<S> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![S::zero(); h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), h * w * c, "feature map size");
        Self { h, w, c, data }
    }

    pub fn from_view(view: ArrayView3<'_, S>) -> Self {
        let (h, w, c) = view.dim();
        Self {
            h,
            w,
            c,
            data: view.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Array3<S> {
        Array3::from_shape_vec((self.h, self.w, self.c), self.data.clone()).expect("consistent shape")
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn px(&self, r: usize, c: usize) -> &[S] {
        let o = (r * self.w + c) * self.c;
        &self.data[o..o + self.c]
    }

    #[inline]
    pub fn px_mut(&mut self, r: usize, c: usize) -> &mut [S] {
        let o = (r * self.w + c) * self.c;
        &mut self.data[o..o + self.c]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        (self.h, self.w, self.c) == (other.h, other.w, other.c)
    }

    /// Channel concatenation of maps with equal spatial dims.
    pub fn concat(parts: &[&FeatureMap<S>]) -> Self {
        let (h, w) = (parts[0].h, parts[0].w);
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h * w {
            for p in parts {
                debug_assert_eq!((p.h, p.w), (h, w));
                data.extend_from_slice(&p.data[i * p.c..(i + 1) * p.c]);
            }
        }
        Self { h, w, c, data }
    }

    /// Inverse of [`FeatureMap::concat`].
    pub fn split(&self, widths: &[usize]) -> Vec<FeatureMap<S>> {
        debug_assert_eq!(widths.iter().sum::<usize>(), self.c);
        let mut out: Vec<_> = widths.iter().map(|&c| Vec::with_capacity(self.pixels() * c)).collect();
        for i in 0..self.pixels() {
            let px = &self.data[i * self.c..(i + 1) * self.c];
            let mut o = 0;
            for (part, &c) in out.iter_mut().zip(widths) {
                part.extend_from_slice(&px[o..o + c]);
                o += c;
            }
        }
        out.into_iter()
            .zip(widths)
            .map(|(data, &c)| FeatureMap::from_vec(self.h, self.w, c, data))
            .collect()
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn check_finite(&self, layer: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("activations of {layer}")))
        }
    }

    /// Single-channel map as a grid.
    pub fn to_grid(&self) -> Array2<S> {
        assert_eq!(self.c, 1);
        Array2::from_shape_vec((self.h, self.w), self.data.clone()).expect("consistent shape")
    }

    pub fn from_grid(grid: ArrayView2<'_, S>) -> Self {
        let (h, w) = grid.dim();
        Self::from_vec(h, w, 1, grid.iter().copied().collect())
    }

    /// Per-channel mean over all pixels.
    pub fn channel_means(&self) -> Vec<S> {
        let mut m = vec![S::zero(); self.c];
        for px in self.data.chunks_exact(self.c) {
            for (a, &v) in m.iter_mut().zip(px) {
                *a += v;
            }
        }
        let n = S::c(self.pixels() as f64);
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}
