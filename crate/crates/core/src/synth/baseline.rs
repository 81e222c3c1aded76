//! Per-pixel logistic regression over temporal-mean channels.

use ndarray::{Array2, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ChannelLayout, PlotSample};
use crate::scalar::{sigmoid, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub seed: u64,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 500,
            learning_rate: 0.5,
        }
    }
}

/// `[H * W, C]` temporal means in row-major pixel order.
pub fn temporal_means<S: Scalar>(stack: ArrayView4<'_, S>) -> Array2<f64> {
    let (_, h, w, c) = stack.dim();
    let mean = stack.mapv(|v| v.to_f64_lossy()).mean_axis(Axis(0)).expect("non-empty time axis");
    mean.into_shape_with_order((h * w, c)).expect("contiguous")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticBaseline {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticBaseline {
    /// Full-batch gradient descent on standardized features.
    pub fn fit<S: Scalar>(train: &[PlotSample<S>], cfg: &LogisticConfig) -> Result<Self> {
        let c = ChannelLayout::COUNT;
        let mut rows: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for s in train {
            let feats = temporal_means(s.stack.data());
            if feats.ncols() != c {
                return Err(Error::shape("baseline features", c, feats.ncols()));
            }
            rows.extend(feats.iter());
            ys.extend(s.label.values().iter().map(|&v| f64::from(v)));
        }
        let n = ys.len();
        let pos = ys.iter().filter(|&&y| y > 0.5).count();
        if pos == 0 || pos == n {
            return Err(Error::SingleClass);
        }
        let x = Array2::from_shape_vec((n, c), rows).expect("row count matches labels");
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let z = (&x - &mean) / &scale;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = Normal::new(0.0, 0.01).expect("valid std");
        let mut w: Vec<f64> = (0..c).map(|_| init.sample(&mut rng)).collect();
        let mut b = 0.0;
        let mut grad = vec![0.0; c];
        for _ in 0..cfg.iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (row, &y) in z.outer_iter().zip(&ys) {
                let logit = b + row.iter().zip(&w).map(|(a, wi)| a * wi).sum::<f64>();
                let err = sigmoid(logit) - y;
                gb += err;
                for (g, a) in grad.iter_mut().zip(row.iter()) {
                    *g += err * a;
                }
            }
            let step = cfg.learning_rate / n as f64;
            for (wi, g) in w.iter_mut().zip(&grad) {
                *wi -= step * g;
            }
            b -= step * gb;
        }
        Ok(Self {
            mean: mean.to_vec(),
            scale: scale.to_vec(),
            weights: w,
            bias: b,
        })
    }

    /// Tree probability per pixel of a `[T, H, W, C]` stack.
    pub fn predict_proba<S: Scalar>(&self, stack: ArrayView4<'_, S>) -> Result<Array2<f64>> {
        let (_, h, w, c) = stack.dim();
        if c != self.weights.len() {
            return Err(Error::shape("baseline input channels", self.weights.len(), c));
        }
        let feats = temporal_means(stack);
        let probs: Vec<f64> = feats
            .outer_iter()
            .map(|row| {
                let logit = self.bias
                    + row
                        .iter()
                        .zip(&self.mean)
                        .zip(&self.scale)
                        .zip(&self.weights)
                        .map(|(((v, m), s), wi)| (v - m) / s * wi)
                        .sum::<f64>();
                sigmoid(logit)
            })
            .collect();
        Ok(Array2::from_shape_vec((h, w), probs).expect("h * w values"))
    }
}
