//! Scene prediction by overlapping windows with Gaussian-weighted blending.

use ndarray::{s, Array2, ArrayView2, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, ParamStore};
use crate::raster::{LabelGrid, PredictionGrid, TimeSeriesStack};
use crate::scalar::Scalar;

/// Anything that maps a `[T, 14, 14, C]` window to probabilities.
pub trait WindowModel<S>: Sync {
    fn predict_window(&self, window: ArrayView4<'_, S>) -> Result<Array2<S>>;
}

/// A network with its parameters; subsamples time when configured for fewer steps.
pub struct NetworkModel<'a, S> {
    pub network: &'a Network,
    pub params: &'a ParamStore<S>,
}

impl<S: Scalar> WindowModel<S> for NetworkModel<'_, S> {
    fn predict_window(&self, window: ArrayView4<'_, S>) -> Result<Array2<S>> {
        let steps = self.network.config.time_steps;
        if window.dim().0 == steps {
            self.network.predict(self.params, window)
        } else {
            let sub = TimeSeriesStack::subsample_time(window, steps)?;
            self.network.predict(self.params, sub.view())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendPlan {
    pub window: usize,
    pub stride: usize,
    pub sigma: f64,
}

impl Default for BlendPlan {
    fn default() -> Self {
        Self {
            window: 14,
            stride: 7,
            sigma: 3.5,
        }
    }
}

impl BlendPlan {
    /// Window origins along an axis of length `n`; the last is clamped inward.
    pub fn offsets(&self, n: usize) -> Vec<usize> {
        let mut v: Vec<usize> = (0..).map(|i| i * self.stride).take_while(|&o| o + self.window <= n).collect();
        if let Some(&last) = v.last() {
            if last + self.window < n {
                v.push(n - self.window);
            }
        }
        v
    }

    /// Centered isotropic Gaussian over the window.
    pub fn weights(&self) -> Array2<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let s2 = 2.0 * self.sigma * self.sigma;
        Array2::from_shape_fn((self.window, self.window), |(r, col)| {
            (-((r as f64 - c).powi(2) + (col as f64 - c).powi(2)) / s2).exp()
        })
    }
}

/// Blends window predictions over a `[T, H, W, C]` scene.
pub fn predict_scene<S: Scalar>(
    scene: ArrayView4<'_, S>,
    model: &dyn WindowModel<S>,
    plan: &BlendPlan,
) -> Result<PredictionGrid<S>> {
    let (_, h, w, _) = scene.dim();
    let win = plan.window;
    if h < win || w < win {
        return Err(Error::shape("scene", format!("at least {win}x{win}"), format!("{h}x{w}")));
    }
    let weights = plan.weights();
    // weighted mean of offsets from the first covering prediction
    let mut anchor = Array2::<f64>::from_elem((h, w), f64::NAN);
    let mut num = Array2::<f64>::zeros((h, w));
    let mut den = Array2::<f64>::zeros((h, w));
    for &r0 in &plan.offsets(h) {
        for &c0 in &plan.offsets(w) {
            let window = scene.slice(s![.., r0..r0 + win, c0..c0 + win, ..]);
            let p = model.predict_window(window)?;
            if p.dim() != (win, win) {
                return Err(Error::shape("window prediction", format!("{win}x{win}"), format!("{:?}", p.dim())));
            }
            for r in 0..win {
                for c in 0..win {
                    let (wt, pv) = (weights[[r, c]], p[[r, c]].to_f64_lossy());
                    let a = &mut anchor[[r0 + r, c0 + c]];
                    if a.is_nan() {
                        *a = pv;
                    }
                    num[[r0 + r, c0 + c]] += wt * (pv - *a);
                    den[[r0 + r, c0 + c]] += wt;
                }
            }
        }
    }
    let probs = ndarray::Zip::from(&anchor)
        .and(&num)
        .and(&den)
        .map_collect(|&a, &n, &d| S::c((a + n / d).clamp(0.0, 1.0)));
    PredictionGrid::new(probs)
}

/// Youden-optimal cutoff for the rule `p >= t`, nearest to 0.5 among ties.
pub fn select_threshold(probs: &[f64], labels: &[bool]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape("threshold inputs", probs.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("threshold probabilities".into()));
    }
    let mut pairs: Vec<(f64, bool)> = probs.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    // descending sweep: cutoff at each distinct value admits everything >= it
    let mut cuts: Vec<(f64, f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let j = tp as f64 / pos as f64 - fp as f64 / neg as f64;
        let lower = pairs.get(i).map_or(0.0, |p| p.0);
        cuts.push((j, lower, v));
    }
    let best = cuts.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let mut choice: Option<(f64, f64)> = None;
    for &(j, lo, hi) in &cuts {
        if best - j > 1e-12 {
            continue;
        }
        let t = if lo < 0.5 && 0.5 <= hi {
            0.5
        } else if hi < 0.5 {
            hi
        } else {
            (lo + hi) / 2.0
        };
        let d = (t - 0.5).abs();
        if choice.is_none_or(|(_, bd)| d < bd) {
            choice = Some((t, d));
        }
    }
    Ok(choice.expect("at least one cut").0.clamp(1e-9, 1.0))
}

/// Youden's J of the rule `p >= t`.
pub fn youden_j(probs: &[f64], labels: &[bool], t: f64) -> f64 {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    let tp = probs.iter().zip(labels).filter(|(&p, &l)| l && p >= t).count() as f64;
    let fp = probs.iter().zip(labels).filter(|(&p, &l)| !l && p >= t).count() as f64;
    tp / pos - fp / neg
}

/// Positive iff `p >= threshold`.
pub fn binarize<S: Scalar>(probs: ArrayView2<'_, S>, threshold: f64) -> Result<LabelGrid> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid("threshold", format!("{threshold} outside (0, 1]")));
    }
    let (h, w) = probs.dim();
    Ok(LabelGrid::from_fn(h, w, |r, c| probs[[r, c]].to_f64_lossy() >= threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Constant(f64);

    impl WindowModel<f64> for Constant {
        fn predict_window(&self, w: ArrayView4<'_, f64>) -> Result<Array2<f64>> {
            Ok(Array2::from_elem((w.dim().1, w.dim().2), self.0))
        }
    }

    /// First channel of the first step.
    struct Echo;

    impl WindowModel<f64> for Echo {
        fn predict_window(&self, w: ArrayView4<'_, f64>) -> Result<Array2<f64>> {
            Ok(w.slice(s![0, .., .., 0]).to_owned())
        }
    }

    #[test]
    fn offsets_cover_everything() {
        let plan = BlendPlan::default();
        assert_eq!(plan.offsets(14), vec![0]);
        assert_eq!(plan.offsets(28), vec![0, 7, 14]);
        assert_eq!(plan.offsets(30), vec![0, 7, 14, 16]);
        assert!(plan.offsets(13).is_empty());
    }

    #[test]
    fn constant_model_is_invariant() {
        let scene = Array4::<f64>::zeros((2, 31, 29, 1));
        let out = predict_scene(scene.view(), &Constant(0.7), &BlendPlan::default()).unwrap();
        assert!(out.probs().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn single_window_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = Array4::from_shape_fn((1, 14, 14, 1), |_| rng.random_range(0.0..1.0));
        let out = predict_scene(scene.view(), &Echo, &BlendPlan::default()).unwrap();
        for (a, b) in out.probs().iter().zip(scene.slice(s![0, .., .., 0]).iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(predict_scene(Array4::<f64>::zeros((1, 13, 20, 1)).view(), &Echo, &BlendPlan::default()).is_err());
    }

    #[test]
    fn threshold_cases() {
        let probs = [0.1, 0.1, 0.9, 0.9];
        let labels = [false, false, true, true];
        assert_eq!(select_threshold(&probs, &labels).unwrap(), 0.5);
        assert!(matches!(select_threshold(&probs, &[true; 4]), Err(Error::SingleClass)));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let labels: Vec<bool> = (0..200).map(|_| rng.random_bool(0.3)).collect();
            let probs: Vec<f64> = labels
                .iter()
                .map(|&l| rng.random_range(0.0..0.7) + if l { 0.3 } else { 0.0 })
                .collect();
            let t = select_threshold(&probs, &labels).unwrap();
            let best = probs
                .iter()
                .copied()
                .chain([0.0, 1.0 + 1e-9])
                .map(|c| youden_j(&probs, &labels, c))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((youden_j(&probs, &labels, t) - best).abs() < 1e-12);
        }
    }

    #[test]
    fn binarize_rule() {
        let p = Array2::from_shape_vec((1, 3), vec![0.4, 0.5, 0.6]).unwrap();
        let g = binarize(p.view(), 0.5).unwrap();
        assert_eq!(g.values().iter().copied().collect::<Vec<_>>(), vec![0, 1, 1]);
        let near_one = 1.0 - 1e-8;
        let g = binarize(Array2::from_elem((2, 2), 0.9999999).view(), near_one).unwrap();
        assert_eq!(g.positives(), 0);
        assert!(binarize(p.view(), 0.0).is_err());
    }
}
