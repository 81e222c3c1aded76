//! Weighted, label-smoothed cross entropy mixed with a boundary loss.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::distance::distance_to;
use crate::error::{Error, Result};
use crate::raster::LabelGrid;
use crate::scalar::{sigmoid, Scalar};

pub const SMOOTHING: f64 = 0.1;
pub const PROB_FLOOR: f64 = 1e-7;
pub const ALPHA_STEP: f64 = 0.01;
pub const ALPHA_MAX: f64 = 0.5;
pub const EFFECTIVE_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub bl: f64,
    pub alpha: f64,
    pub total: f64,
    pub class_weights: [f64; 2],
}

/// Mixing weight of the boundary term at an epoch.
pub fn alpha_schedule(epoch: i64) -> Result<f64> {
    if epoch < 0 {
        return Err(Error::invalid("epoch", format!("{epoch} is negative")));
    }
    Ok((ALPHA_STEP * epoch as f64).min(ALPHA_MAX))
}

/// Effective-number class weights `(negative, positive)` with mean 1.
///
/// A class with no samples is treated as having one.
pub fn class_weights(counts: [u64; 2], beta: f64) -> Result<[f64; 2]> {
    if counts == [0, 0] {
        return Err(Error::Empty("label counts".into()));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::invalid("beta", format!("{beta} outside [0, 1)")));
    }
    let raw = counts.map(|n| {
        let n = n.max(1) as f64;
        (1.0 - beta) / (1.0 - beta.powf(n))
    });
    let mean = (raw[0] + raw[1]) / 2.0;
    Ok(raw.map(|w| w / mean))
}

/// Weights from every label grid of a training set.
pub fn dataset_class_weights<'a>(labels: impl IntoIterator<Item = &'a LabelGrid>) -> Result<[f64; 2]> {
    let mut counts = [0u64; 2];
    for l in labels {
        let pos = l.positives() as u64;
        let (h, w) = l.dim();
        counts[1] += pos;
        counts[0] += (h * w) as u64 - pos;
    }
    class_weights(counts, EFFECTIVE_BETA)
}

/// Signed distance to the label boundary: negative inside positives
/// (distance to the nearest negative), positive outside (distance to the
/// nearest positive). Constant -1 / +1 for all-positive / all-negative grids.
pub fn signed_distance_map(label: &LabelGrid) -> Array2<f64> {
    let (h, w) = label.dim();
    let pos = label.values().mapv(|v| v != 0);
    let n_pos = label.positives();
    if n_pos == 0 {
        return Array2::from_elem((h, w), 1.0);
    }
    if n_pos == h * w {
        return Array2::from_elem((h, w), -1.0);
    }
    let to_pos = distance_to(pos.view());
    let neg = pos.mapv(|v| !v);
    let to_neg = distance_to(neg.view());
    Zip::from(&pos)
        .and(&to_pos)
        .and(&to_neg)
        .map_collect(|&p, &dp, &dn| if p { -dn } else { dp })
}

fn smoothed_target(y: bool) -> f64 {
    if y {
        1.0 - SMOOTHING / 2.0
    } else {
        SMOOTHING / 2.0
    }
}

fn check_shapes<S>(p: &ArrayView2<'_, S>, y: &LabelGrid) -> Result<()> {
    if p.dim() != y.dim() {
        return Err(Error::shape(
            "predictions vs labels",
            format!("{:?}", y.dim()),
            format!("{:?}", p.dim()),
        ));
    }
    Ok(())
}

fn pixel_ce(p: f64, y: bool, weights: [f64; 2]) -> f64 {
    let t = smoothed_target(y);
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    -weights[y as usize] * (t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// Mean over pixels of the class-weighted cross entropy against smoothed targets.
pub fn smoothed_weighted_ce<S: Scalar>(p: ArrayView2<'_, S>, y: &LabelGrid, weights: [f64; 2]) -> Result<f64> {
    check_shapes(&p, y)?;
    let n = p.len() as f64;
    Ok(Zip::from(&p)
        .and(&y.values())
        .fold(0.0, |acc, &pv, &yv| acc + pixel_ce(pv.to_f64_lossy(), yv != 0, weights))
        / n)
}

/// Cross entropy with hard targets and predictions clipped to `[0.1, 0.9]`.
/// Evaluation only: the clipped region has zero gradient.
pub fn clipped_ce<S: Scalar>(p: ArrayView2<'_, S>, y: &LabelGrid, weights: [f64; 2]) -> Result<f64> {
    check_shapes(&p, y)?;
    let n = p.len() as f64;
    Ok(Zip::from(&p).and(&y.values()).fold(0.0, |acc, &pv, &yv| {
        let pc = pv.to_f64_lossy().clamp(0.1, 0.9);
        let l = if yv != 0 { -pc.ln() } else { -(1.0 - pc).ln() };
        acc + weights[(yv != 0) as usize] * l
    }) / n)
}

/// Mean of `phi * p` over pixels.
pub fn boundary_loss_with_map<S: Scalar>(p: ArrayView2<'_, S>, phi: ArrayView2<'_, f64>) -> Result<f64> {
    if p.dim() != phi.dim() {
        return Err(Error::shape(
            "predictions vs distance map",
            format!("{:?}", phi.dim()),
            format!("{:?}", p.dim()),
        ));
    }
    let n = p.len() as f64;
    Ok(Zip::from(&p).and(&phi).fold(0.0, |acc, &pv, &f| acc + f * pv.to_f64_lossy()) / n)
}

pub fn boundary_loss<S: Scalar>(p: ArrayView2<'_, S>, y: &LabelGrid) -> Result<f64> {
    check_shapes(&p, y)?;
    boundary_loss_with_map(p, signed_distance_map(y).view())
}

pub fn combined_loss<S: Scalar>(p: ArrayView2<'_, S>, y: &LabelGrid, epoch: i64, weights: [f64; 2]) -> Result<LossTerms> {
    let alpha = alpha_schedule(epoch)?;
    let ce = smoothed_weighted_ce(p, y, weights)?;
    let bl = boundary_loss(p, y)?;
    Ok(LossTerms {
        ce,
        bl,
        alpha,
        total: (1.0 - alpha) * ce + alpha * bl,
        class_weights: weights,
    })
}

/// Gradient of the combined loss with respect to the probabilities.
pub fn combined_loss_grad<S: Scalar>(
    p: ArrayView2<'_, S>,
    y: &LabelGrid,
    epoch: i64,
    weights: [f64; 2],
) -> Result<Array2<f64>> {
    check_shapes(&p, y)?;
    let alpha = alpha_schedule(epoch)?;
    let phi = signed_distance_map(y);
    let n = p.len() as f64;
    Ok(Zip::from(&p).and(&y.values()).and(&phi).map_collect(|&pv, &yv, &f| {
        let pv = pv.to_f64_lossy();
        let t = smoothed_target(yv != 0);
        let dce = if pv > PROB_FLOOR && pv < 1.0 - PROB_FLOOR {
            weights[(yv != 0) as usize] * (pv - t) / (pv * (1.0 - pv))
        } else {
            0.0
        };
        ((1.0 - alpha) * dce + alpha * f) / n
    }))
}

/// Loss terms and `dLoss/dlogit` for one sample, scaled by `scale`.
///
/// `phi` is the sample's signed distance map.
pub fn loss_from_logits<S: Scalar>(
    logits: ArrayView2<'_, S>,
    y: &LabelGrid,
    phi: ArrayView2<'_, f64>,
    alpha: f64,
    weights: [f64; 2],
    scale: f64,
) -> Result<(LossTerms, Array2<S>)> {
    check_shapes(&logits, y)?;
    let p = logits.mapv(sigmoid);
    let ce = smoothed_weighted_ce(p.view(), y, weights)?;
    let bl = boundary_loss_with_map(p.view(), phi)?;
    let n = p.len() as f64;
    let grad = Zip::from(&p).and(&y.values()).and(&phi).map_collect(|&pv, &yv, &f| {
        let pv = pv.to_f64_lossy();
        let t = smoothed_target(yv != 0);
        let dce = if pv > PROB_FLOOR && pv < 1.0 - PROB_FLOOR {
            weights[(yv != 0) as usize] * (pv - t)
        } else {
            0.0
        };
        let dbl = f * pv * (1.0 - pv);
        S::c(scale * ((1.0 - alpha) * dce + alpha * dbl) / n)
    });
    Ok((
        LossTerms {
            ce,
            bl,
            alpha,
            total: (1.0 - alpha) * ce + alpha * bl,
            class_weights: weights,
        },
        grad,
    ))
}
