//! One-pixel tolerant accuracy metrics and plot-level cover statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::LabelGrid;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for Confusion {
    type Output = Confusion;

    fn add(self, o: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl std::iter::Sum for Confusion {
    fn sum<I: Iterator<Item = Confusion>>(iter: I) -> Self {
        iter.fold(Confusion::default(), |a, b| a + b)
    }
}

fn check_pair(y: &LabelGrid, pred: &LabelGrid) -> Result<()> {
    if y.dim() != pred.dim() {
        return Err(Error::shape(
            "prediction vs labels",
            format!("{:?}", y.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    Ok(())
}

fn any_in_neighborhood(g: &LabelGrid, r: usize, c: usize) -> bool {
    let (h, w) = g.dim();
    (r.saturating_sub(1)..(r + 2).min(h)).any(|rr| (c.saturating_sub(1)..(c + 2).min(w)).any(|cc| g.get(rr, cc)))
}

/// Confusion counts where a match may sit anywhere in the 3x3 neighborhood.
pub fn tolerant_confusion(y: &LabelGrid, pred: &LabelGrid) -> Result<Confusion> {
    check_pair(y, pred)?;
    let (h, w) = y.dim();
    let mut m = Confusion::default();
    for r in 0..h {
        for c in 0..w {
            let (yv, pv) = (y.get(r, c), pred.get(r, c));
            if yv {
                if any_in_neighborhood(pred, r, c) {
                    m.tp += 1;
                } else {
                    m.fn_ += 1;
                }
            }
            if pv && !any_in_neighborhood(y, r, c) {
                m.fp += 1;
            }
            if !yv && !pv {
                m.tn += 1;
            }
        }
    }
    Ok(m)
}

/// Per-pixel confusion without tolerance.
pub fn strict_confusion(y: &LabelGrid, pred: &LabelGrid) -> Result<Confusion> {
    check_pair(y, pred)?;
    let mut m = Confusion::default();
    for (&a, &b) in y.values().iter().zip(pred.values().iter()) {
        match (a != 0, b != 0) {
            (true, true) => m.tp += 1,
            (false, true) => m.fp += 1,
            (true, false) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    Ok(m)
}

/// `None` marks an undefined ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub ua: Option<f64>,
    pub pa: Option<f64>,
    pub oa: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn users_producers(c: &Confusion) -> (Option<f64>, Option<f64>) {
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

pub fn accuracy(c: &Confusion) -> Accuracy {
    let (ua, pa) = users_producers(c);
    Accuracy {
        ua,
        pa,
        oa: ratio(c.tp + c.tn, c.total()),
    }
}

pub fn pearson_corr(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, seed: u64) -> Option<[f64; 2]> {
    if values.is_empty() || resamples == 0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let pick = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Some([pick(0.025), pick(0.975)])
}

pub fn cover_decile(cover: f64) -> usize {
    ((cover * 10.0).floor().max(0.0) as usize).min(9)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverError {
    pub mean: Option<f64>,
    pub ci95: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecileReport {
    pub decile: usize,
    pub cover_range: [f64; 2],
    pub plots: usize,
    pub ua: Option<f64>,
    pub pa: Option<f64>,
    pub confusion: Confusion,
    pub cover_error: CoverError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub ua: Option<f64>,
    pub pa: Option<f64>,
    pub oa: Option<f64>,
    pub confusion: Confusion,
    pub plots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub overall: Overall,
    pub per_decile: Vec<DecileReport>,
    pub cover_error: CoverError,
    pub pearson: Option<f64>,
}

/// Label and predicted cover per plot.
pub fn plot_covers(pairs: &[(LabelGrid, LabelGrid)]) -> Vec<(f64, f64)> {
    pairs.iter().map(|(y, p)| (y.cover(), p.cover())).collect()
}

/// Full report over `(label, prediction)` pairs.
pub fn evaluate_plots(pairs: &[(LabelGrid, LabelGrid)], seed: u64) -> Result<EvaluationReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation plots".into()));
    }
    let confusions: Vec<Confusion> = pairs
        .iter()
        .map(|(y, p)| tolerant_confusion(y, p))
        .collect::<Result<_>>()?;
    let covers = plot_covers(pairs);
    let errors: Vec<f64> = covers.iter().map(|(a, b)| (a - b).abs()).collect();
    let total: Confusion = confusions.iter().copied().sum();
    let acc = accuracy(&total);
    let mut per_decile = Vec::new();
    for d in 0..10 {
        let idx: Vec<usize> = (0..pairs.len()).filter(|&i| cover_decile(covers[i].0) == d).collect();
        if idx.is_empty() {
            continue;
        }
        let conf: Confusion = idx.iter().map(|&i| confusions[i]).sum();
        let (ua, pa) = users_producers(&conf);
        let errs: Vec<f64> = idx.iter().map(|&i| errors[i]).collect();
        per_decile.push(DecileReport {
            decile: d,
            cover_range: [d as f64 / 10.0, (d + 1) as f64 / 10.0],
            plots: idx.len(),
            ua,
            pa,
            confusion: conf,
            cover_error: CoverError {
                mean: Some(errs.iter().sum::<f64>() / errs.len() as f64),
                ci95: bootstrap_mean_ci(&errs, BOOTSTRAP_RESAMPLES, seed.wrapping_add(d as u64 + 1)),
            },
        });
    }
    let (label_cover, pred_cover): (Vec<f64>, Vec<f64>) = covers.into_iter().unzip();
    Ok(EvaluationReport {
        overall: Overall {
            ua: acc.ua,
            pa: acc.pa,
            oa: acc.oa,
            confusion: total,
            plots: pairs.len(),
        },
        per_decile,
        cover_error: CoverError {
            mean: Some(errors.iter().sum::<f64>() / errors.len() as f64),
            ci95: bootstrap_mean_ci(&errors, BOOTSTRAP_RESAMPLES, seed),
        },
        pearson: pearson_corr(&label_cover, &pred_cover),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn single(h: usize, w: usize, r: usize, c: usize) -> LabelGrid {
        LabelGrid::from_fn(h, w, |a, b| a == r && b == c)
    }

    #[test]
    fn neighbor_counts_as_match() {
        let m = tolerant_confusion(&single(3, 3, 0, 0), &single(3, 3, 1, 1)).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 0));
        let m = tolerant_confusion(&single(3, 3, 0, 0), &single(3, 3, 2, 2)).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn paper_counts() {
        let c = Confusion {
            tp: 74304,
            fp: 3599,
            fn_: 4802,
            tn: 133287,
        };
        let (ua, pa) = users_producers(&c);
        assert_eq!(format!("{:.3}", ua.unwrap()), "0.954");
        assert_eq!(format!("{:.3}", pa.unwrap()), "0.939");
        assert_eq!(format!("{:.3}", accuracy(&c).oa.unwrap()), "0.961");
    }

    #[test]
    fn undefined_ratios_are_flagged() {
        let (ua, pa) = users_producers(&Confusion::default());
        assert!(ua.is_none() && pa.is_none());
        let g = LabelGrid::from_fn(4, 4, |r, c| (r + c) % 3 == 0);
        let (ua, pa) = users_producers(&tolerant_confusion(&g, &g).unwrap());
        assert_eq!((ua, pa), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn pearson_cases() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(pearson_corr(&x, &[2.0, 4.0, 6.0, 8.0]).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson_corr(&x, &[-1.0, -2.0, -3.0, -4.0]).unwrap(), -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pearson_corr(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8, epsilon = 1e-12);
        assert!(pearson_corr(&x, &[1.0; 4]).is_none());
    }

    #[test]
    fn cover_statistics() {
        let y = LabelGrid::from_fn(14, 14, |r, c| r < 7 && c < 7);
        assert_eq!(y.cover(), 0.25);
        let pairs = vec![(y.clone(), y.clone())];
        let rep = evaluate_plots(&pairs, 1).unwrap();
        assert_eq!(rep.cover_error.mean, Some(0.0));
        assert!(rep.per_decile.iter().all(|d| d.cover_error.mean == Some(0.0)));

        let half = LabelGrid::from_fn(14, 14, |r, _| r < 7);
        let forty = LabelGrid::from_fn(14, 14, |r, c| r * 14 + c < 78);
        let label_cover = half.cover();
        let rep = evaluate_plots(&[(half, forty.clone())], 1).unwrap();
        assert_abs_diff_eq!(rep.cover_error.mean.unwrap(), label_cover - forty.cover(), epsilon = 1e-12);
        assert_eq!(rep.per_decile[0].decile, 5);
        assert!(evaluate_plots(&[], 1).is_err());
    }

    #[test]
    fn bootstrap_is_seeded() {
        let v: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let a = bootstrap_mean_ci(&v, 1000, 5).unwrap();
        assert_eq!(a, bootstrap_mean_ci(&v, 1000, 5).unwrap());
        let mean = v.iter().sum::<f64>() / 30.0;
        assert!(a[0] <= mean && mean <= a[1]);
    }

    fn grid() -> impl Strategy<Value = LabelGrid> {
        proptest::collection::vec(proptest::bool::weighted(0.2), 14 * 14)
            .prop_map(|v| LabelGrid::from_fn(14, 14, |r, c| v[r * 14 + c]))
    }

    proptest! {
        #[test]
        fn swap_exchanges_errors(y in grid(), p in grid()) {
            let a = tolerant_confusion(&y, &p).unwrap();
            let b = tolerant_confusion(&p, &y).unwrap();
            prop_assert_eq!(a.fp, b.fn_);
            prop_assert_eq!(a.fn_, b.fp);
            prop_assert_eq!(a.tp + a.fn_, y.positives() as u64);
        }
    }
}
