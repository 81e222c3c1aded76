//! Synthetic Sentinel-like plots with known tree masks.
//!
//! Trees follow a mid-season hump in vegetation activity, backgrounds follow
//! a trend with the same temporal mean, so single dates and temporal means
//! carry little signal while the shape of the season separates the classes.

mod baseline;

pub use baseline::{temporal_means, LogisticBaseline, LogisticConfig};

use std::f64::consts::PI;
use std::str::FromStr;

use ndarray::{Array2, Array3, Array4};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::mix_seed;
use crate::preprocess::{preprocess_scene, Acquisition, PreprocessConfig, RadarAcquisition, RawScene};
use crate::raster::{step_days, LabelGrid, NormalizationRanges, PlotSample, PLOT_SIZE, TIME_STEPS};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    /// Activity rising through the season.
    Cropland,
    /// Flat activity.
    Bare,
    /// Activity falling through the season.
    Grass,
}

impl Background {
    pub const ALL: [Background; 3] = [Background::Cropland, Background::Bare, Background::Grass];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub cover_target: f64,
    pub radius_min: usize,
    pub radius_max: usize,
    /// Peak-to-mean amplitude of the tree activity curve.
    pub tree_amplitude: f64,
    pub background: Background,
    /// Fraction of acquisitions fully covered by cloud.
    pub cloud_gap_fraction: f64,
    /// Standard deviation of optical reflectance noise.
    pub noise_sigma: f64,
    pub size: usize,
    pub max_trees: usize,
    pub max_attempts: usize,
    pub cover_tolerance: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cover_target: 0.3,
            radius_min: 1,
            radius_max: 2,
            tree_amplitude: 0.5,
            background: Background::Cropland,
            cloud_gap_fraction: 0.25,
            noise_sigma: 0.02,
            size: PLOT_SIZE,
            max_trees: 60,
            max_attempts: 25,
            cover_tolerance: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cover_target) {
            return Err(Error::invalid("cover_target", format!("{} outside [0, 1]", self.cover_target)));
        }
        if self.radius_min == 0 || self.radius_min > self.radius_max {
            return Err(Error::invalid(
                "radius",
                format!("range {}..={} is empty or zero", self.radius_min, self.radius_max),
            ));
        }
        if !(0.0..=0.75).contains(&self.cloud_gap_fraction) {
            return Err(Error::invalid(
                "cloud_gap_fraction",
                format!("{} outside [0, 0.75]", self.cloud_gap_fraction),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma", format!("{}", self.noise_sigma)));
        }
        if !(self.tree_amplitude >= 0.0 && self.tree_amplitude <= 1.0) {
            return Err(Error::invalid("tree_amplitude", format!("{} outside [0, 1]", self.tree_amplitude)));
        }
        if self.size < 3 {
            return Err(Error::invalid("size", format!("{} below 3", self.size)));
        }
        if self.max_attempts == 0 {
            return Err(Error::invalid("max_attempts", "must be positive"));
        }
        Ok(())
    }
}

/// A generated plot: the preprocessed sample, the raw observations it came
/// from and the noise-free optical signal.
#[derive(Debug, Clone)]
pub struct SynthPlot<S> {
    pub sample: PlotSample<S>,
    pub raw: RawScene<S>,
    /// `[24, H, W, 10]` normalized reflectance without noise or clouds.
    pub clean_s2: Array4<f64>,
    pub background: Background,
    pub lat: f64,
    pub lon: f64,
}

/// Baseline reflectance and activity gain per optical band, B2 to B12.
const BAND_BASE: [f64; 10] = [0.06, 0.09, 0.10, 0.13, 0.18, 0.20, 0.21, 0.22, 0.24, 0.17];
const BAND_GAIN: [f64; 10] = [-0.05, 0.0, -0.08, 0.03, 0.15, 0.20, 0.25, 0.25, -0.05, -0.08];
/// Extra reflectance over trees in B7, B8 and B8A.
const TREE_NIR_BOOST: f64 = 0.02;
const NIR_BANDS: [usize; 3] = [5, 6, 7];
const MEAN_ACTIVITY: f64 = 0.35;
const CLOUD_REFLECTANCE: f64 = 0.45;

/// Vegetation activity at season fraction `u` in `(0, 1)`.
fn tree_activity(u: f64, amp: f64) -> f64 {
    MEAN_ACTIVITY + amp * ((PI * u).sin() - 2.0 / PI)
}

fn background_activity(bg: Background, u: f64, amp: f64) -> f64 {
    match bg {
        Background::Cropland => MEAN_ACTIVITY + 0.6 * amp * (2.0 * u - 1.0),
        Background::Grass => MEAN_ACTIVITY - 0.6 * amp * (2.0 * u - 1.0),
        Background::Bare => MEAN_ACTIVITY,
    }
}

/// Union of random disks, grown until the target is reached.
fn place_trees(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<LabelGrid> {
    let n = cfg.size;
    let total = (n * n) as f64;
    if cfg.cover_target == 0.0 {
        return Ok(LabelGrid::zeros(n, n));
    }
    for _ in 0..cfg.max_attempts {
        let mut grid = Array2::<u8>::zeros((n, n));
        let mut covered = 0usize;
        for _ in 0..cfg.max_trees {
            let cr = rng.random_range(0..n) as isize;
            let cc = rng.random_range(0..n) as isize;
            let rad = rng.random_range(cfg.radius_min..=cfg.radius_max) as isize;
            for r in (cr - rad).max(0)..=(cr + rad).min(n as isize - 1) {
                for c in (cc - rad).max(0)..=(cc + rad).min(n as isize - 1) {
                    if (r - cr).pow(2) + (c - cc).pow(2) <= rad * rad {
                        let cell = &mut grid[[r as usize, c as usize]];
                        covered += usize::from(*cell == 0);
                        *cell = 1;
                    }
                }
            }
            if covered as f64 / total >= cfg.cover_target {
                break;
            }
        }
        let cover = covered as f64 / total;
        if cover >= cfg.cover_target && cover - cfg.cover_target <= cfg.cover_tolerance {
            return LabelGrid::new(grid);
        }
    }
    Err(Error::InfeasibleCover {
        target: cfg.cover_target,
        attempts: cfg.max_attempts,
    })
}

/// Tree fraction seen by each pixel: 0.6 from itself, 0.1 from each in-bounds
/// 4-neighbor, the remainder from itself.
fn mixed_fraction(label: &LabelGrid) -> Array2<f64> {
    let (h, w) = label.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let own = f64::from(u8::from(label.get(r, c)));
        let mut f = 0.0;
        let mut weight = 0.0;
        for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let (rr, cc) = (r as isize + dr, c as isize + dc);
            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                f += 0.1 * f64::from(u8::from(label.get(rr as usize, cc as usize)));
                weight += 0.1;
            }
        }
        f + (1.0 - weight) * own
    })
}

/// Generates one plot and runs it through preprocessing.
pub fn generate_plot<S: Scalar>(cfg: &SynthConfig) -> Result<SynthPlot<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let label = place_trees(cfg, &mut rng)?;
    let n = cfg.size;
    let frac = mixed_fraction(&label);
    let days = step_days();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    let offset = rng.random_range(-0.02..0.02);
    let level = rng.random_range(-0.04..0.04);
    let amp = cfg.tree_amplitude * rng.random_range(0.85..1.15);
    let pixel_level = Array2::from_shape_fn((n, n), |_| 0.03 * noise.sample(&mut rng));

    let mut clean = Array4::<f64>::zeros((TIME_STEPS, n, n, 10));
    for t in 0..TIME_STEPS {
        let u = (t as f64 + 0.5) / TIME_STEPS as f64;
        let tree = tree_activity(u, amp);
        let bg = background_activity(cfg.background, u, amp);
        for r in 0..n {
            for c in 0..n {
                let f = frac[[r, c]];
                let v = f * tree + (1.0 - f) * bg + level + pixel_level[[r, c]];
                for b in 0..10 {
                    let mut x = BAND_BASE[b] + BAND_GAIN[b] * v + offset;
                    if NIR_BANDS.contains(&b) {
                        x += TREE_NIR_BOOST * f;
                    }
                    clean[[t, r, c, b]] = x.clamp(0.0, 1.0);
                }
            }
        }
    }

    let cloudy_count = (cfg.cloud_gap_fraction * TIME_STEPS as f64).round() as usize;
    let mut cloudy = vec![false; TIME_STEPS];
    // first and last acquisitions stay clear so gaps are always bracketed
    for i in sample(&mut rng, TIME_STEPS - 2, cloudy_count.min(TIME_STEPS - 2)) {
        cloudy[i + 1] = true;
    }

    let mut acquisitions = Vec::with_capacity(TIME_STEPS);
    for (t, &day) in days.iter().enumerate() {
        let mut bands = Array3::<S>::zeros((n, n, 10));
        for r in 0..n {
            for c in 0..n {
                for b in 0..10 {
                    let base = if cloudy[t] { CLOUD_REFLECTANCE } else { clean[[t, r, c, b]] };
                    let x = base + cfg.noise_sigma * noise.sample(&mut rng);
                    bands[[r, c, b]] = S::c(x.clamp(0.0, 1.0));
                }
            }
        }
        let mask = Array2::from_elem((n, n), cloudy[t]);
        acquisitions.push(Acquisition::new(day, bands, mask)?);
    }

    let ranges = NormalizationRanges::default();
    let mut radar = Vec::with_capacity(TIME_STEPS);
    for &day in &days {
        let mut db = Array3::<f64>::zeros((n, n, 2));
        for r in 0..n {
            for c in 0..n {
                let f = frac[[r, c]];
                let spread = 1.5 * (1.0 - f) + 0.5 * f;
                db[[r, c, 0]] = -11.0 + spread * noise.sample(&mut rng);
                db[[r, c, 1]] = -18.0 + spread * noise.sample(&mut rng);
            }
        }
        let grid = ranges.s1(&db)?.mapv(S::c);
        radar.push(RadarAcquisition {
            day_of_year: (day + 3).min(366),
            grid,
        });
    }

    let (gr, gc) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let dem = Array2::from_shape_fn((n, n), |(r, c)| S::c(200.0 + gr * r as f64 + gc * c as f64));
    let lat = rng.random_range(-40.0..40.0);
    let lon = rng.random_range(-180.0..180.0);

    let plot_id = format!("synth-{:016x}", cfg.seed);
    let raw = RawScene {
        plot_id: plot_id.clone(),
        acquisitions,
        radar,
        dem,
    };
    let pre_cfg = PreprocessConfig::default();
    let stack = preprocess_scene(&raw, &pre_cfg)?.to_stack(&plot_id, &pre_cfg)?;
    Ok(SynthPlot {
        sample: PlotSample::new(stack, label)?,
        raw,
        clean_s2: clean,
        background: cfg.background,
        lat,
        lon,
    })
}

/// How cover targets are drawn for a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverMix {
    /// Targets uniform in `[0, 0.9)`.
    Uniform,
    /// Targets uniform in `[0, 0.13)`; realized cover stays below 0.2.
    Low,
    Fixed(f64),
}

impl CoverMix {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            CoverMix::Uniform => rng.random_range(0.0..0.9),
            CoverMix::Low => rng.random_range(0.0..0.13),
            CoverMix::Fixed(v) => v,
        }
    }
}

impl FromStr for CoverMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(CoverMix::Uniform),
            "low" => Ok(CoverMix::Low),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| (0.0..=1.0).contains(v))
                .map(CoverMix::Fixed)
                .ok_or_else(|| Error::invalid("cover_mix", format!("'{other}' is not uniform, low or a cover in [0, 1]"))),
        }
    }
}

/// `n` plots with per-plot seeds, cover targets and background types drawn
/// from `seed`. Other fields come from `template`.
pub fn generate_dataset<S: Scalar>(n: usize, mix: CoverMix, template: &SynthConfig, seed: u64) -> Result<Vec<SynthPlot<S>>> {
    template.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let plot_seed = mix_seed(seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(plot_seed);
            let cfg = SynthConfig {
                seed: plot_seed,
                cover_target: mix.draw(&mut rng),
                background: Background::ALL[rng.random_range(0..Background::ALL.len())],
                ..*template
            };
            generate_plot(&cfg)
        })
        .collect()
}
