//! Canonical data model: channel layout, time-series stacks, masks, labels and
//! input normalization.

use ndarray::{s, Array, Array2, Array3, Array4, ArrayView2, ArrayView4, Axis, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of biweekly composites per year.
pub const TIME_STEPS: usize = 24;
/// Days between consecutive composites.
pub const STEP_DAYS: u32 = 15;
/// Day of year of the first composite.
pub const FIRST_DAY: u32 = 1;
/// Plot edge length in 10 m pixels (140 m).
pub const PLOT_SIZE: usize = 14;
/// Ground sampling distance in meters.
pub const PIXEL_METERS: f64 = 10.0;

/// Input channels in network order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    B2,
    B3,
    B4,
    B5,
    B6,
    B7,
    B8,
    B8A,
    B11,
    B12,
    Evi,
    Msavi2,
    Bi,
    Vv,
    Vh,
    Slope,
}

impl Channel {
    pub const ALL: [Channel; 16] = [
        Channel::B2,
        Channel::B3,
        Channel::B4,
        Channel::B5,
        Channel::B6,
        Channel::B7,
        Channel::B8,
        Channel::B8A,
        Channel::B11,
        Channel::B12,
        Channel::Evi,
        Channel::Msavi2,
        Channel::Bi,
        Channel::Vv,
        Channel::Vh,
        Channel::Slope,
    ];

    pub const fn index(self) -> usize {
        self as usize
    }

    pub const fn name(self) -> &'static str {
        match self {
            Channel::B2 => "B2",
            Channel::B3 => "B3",
            Channel::B4 => "B4",
            Channel::B5 => "B5",
            Channel::B6 => "B6",
            Channel::B7 => "B7",
            Channel::B8 => "B8",
            Channel::B8A => "B8A",
            Channel::B11 => "B11",
            Channel::B12 => "B12",
            Channel::Evi => "EVI",
            Channel::Msavi2 => "MSAVI2",
            Channel::Bi => "BI",
            Channel::Vv => "VV",
            Channel::Vh => "VH",
            Channel::Slope => "SLOPE",
        }
    }

    pub fn from_name(name: &str) -> Option<Channel> {
        Channel::ALL.iter().copied().find(|c| c.name() == name)
    }
}

/// Fixed channel layout: 10 optical bands, 3 indices, 2 radar bands, slope.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelLayout;

impl ChannelLayout {
    pub const COUNT: usize = 16;
    pub const OPTICAL: std::ops::Range<usize> = 0..10;
    pub const INDICES: std::ops::Range<usize> = 10..13;
    pub const RADAR: std::ops::Range<usize> = 13..15;
    pub const SLOPE: usize = 15;

    pub fn names() -> Vec<&'static str> {
        Channel::ALL.iter().map(|c| c.name()).collect()
    }

    /// Checks a serialized channel list against the canonical order.
    pub fn validate_names<N: AsRef<str>>(names: &[N]) -> Result<()> {
        let expected = Self::names();
        let got: Vec<&str> = names.iter().map(|n| n.as_ref()).collect();
        if got != expected {
            return Err(Error::shape("channel list", expected.join(","), got.join(",")));
        }
        Ok(())
    }
}

/// Day-of-year of every composite step: 1, 16, ..., 346.
pub fn step_days() -> Vec<u32> {
    (0..TIME_STEPS as u32).map(|k| FIRST_DAY + k * STEP_DAYS).collect()
}

/// Normalized `[T, H, W, 16]` input stack for one plot or scene window.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesStack<S> {
    data: Array4<S>,
    timestamps: Vec<u32>,
    plot_id: String,
}

impl<S: Scalar> TimeSeriesStack<S> {
    /// Validates every stack invariant; use [`build_stack`] to assemble from parts.
    pub fn new(data: Array4<S>, timestamps: Vec<u32>, plot_id: impl Into<String>) -> Result<Self> {
        let (t, _, _, c) = data.dim();
        if t != TIME_STEPS {
            return Err(Error::TimeSteps { expected: TIME_STEPS, got: t });
        }
        if c != ChannelLayout::COUNT {
            return Err(Error::shape("stack channels", ChannelLayout::COUNT, c));
        }
        if timestamps.len() != t {
            return Err(Error::shape("timestamps", t, timestamps.len()));
        }
        if timestamps.windows(2).any(|w| w[1] != w[0] + STEP_DAYS) {
            return Err(Error::invalid("timestamps", "must be spaced 15 days apart"));
        }
        for v in data.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite("stack".into()));
            }
            if *v < S::zero() || *v > S::one() {
                return Err(Error::invalid("stack", format!("value {v} outside [0, 1]")));
            }
        }
        let slope = data.index_axis(Axis(3), ChannelLayout::SLOPE);
        let first = slope.index_axis(Axis(0), 0);
        for step in slope.axis_iter(Axis(0)).skip(1) {
            if step != first {
                return Err(Error::invalid("stack", "slope channel varies over time"));
            }
        }
        Ok(Self {
            data,
            timestamps,
            plot_id: plot_id.into(),
        })
    }

    pub fn data(&self) -> ArrayView4<'_, S> {
        self.data.view()
    }

    pub fn into_data(self) -> Array4<S> {
        self.data
    }

    pub fn timestamps(&self) -> &[u32] {
        &self.timestamps
    }

    pub fn plot_id(&self) -> &str {
        &self.plot_id
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Spatial crop `[row0..row0+h, col0..col0+w]` over all steps and channels.
    pub fn window(&self, row0: usize, col0: usize, h: usize, w: usize) -> ArrayView4<'_, S> {
        self.data.slice(s![.., row0..row0 + h, col0..col0 + w, ..])
    }

    /// Keeps every `stride`-th time step; used by reduced-T network configs.
    pub fn subsample_time(data: ArrayView4<'_, S>, steps: usize) -> Result<Array4<S>> {
        let t = data.dim().0;
        if steps == 0 || steps > t || t % steps != 0 {
            return Err(Error::invalid("time_steps", format!("{steps} does not divide {t}")));
        }
        let stride = t / steps;
        Ok(data.slice(s![..;stride, .., .., ..]).to_owned())
    }

    /// Little-endian `f32` bytes in `[T][H][W][C]` order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in self.data.iter() {
            out.extend_from_slice(&v.to_le_f32_bytes());
        }
        out
    }

    pub fn from_le_bytes(
        bytes: &[u8],
        height: usize,
        width: usize,
        timestamps: Vec<u32>,
        plot_id: impl Into<String>,
    ) -> Result<Self> {
        let n = TIME_STEPS * height * width * ChannelLayout::COUNT;
        if bytes.len() != n * 4 {
            return Err(Error::shape("stack bytes", n * 4, bytes.len()));
        }
        let values: Vec<S> = bytes
            .chunks_exact(4)
            .map(|b| S::c(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let data = Array4::from_shape_vec((TIME_STEPS, height, width, ChannelLayout::COUNT), values)
            .map_err(|e| Error::shape("stack bytes", n, e))?;
        Self::new(data, timestamps, plot_id)
    }
}

/// Cloud or shadow flags per step and pixel (`true` = contaminated).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QualityMask {
    pub contaminated: Array3<bool>,
}

impl QualityMask {
    pub fn clean(t: usize, h: usize, w: usize) -> Self {
        Self {
            contaminated: Array3::from_elem((t, h, w), false),
        }
    }

    pub fn check_matches(&self, t: usize, h: usize, w: usize) -> Result<()> {
        if self.contaminated.dim() != (t, h, w) {
            return Err(Error::shape("quality mask", format!("{:?}", (t, h, w)), format!("{:?}", self.contaminated.dim())));
        }
        Ok(())
    }
}

/// Binary tree-presence labels at 10 m.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    values: Array2<u8>,
}

impl LabelGrid {
    pub fn new(values: Array2<u8>) -> Result<Self> {
        if values.iter().any(|&v| v > 1) {
            return Err(Error::invalid("labels", "values must be 0 or 1"));
        }
        Ok(Self { values })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            values: Array2::zeros((h, w)),
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            values: Array2::from_shape_fn((h, w), |(r, c)| f(r, c) as u8),
        }
    }

    pub fn values(&self) -> ArrayView2<'_, u8> {
        self.values.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.values[[r, c]] == 1
    }

    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Fraction of positive cells.
    pub fn cover(&self) -> f64 {
        self.positives() as f64 / self.values.len().max(1) as f64
    }

    pub fn has_both_classes(&self) -> bool {
        let p = self.positives();
        p > 0 && p < self.values.len()
    }
}

/// Per-pixel tree probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid<S> {
    probs: Array2<S>,
}

impl<S: Scalar> PredictionGrid<S> {
    pub fn new(probs: Array2<S>) -> Result<Self> {
        for p in probs.iter() {
            if !p.is_finite() {
                return Err(Error::NonFinite("predictions".into()));
            }
            if *p < S::zero() || *p > S::one() {
                return Err(Error::invalid("predictions", format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> ArrayView2<'_, S> {
        self.probs.view()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.probs.dim()
    }

    pub fn into_inner(self) -> Array2<S> {
        self.probs
    }
}

/// A labeled training or test plot.
#[derive(Debug, Clone)]
pub struct PlotSample<S> {
    pub stack: TimeSeriesStack<S>,
    pub label: LabelGrid,
    pub cover: f64,
}

impl<S: Scalar> PlotSample<S> {
    pub fn new(stack: TimeSeriesStack<S>, label: LabelGrid) -> Result<Self> {
        let (h, w) = label.dim();
        if (stack.height(), stack.width()) != (h, w) {
            return Err(Error::shape(
                "label",
                format!("{}x{}", stack.height(), stack.width()),
                format!("{h}x{w}"),
            ));
        }
        let cover = label.cover();
        Ok(Self { stack, label, cover })
    }
}

/// Assembles a stack from normalized optical, radar, index and slope inputs.
pub fn build_stack<S: Scalar>(
    s2: ArrayView4<'_, S>,
    s1: ArrayView4<'_, S>,
    indices: ArrayView4<'_, S>,
    slope: ArrayView2<'_, S>,
    timestamps: Vec<u32>,
    plot_id: impl Into<String>,
) -> Result<TimeSeriesStack<S>> {
    let (t, h, w, c) = s2.dim();
    if c != 10 {
        return Err(Error::shape("s2", "10 bands", c));
    }
    if t != TIME_STEPS {
        return Err(Error::TimeSteps { expected: TIME_STEPS, got: t });
    }
    let check = |name: &str, got: (usize, usize, usize, usize), bands: usize| -> Result<()> {
        if got != (t, h, w, bands) {
            return Err(Error::shape(name, format!("{:?}", (t, h, w, bands)), format!("{got:?}")));
        }
        Ok(())
    };
    check("s1", s1.dim(), 2)?;
    check("indices", indices.dim(), 3)?;
    if slope.dim() != (h, w) {
        return Err(Error::shape("slope", format!("{:?}", (h, w)), format!("{:?}", slope.dim())));
    }

    let mut data = Array4::zeros((t, h, w, ChannelLayout::COUNT));
    data.slice_mut(s![.., .., .., ChannelLayout::OPTICAL]).assign(&s2);
    data.slice_mut(s![.., .., .., ChannelLayout::INDICES]).assign(&indices);
    data.slice_mut(s![.., .., .., ChannelLayout::RADAR]).assign(&s1);
    for mut step in data.axis_iter_mut(Axis(0)) {
        step.index_axis_mut(Axis(2), ChannelLayout::SLOPE).assign(&slope);
    }
    TimeSeriesStack::new(data, timestamps, plot_id)
}

/// Sensor ranges mapped onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationRanges {
    /// Reflectance scale (L2A digital numbers).
    pub reflectance_scale: f64,
    /// Backscatter floor in dB; 0 dB maps to 1.
    pub backscatter_floor_db: f64,
    /// Slope percent mapped to 1.
    pub slope_max_percent: f64,
}

impl Default for NormalizationRanges {
    fn default() -> Self {
        Self {
            reflectance_scale: 10_000.0,
            backscatter_floor_db: -25.0,
            slope_max_percent: 100.0,
        }
    }
}

fn affine_clamped<S: Scalar, D: Dimension>(raw: &Array<S, D>, what: &str, offset: f64, scale: f64) -> Result<Array<S, D>> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    let (offset, scale) = (S::c(offset), S::c(scale));
    Ok(raw.mapv(|v| ((v + offset) / scale).max(S::zero()).min(S::one())))
}

impl NormalizationRanges {
    pub fn s2<S: Scalar, D: Dimension>(&self, raw: &Array<S, D>) -> Result<Array<S, D>> {
        affine_clamped(raw, "s2 reflectance", 0.0, self.reflectance_scale)
    }

    pub fn s1<S: Scalar, D: Dimension>(&self, raw_db: &Array<S, D>) -> Result<Array<S, D>> {
        let floor = self.backscatter_floor_db;
        affine_clamped(raw_db, "s1 backscatter", -floor, -floor)
    }

    pub fn slope<S: Scalar, D: Dimension>(&self, percent: &Array<S, D>) -> Result<Array<S, D>> {
        affine_clamped(percent, "slope", 0.0, self.slope_max_percent)
    }
}

/// Normalizes raw optical, radar and slope inputs with the default ranges.
pub fn normalize_channels<S: Scalar, D1: Dimension, D2: Dimension, D3: Dimension>(
    raw_s2: &Array<S, D1>,
    raw_s1_db: &Array<S, D2>,
    raw_slope_percent: &Array<S, D3>,
) -> Result<(Array<S, D1>, Array<S, D2>, Array<S, D3>)> {
    let r = NormalizationRanges::default();
    Ok((r.s2(raw_s2)?, r.s1(raw_s1_db)?, r.slope(raw_slope_percent)?))
}

/// True when every value of `a` is bit-identical to `b`.
pub fn bit_identical<S: Scalar, D: Dimension>(a: &Array<S, D>, b: &Array<S, D>) -> bool {
    a.shape() == b.shape() && Zip::from(a).and(b).all(|x, y| x.to_f64_lossy().to_bits() == y.to_f64_lossy().to_bits())
}
