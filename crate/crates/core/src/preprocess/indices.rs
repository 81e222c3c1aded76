//! Vegetation and soil indices: EVI, MSAVI2 and the bare soil index.

use ndarray::{s, Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::raster::Channel;
use crate::scalar::Scalar;

/// Which band sits in the EVI denominator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EviVariant {
    /// `2.5 (B8 - B4) / (B5 + 6 B4 - 7.5 B2 + 1)`
    #[default]
    RedEdge,
    /// Conventional EVI with B8 in the denominator.
    Standard,
}

/// Indices are clamped to `[-INDEX_LIMIT, INDEX_LIMIT]` before mapping to `[0, 1]`.
pub const INDEX_LIMIT: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawIndices<S> {
    pub evi: S,
    pub msavi2: S,
    pub bi: S,
}

/// Evaluates the three indices for one pixel's ten optical bands.
pub fn raw_indices<S: Scalar>(bands: &[S], variant: EviVariant) -> RawIndices<S> {
    let b = |c: Channel| bands[c.index()];
    let (b2, b3, b4, b8) = (b(Channel::B2), b(Channel::B3), b(Channel::B4), b(Channel::B8));
    let two = S::c(2.0);

    let denom_band = match variant {
        EviVariant::RedEdge => b(Channel::B5),
        EviVariant::Standard => b8,
    };
    let evi_den = denom_band + S::c(6.0) * b4 - S::c(7.5) * b2 + S::one();
    let evi = if evi_den == S::zero() {
        S::zero()
    } else {
        S::c(2.5) * (b8 - b4) / evi_den
    };

    // (2 B8 + 1)^2 - 8 (B8 - B4) == (2 B8 - 1)^2 + 8 B4 >= 0 for B4 >= 0
    let lead = two * b8 + S::one();
    let radicand = lead * lead - S::c(8.0) * (b8 - b4);
    let msavi2 = (lead - radicand.max(S::zero()).sqrt()) / two;

    let bi_den = b2 + b4 + b3;
    let bi = if bi_den == S::zero() { S::zero() } else { (b2 + b4 - b3) / bi_den };

    RawIndices { evi, msavi2, bi }
}

/// Clamp to `[-1.5, 1.5]` and map affinely onto `[0, 1]`.
pub fn index_to_unit<S: Scalar>(v: S) -> S {
    let lim = S::c(INDEX_LIMIT);
    let v = if v.is_nan() { S::zero() } else { v.max(-lim).min(lim) };
    (v + lim) / (lim + lim)
}

/// `[..., 10]` optical bands to `[..., 3]` network-ready indices.
pub fn compute_indices<S: Scalar>(s2: ArrayView4<'_, S>, variant: EviVariant) -> Array4<S> {
    let (t, h, w, _) = s2.dim();
    let mut out = Array4::zeros((t, h, w, 3));
    let mut px = [S::zero(); 10];
    for k in 0..t {
        for r in 0..h {
            for c in 0..w {
                for (b, v) in s2.slice(s![k, r, c, ..10]).iter().enumerate() {
                    px[b] = *v;
                }
                let idx = raw_indices(&px, variant);
                out[[k, r, c, 0]] = index_to_unit(idx.evi);
                out[[k, r, c, 1]] = index_to_unit(idx.msavi2);
                out[[k, r, c, 2]] = index_to_unit(idx.bi);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(b2: f64, b3: f64, b4: f64, b5: f64, b8: f64) -> [f64; 10] {
        let mut p = [0.2; 10];
        p[Channel::B2.index()] = b2;
        p[Channel::B3.index()] = b3;
        p[Channel::B4.index()] = b4;
        p[Channel::B5.index()] = b5;
        p[Channel::B8.index()] = b8;
        p
    }

    #[test]
    fn evi_as_printed() {
        let i = raw_indices(&px(0.05, 0.1, 0.1, 0.2, 0.4), EviVariant::RedEdge);
        // 2.5 * 0.3 / (0.2 + 0.6 - 0.375 + 1)
        assert!((i.evi - 0.75 / 1.425).abs() < 1e-12);
        assert!((i.evi - 0.5263).abs() < 1e-4);
        let s = raw_indices(&px(0.05, 0.1, 0.1, 0.2, 0.4), EviVariant::Standard);
        assert!((s.evi - 0.75 / 1.625).abs() < 1e-12);
    }

    #[test]
    fn equal_nir_and_red_zero_out() {
        let i = raw_indices(&px(0.05, 0.1, 0.3, 0.2, 0.3), EviVariant::RedEdge);
        assert_eq!(i.evi, 0.0);
        assert!(i.msavi2.abs() < 1e-15);
    }

    #[test]
    fn bare_soil_index() {
        let i = raw_indices(&px(0.1, 0.1, 0.2, 0.2, 0.3), EviVariant::RedEdge);
        assert!((i.bi - 0.5).abs() < 1e-12);
        let i = raw_indices(&px(0.1, 0.0, 0.2, 0.2, 0.3), EviVariant::RedEdge);
        assert_eq!(i.bi, 1.0);
        let i = raw_indices(&px(0.0, 0.0, 0.0, 0.2, 0.3), EviVariant::RedEdge);
        assert_eq!(i.bi, 0.0);
    }

    #[test]
    fn unit_mapping() {
        assert_eq!(index_to_unit(-1.5), 0.0);
        assert_eq!(index_to_unit(0.0), 0.5);
        assert_eq!(index_to_unit(9.0), 1.0);
        assert_eq!(index_to_unit(f64::NAN), 0.5);
    }

    proptest! {
        #[test]
        fn msavi2_radicand_nonnegative(b4 in 0.0f64..1.0, b8 in 0.0f64..1.0) {
            let lead = 2.0 * b8 + 1.0;
            prop_assert!(lead * lead - 8.0 * (b8 - b4) >= -1e-12);
            prop_assert!((2.0 * b8 - 1.0).powi(2) + 8.0 * b4 >= 0.0);
        }

        #[test]
        fn bi_in_range(b2 in 0.0f64..1.0, b3 in 0.0f64..1.0, b4 in 0.0f64..1.0) {
            prop_assume!(b2 + b3 + b4 > 0.0);
            let i = raw_indices(&px(b2, b3, b4, 0.2, 0.3), EviVariant::RedEdge);
            prop_assert!(i.bi > -1.0 && i.bi <= 1.0);
        }

        #[test]
        fn mapped_indices_in_unit_interval(bands in proptest::collection::vec(0.0f64..1.0, 10)) {
            let s2 = Array4::from_shape_vec((1, 1, 1, 10), bands).unwrap();
            for v in compute_indices(s2.view(), EviVariant::RedEdge).iter() {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
