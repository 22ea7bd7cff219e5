//! A closed-form, differentiable stand-in for a learned aesthetic model.
//!
//! Four global features are combined into an aesthetic level `a` in `[0, 1]`:
//!
//! * RMS luma contrast `c_rms`, saturating at 0.25,
//! * mean HSV saturation `(max - min) / (max + 0.01)`, saturating at 0.5,
//! * exposure centring `exp(-(mean_luma - 0.5)^2 / 0.08)`,
//! * clipping: the fraction of pixels with any channel outside
//!   `[0.02, 0.98]`, using a logistic edge of width 0.01 so that it stays
//!   differentiable.
//!
//! `a = clamp01(0.35 min(c_rms/0.25, 1) + 0.25 min(sat/0.5, 1) + 0.40 e - 0.5 q)`
//! and the score distribution is a discretised Gaussian over the buckets
//! with mean `1 + 9a` and standard deviation 1.5.
//!
//! The proxy tracks exposure, contrast and colourfulness; it makes no claim
//! to agree with human ratings.

use super::distribution::{emd, emd_gradient, ScoreDistribution, BUCKETS};
use super::{Assessment, QualityAssessor};
use crate::error::{Error, Result};
use crate::image::{luma, ImageBuffer, LUMA};

const CONTRAST_REF: f64 = 0.25;
const SATURATION_REF: f64 = 0.5;
const SATURATION_EPS: f64 = 0.01;
const EXPOSURE_WIDTH: f64 = 0.08;
const CLIP_LOW: f64 = 0.02;
const CLIP_HIGH: f64 = 0.98;
const CLIP_SOFTNESS: f64 = 0.01;
const W_CONTRAST: f64 = 0.35;
const W_SATURATION: f64 = 0.25;
const W_EXPOSURE: f64 = 0.40;
const W_CLIP: f64 = 0.5;
const SCORE_SD: f64 = 1.5;

#[derive(Clone, Copy, Debug, Default)]
pub struct ProxyAssessor;

/// Feature values the proxy score is built from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProxyFeatures {
    pub mean_luma: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub exposure: f64,
    pub clipping: f64,
    /// Weighted sum before clamping to `[0, 1]`.
    pub raw: f64,
    pub aesthetic: f64,
}

#[inline]
fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Soft "outside the safe range" indicator for one channel and its derivative.
#[inline]
fn out_of_range(c: f64) -> (f64, f64) {
    let lo = logistic((CLIP_LOW - c) / CLIP_SOFTNESS);
    let hi = logistic((c - CLIP_HIGH) / CLIP_SOFTNESS);
    let d = (-lo * (1.0 - lo) + hi * (1.0 - hi)) / CLIP_SOFTNESS;
    (lo + hi, d)
}

/// Soft "any channel clipped" indicator of a pixel, with per-channel derivative.
#[inline]
fn pixel_clip(px: [f64; 3]) -> (f64, [f64; 3]) {
    let [(o0, d0), (o1, d1), (o2, d2)] = px.map(out_of_range);
    let (k0, k1, k2) = (1.0 - o0, 1.0 - o1, 1.0 - o2);
    (1.0 - k0 * k1 * k2, [k1 * k2 * d0, k0 * k2 * d1, k0 * k1 * d2])
}

/// HSV saturation of a pixel and its gradient, with the denominator offset
/// by [`SATURATION_EPS`] so the value falls continuously to 0 at black.
#[inline]
fn pixel_saturation(px: [f64; 3]) -> (f64, [f64; 3]) {
    let (mut imax, mut imin) = (0, 0);
    for c in 1..3 {
        if px[c] > px[imax] {
            imax = c;
        }
        if px[c] < px[imin] {
            imin = c;
        }
    }
    if imax == imin {
        return (0.0, [0.0; 3]);
    }
    let (mx, mn) = (px[imax], px[imin]);
    let den = mx + SATURATION_EPS;
    let mut g = [0.0; 3];
    g[imax] = (mn + SATURATION_EPS) / (den * den);
    g[imin] = -1.0 / den;
    ((mx - mn) / den, g)
}

impl ProxyAssessor {
    pub fn features(img: &ImageBuffer) -> Result<ProxyFeatures> {
        if img.is_empty() {
            return Err(Error::EmptyInput);
        }
        let n = img.pixel_count() as f64;
        let (mut sum_y, mut sum_s, mut sum_q) = (0.0, 0.0, 0.0);
        for px in img.pixels() {
            sum_y += luma(px);
            sum_s += pixel_saturation(px).0;
            sum_q += pixel_clip(px).0;
        }
        let mean_luma = sum_y / n;
        let var = img.pixels().map(|px| (luma(px) - mean_luma).powi(2)).sum::<f64>() / n;
        let contrast = var.sqrt();
        let saturation = sum_s / n;
        let clipping = sum_q / n;
        let exposure = (-(mean_luma - 0.5).powi(2) / EXPOSURE_WIDTH).exp();
        let raw = W_CONTRAST * (contrast / CONTRAST_REF).min(1.0) + W_SATURATION * (saturation / SATURATION_REF).min(1.0)
            + W_EXPOSURE * exposure
            - W_CLIP * clipping;
        Ok(ProxyFeatures {
            mean_luma,
            contrast,
            saturation,
            exposure,
            clipping,
            raw,
            aesthetic: raw.clamp(0.0, 1.0),
        })
    }

    /// Discretised Gaussian over the buckets centred on `1 + 9a`.
    pub fn distribution_for(aesthetic: f64) -> ScoreDistribution {
        let centre = 1.0 + 9.0 * aesthetic;
        let w: [f64; BUCKETS] =
            std::array::from_fn(|j| (-((j + 1) as f64 - centre).powi(2) / (2.0 * SCORE_SD * SCORE_SD)).exp());
        ScoreDistribution::from_weights(w).expect("gaussian weights are positive")
    }

    /// Score an image at whatever resolution it has.
    pub fn evaluate(img: &ImageBuffer) -> Result<ScoreDistribution> {
        Ok(Self::distribution_for(Self::features(img)?.aesthetic))
    }

    /// Score plus the gradient of `emd(score, target)` w.r.t. every sample.
    pub fn evaluate_with_gradient(img: &ImageBuffer, target: &ScoreDistribution) -> Result<(ScoreDistribution, Vec<f64>)> {
        let f = Self::features(img)?;
        let dist = Self::distribution_for(f.aesthetic);
        let mut grad = vec![0.0; img.data().len()];
        if emd(&dist, target) == 0.0 || f.raw <= 0.0 || f.raw >= 1.0 {
            return Ok((dist, grad));
        }

        // d loss / d centre, through the normalised Gaussian
        let p = dist.probabilities();
        let mean = dist.mean();
        let de = emd_gradient(&dist, target);
        let d_centre: f64 =
            (0..BUCKETS).map(|j| de[j] * p[j] * ((j + 1) as f64 - mean) / (SCORE_SD * SCORE_SD)).sum();
        let d_raw = 9.0 * d_centre;

        let n = img.pixel_count() as f64;
        let contrast_coef = if f.contrast < CONTRAST_REF && f.contrast > 1e-12 {
            W_CONTRAST / CONTRAST_REF / (n * f.contrast)
        } else {
            0.0
        };
        let saturation_coef = if f.saturation < SATURATION_REF { W_SATURATION / SATURATION_REF / n } else { 0.0 };
        let exposure_coef = W_EXPOSURE * f.exposure * (-2.0 * (f.mean_luma - 0.5) / EXPOSURE_WIDTH) / n;
        let clip_coef = -W_CLIP / n;

        for (px, g) in img.pixels().zip(grad.chunks_exact_mut(3)) {
            let y = luma(px);
            let luma_term = contrast_coef * (y - f.mean_luma) + exposure_coef;
            let (_, ds) = pixel_saturation(px);
            let (_, dq) = pixel_clip(px);
            for c in 0..3 {
                g[c] = d_raw * (luma_term * LUMA[c] + saturation_coef * ds[c] + clip_coef * dq[c]);
            }
        }
        Ok((dist, grad))
    }
}

impl QualityAssessor for ProxyAssessor {
    fn assess(&self, img: &ImageBuffer) -> Result<Assessment> {
        Ok(Assessment::Distribution {
            buckets: Self::evaluate(img)?,
        })
    }

    fn has_input_gradient(&self) -> bool {
        true
    }

    fn loss_and_pixel_gradient(&self, img: &ImageBuffer, target: &ScoreDistribution) -> Result<(Assessment, Vec<f64>)> {
        let (buckets, grad) = Self::evaluate_with_gradient(img, target)?;
        Ok((Assessment::Distribution { buckets }, grad))
    }
}
