//! The image manipulator: eight closed-form, differentiable filters applied
//! at adjustable intensities, with exact derivatives of the output with
//! respect to every intensity.
//!
//! All filters work per pixel on the RGB triple `c` (luma `Y` uses Rec. 601
//! weights) and run in the fixed order of [`FilterId::ALL`]:
//!
//! | filter | update |
//! |--------|--------|
//! | `con`  | `c = 0.5 + (1 + k)(c - 0.5)` |
//! | `sat`  | `c = Y + (1 + k)(c - Y)` |
//! | `bri`  | `c = c + 0.3 k` |
//! | `sha`  | `c = c + 0.5 k (1 - Y)^2` |
//! | `hig`  | `c = c + 0.5 k Y^2` |
//! | `exp`  | `c = c * 2^k` |
//! | `llf`  | `c = c + k (Y - blur(Y0))` |
//! | `nld`  | `c = (c - k v) / (1 - k v)` |
//!
//! where `blur(Y0)` and `v` (a low percentile of the dark channel) come from
//! the [`ImageContext`] of the source image and are constants under
//! differentiation. The result passes through [`smooth_clamp`].
//!
//! Every stage has a Jacobian of the form `a I + b 1 w^T` (with `w` the luma
//! weights), which keeps forward-mode tangent propagation cheap.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::{luma, ImageBuffer, LUMA};
use crate::stats;

pub const BRIGHTNESS_SCALE: f64 = 0.3;
pub const CONTEXT_BLUR_SIGMA: f64 = 5.0;
pub const CONTEXT_DARK_PERCENTILE: f64 = 1.0;
/// Width of the soft band at either end of the output range.
pub const CLAMP_MARGIN: f64 = 0.005;
/// Upper bound on the dark-channel offset used by `nld`, keeps `1 - k v`
/// away from zero on near-white images.
pub const NLD_OFFSET_CAP: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterId {
    Con,
    Sat,
    Bri,
    Sha,
    Hig,
    Exp,
    Llf,
    Nld,
}

impl FilterId {
    /// Canonical order; also the index order of a [`ParamVector`].
    pub const ALL: [FilterId; 8] = [
        FilterId::Con,
        FilterId::Sat,
        FilterId::Bri,
        FilterId::Sha,
        FilterId::Hig,
        FilterId::Exp,
        FilterId::Llf,
        FilterId::Nld,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FilterId::Con => "con",
            FilterId::Sat => "sat",
            FilterId::Bri => "bri",
            FilterId::Sha => "sha",
            FilterId::Hig => "hig",
            FilterId::Exp => "exp",
            FilterId::Llf => "llf",
            FilterId::Nld => "nld",
        }
    }

    /// Valid intensity interval. Dehazing is positive-only.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            FilterId::Nld => (0.0, 1.0),
            _ => (-1.0, 1.0),
        }
    }

    pub fn project(self, k: f64) -> f64 {
        let (lo, hi) = self.bounds();
        k.clamp(lo, hi)
    }

    pub fn contains(self, k: f64) -> bool {
        let (lo, hi) = self.bounds();
        k.is_finite() && (lo..=hi).contains(&k)
    }
}

impl fmt::Display for FilterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterId::ALL
            .into_iter()
            .find(|id| id.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownFilter(s.to_string()))
    }
}

/// Eight filter intensities keyed by [`FilterId`]; serialises as a map in
/// canonical order, e.g. `{"con":0.0,"sat":0.2,...}`. All eight keys are
/// required when deserialising.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Intensities(pub [f64; 8]);

impl Serialize for Intensities {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = serializer.serialize_map(Some(8))?;
        for id in FilterId::ALL {
            map.serialize_entry(id.name(), &self.0[id.index()])?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Intensities {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let map = std::collections::BTreeMap::<FilterId, f64>::deserialize(deserializer)?;
        let mut k = [0.0; 8];
        for id in FilterId::ALL {
            k[id.index()] = *map.get(&id).ok_or_else(|| D::Error::missing_field(id.name()))?;
        }
        Ok(Intensities(k))
    }
}

/// Filter intensities plus per-filter fix flags.
///
/// Intensities always lie inside their [`FilterId::bounds`]; the setters
/// reject anything else.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamVectorRepr", into = "ParamVectorRepr")]
pub struct ParamVector {
    k: [f64; 8],
    fixed: [bool; 8],
}

#[derive(Serialize, Deserialize)]
struct ParamVectorRepr {
    k: Intensities,
    fixed: Vec<FilterId>,
}

impl From<ParamVector> for ParamVectorRepr {
    fn from(p: ParamVector) -> Self {
        ParamVectorRepr {
            k: Intensities(p.k),
            fixed: p.fixed_filters().collect(),
        }
    }
}

impl TryFrom<ParamVectorRepr> for ParamVector {
    type Error = Error;

    fn try_from(r: ParamVectorRepr) -> Result<Self> {
        let mut p = ParamVector::from_values(r.k.0)?;
        for id in r.fixed {
            p.fix(id);
        }
        Ok(p)
    }
}

impl ParamVector {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_values(k: [f64; 8]) -> Result<Self> {
        let p = ParamVector { k, fixed: [false; 8] };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for id in FilterId::ALL {
            let value = self.k[id.index()];
            if !id.contains(value) {
                return Err(Error::ParameterOutOfBounds { filter: id, value });
            }
        }
        Ok(())
    }

    pub fn get(&self, id: FilterId) -> f64 {
        self.k[id.index()]
    }

    pub fn set(&mut self, id: FilterId, value: f64) -> Result<()> {
        if !id.contains(value) {
            return Err(Error::ParameterOutOfBounds { filter: id, value });
        }
        self.k[id.index()] = value;
        Ok(())
    }

    pub fn values(&self) -> &[f64; 8] {
        &self.k
    }

    pub fn is_fixed(&self, id: FilterId) -> bool {
        self.fixed[id.index()]
    }

    pub fn fix(&mut self, id: FilterId) {
        self.fixed[id.index()] = true;
    }

    pub fn unfix(&mut self, id: FilterId) {
        self.fixed[id.index()] = false;
    }

    pub fn fixed_mask(&self) -> [bool; 8] {
        self.fixed
    }

    pub fn fixed_filters(&self) -> impl Iterator<Item = FilterId> + '_ {
        FilterId::ALL.into_iter().filter(|id| self.is_fixed(*id))
    }

    pub fn is_zero(&self) -> bool {
        self.k.iter().all(|&v| v == 0.0)
    }

    pub fn sum_squares(&self) -> f64 {
        self.k.iter().map(|v| v * v).sum()
    }

    /// Overwrite the raw intensities, projecting each into its box.
    pub(crate) fn set_projected(&mut self, k: [f64; 8]) {
        for id in FilterId::ALL {
            self.k[id.index()] = id.project(k[id.index()]);
        }
    }
}

/// Per-image constants the filters need, computed once from the source image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageContext {
    width: usize,
    height: usize,
    blurred_luma: Vec<f64>,
    dark_offset: f64,
}

impl ImageContext {
    /// Assemble a context from precomputed parts.
    pub fn from_parts(width: usize, height: usize, blurred_luma: Vec<f64>, dark_offset: f64) -> Result<Self> {
        if blurred_luma.len() != width * height {
            return Err(Error::InvalidDimensions(format!(
                "{} blurred samples for {width}x{height}",
                blurred_luma.len()
            )));
        }
        Ok(ImageContext { width, height, blurred_luma, dark_offset })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn blurred_luma(&self) -> &[f64] {
        &self.blurred_luma
    }

    /// 1st percentile of `min(R, G, B)` over the source image.
    pub fn dark_offset(&self) -> f64 {
        self.dark_offset
    }

    fn check(&self, img: &ImageBuffer) -> Result<()> {
        if img.width() != self.width || img.height() != self.height {
            return Err(Error::DimensionMismatch(img.width(), img.height(), self.width, self.height));
        }
        Ok(())
    }
}

pub fn build_context(img: &ImageBuffer) -> Result<ImageContext> {
    if img.is_empty() {
        return Err(Error::EmptyInput);
    }
    let blurred = gaussian_blur(&img.luminance(), img.width(), img.height(), CONTEXT_BLUR_SIGMA);
    let dark: Vec<f64> = img.pixels().map(|p| p[0].min(p[1]).min(p[2])).collect();
    let dark_offset = stats::percentile(&dark, CONTEXT_DARK_PERCENTILE).unwrap_or(0.0);
    ImageContext::from_parts(img.width(), img.height(), blurred, dark_offset)
}

/// Separable Gaussian blur of a single plane, radius `ceil(3 sigma)`, with
/// half-sample symmetric (mirror) boundaries.
pub fn gaussian_blur(plane: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= norm);

    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                acc += w * row[mirror(x as isize + t as isize - radius, width)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                acc += w * tmp[mirror(y as isize + t as isize - radius, height) * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Index into `[0, n)` under half-sample symmetric extension (period `2n`).
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// C^2 saturating ramp: identity on `[m, 1-m]`, `tanh` tails that approach 0
/// and 1 asymptotically. Its derivative is continuous and strictly positive.
#[inline]
pub fn smooth_clamp(x: f64) -> f64 {
    const LO: f64 = CLAMP_MARGIN;
    const HI: f64 = 1.0 - CLAMP_MARGIN;
    if x < LO {
        LO + CLAMP_MARGIN * ((x - LO) / CLAMP_MARGIN).tanh()
    } else if x > HI {
        HI + CLAMP_MARGIN * ((x - HI) / CLAMP_MARGIN).tanh()
    } else {
        x
    }
}

#[inline]
pub fn smooth_clamp_derivative(x: f64) -> f64 {
    const LO: f64 = CLAMP_MARGIN;
    const HI: f64 = 1.0 - CLAMP_MARGIN;
    let t = if x < LO {
        ((x - LO) / CLAMP_MARGIN).tanh()
    } else if x > HI {
        ((x - HI) / CLAMP_MARGIN).tanh()
    } else {
        return 1.0;
    };
    1.0 - t * t
}

#[inline]
fn nld_offset(dark_offset: f64) -> f64 {
    dark_offset.min(NLD_OFFSET_CAP)
}

/// Output of a single stage at intensity `k` for input `c` with luma `y`.
#[inline]
fn stage_value(stage: usize, k: f64, c: [f64; 3], y: f64, blurred: f64, dark_offset: f64) -> [f64; 3] {
    match stage {
        0 => c.map(|v| 0.5 + (1.0 + k) * (v - 0.5)),
        1 => c.map(|v| y + (1.0 + k) * (v - y)),
        2 => c.map(|v| v + BRIGHTNESS_SCALE * k),
        3 => {
            let lift = 0.5 * k * (1.0 - y) * (1.0 - y);
            c.map(|v| v + lift)
        }
        4 => {
            let lift = 0.5 * k * y * y;
            c.map(|v| v + lift)
        }
        5 => {
            let s = k.exp2();
            c.map(|v| v * s)
        }
        6 => {
            let detail = k * (y - blurred);
            c.map(|v| v + detail)
        }
        _ => {
            let v = nld_offset(dark_offset);
            let den = 1.0 - k * v;
            c.map(|ch| (ch - k * v) / den)
        }
    }
}

/// Stage derivatives at input `c`: the Jacobian w.r.t. the input is
/// `a I + b 1 w^T`, and `d` is the derivative w.r.t. the stage's own
/// intensity.
#[inline]
fn stage_derivatives(stage: usize, k: f64, c: [f64; 3], y: f64, blurred: f64, dark_offset: f64) -> (f64, f64, [f64; 3]) {
    match stage {
        0 => (1.0 + k, 0.0, c.map(|v| v - 0.5)),
        1 => (1.0 + k, -k, c.map(|v| v - y)),
        2 => (1.0, 0.0, [BRIGHTNESS_SCALE; 3]),
        3 => (1.0, -k * (1.0 - y), [0.5 * (1.0 - y) * (1.0 - y); 3]),
        4 => (1.0, k * y, [0.5 * y * y; 3]),
        5 => {
            let s = k.exp2();
            (s, 0.0, c.map(|v| v * s * std::f64::consts::LN_2))
        }
        6 => (1.0, k, [y - blurred; 3]),
        _ => {
            let v = nld_offset(dark_offset);
            let den = 1.0 - k * v;
            (1.0 / den, 0.0, c.map(|ch| v * (ch - 1.0) / (den * den)))
        }
    }
}

/// One pixel through all stages and the output clamp. `k` is indexed by
/// [`FilterId::index`]; `blurred` is the context's blurred luma at the pixel.
#[inline]
pub fn filter_pixel(mut c: [f64; 3], blurred: f64, k: &[f64; 8], dark_offset: f64) -> [f64; 3] {
    for (stage, &ks) in k.iter().enumerate() {
        // every stage is the identity at zero intensity
        if ks != 0.0 {
            c = stage_value(stage, ks, c, luma(c), blurred, dark_offset);
        }
    }
    c.map(smooth_clamp)
}

/// Derivative of one output pixel w.r.t. each intensity: `tangent[j][ch]`.
pub(crate) type PixelTangent = [[f64; 3]; 8];

/// One pixel through all stages and the clamp, propagating the tangent of
/// the output with respect to all eight intensities.
#[inline]
pub(crate) fn filter_pixel_with_tangent(
    mut c: [f64; 3],
    blurred: f64,
    k: &[f64; 8],
    dark_offset: f64,
) -> ([f64; 3], PixelTangent) {
    let mut t: PixelTangent = [[0.0; 3]; 8];
    for (stage, &ks) in k.iter().enumerate() {
        let y = luma(c);
        let (a, b, d) = stage_derivatives(stage, ks, c, y, blurred, dark_offset);
        for col in t.iter_mut().take(stage) {
            let yt = LUMA[0] * col[0] + LUMA[1] * col[1] + LUMA[2] * col[2];
            for v in col.iter_mut() {
                *v = a * *v + b * yt;
            }
        }
        t[stage] = d;
        if ks != 0.0 {
            c = stage_value(stage, ks, c, y, blurred, dark_offset);
        }
    }
    let slope = c.map(smooth_clamp_derivative);
    for col in t.iter_mut() {
        for ch in 0..3 {
            col[ch] *= slope[ch];
        }
    }
    (c.map(smooth_clamp), t)
}

fn prepare(img: &ImageBuffer, params: &ParamVector, ctx: &ImageContext) -> Result<()> {
    params.validate()?;
    if img.is_empty() {
        return Err(Error::EmptyInput);
    }
    ctx.check(img)
}

/// Apply all eight filters at the intensities in `params`.
///
/// All-zero intensities return the input unchanged.
pub fn apply(img: &ImageBuffer, params: &ParamVector, ctx: &ImageContext) -> Result<ImageBuffer> {
    prepare(img, params, ctx)?;
    if params.is_zero() {
        return Ok(img.clone());
    }
    let k = params.values();
    let width = img.width();
    let dark = ctx.dark_offset();
    let mut out = img.clone();
    out.data_mut()
        .par_chunks_mut(width * 3)
        .zip(ctx.blurred_luma().par_chunks(width))
        .for_each(|(row, blur_row)| {
            for (px, &blurred) in row.chunks_exact_mut(3).zip(blur_row) {
                let v = filter_pixel([px[0], px[1], px[2]], blurred, k, dark);
                px.copy_from_slice(&v);
            }
        });
    Ok(out)
}

/// Per-intensity derivative rasters of the filtered image.
#[derive(Clone, Debug)]
pub struct Jacobian {
    width: usize,
    height: usize,
    rasters: Vec<Vec<f64>>,
}

impl Jacobian {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major RGB derivative samples `d(output)/d(k_id)`.
    pub fn raster(&self, id: FilterId) -> &[f64] {
        &self.rasters[id.index()]
    }
}

pub fn jacobian(img: &ImageBuffer, params: &ParamVector, ctx: &ImageContext) -> Result<Jacobian> {
    prepare(img, params, ctx)?;
    let k = params.values();
    let dark = ctx.dark_offset();
    let n = img.data().len();
    let mut rasters = vec![vec![0.0; n]; 8];
    for (p, (px, &blurred)) in img.data().chunks_exact(3).zip(ctx.blurred_luma()).enumerate() {
        let (_, t) = filter_pixel_with_tangent([px[0], px[1], px[2]], blurred, k, dark);
        for (raster, col) in rasters.iter_mut().zip(t.iter()) {
            raster[p * 3..p * 3 + 3].copy_from_slice(col);
        }
    }
    Ok(Jacobian {
        width: img.width(),
        height: img.height(),
        rasters,
    })
}

/// Filter `img` and contract the Jacobian with a per-sample gradient that
/// `pixel_gradient` computes from the filtered image:
/// `sum_p g(p) . d(out_p)/dk`. Returns the filtered image and the eight sums.
///
/// Rows are reduced in order, so the result does not depend on thread count.
pub(crate) fn pullback<G>(
    img: &ImageBuffer,
    params: &ParamVector,
    ctx: &ImageContext,
    pixel_gradient: G,
) -> Result<[f64; 8]>
where
    G: FnOnce(&ImageBuffer) -> Result<Vec<f64>>,
{
    prepare(img, params, ctx)?;
    let k = params.values();
    let dark = ctx.dark_offset();
    let width = img.width();

    let mut filtered = img.clone();
    let mut tangents: Vec<PixelTangent> = vec![[[0.0; 3]; 8]; img.pixel_count()];
    filtered
        .data_mut()
        .par_chunks_mut(width * 3)
        .zip(tangents.par_chunks_mut(width))
        .zip(ctx.blurred_luma().par_chunks(width))
        .for_each(|((row, trow), blur_row)| {
            for ((px, t), &blurred) in row.chunks_exact_mut(3).zip(trow.iter_mut()).zip(blur_row) {
                let (v, tan) = filter_pixel_with_tangent([px[0], px[1], px[2]], blurred, k, dark);
                px.copy_from_slice(&v);
                *t = tan;
            }
        });
    if params.is_zero() {
        // `apply` short-circuits at zero; keep the value path identical
        filtered = img.clone();
    }

    let g = pixel_gradient(&filtered)?;
    let partials: Vec<[f64; 8]> = g
        .par_chunks(width * 3)
        .zip(tangents.par_chunks(width))
        .map(|(grow, trow)| {
            let mut acc = [0.0; 8];
            for (gp, t) in grow.chunks_exact(3).zip(trow) {
                for (j, col) in t.iter().enumerate() {
                    acc[j] += gp[0] * col[0] + gp[1] * col[1] + gp[2] * col[2];
                }
            }
            acc
        })
        .collect();
    let mut total = [0.0; 8];
    for row in partials {
        for j in 0..8 {
            total[j] += row[j];
        }
    }
    Ok(total)
}
