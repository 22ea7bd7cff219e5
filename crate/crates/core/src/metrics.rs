//! Brightness and full-reference similarity metrics.

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// SSIM stabilisers for unit peak.
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 8;

/// Perceived brightness `sqrt(0.241 R^2 + 0.691 G^2 + 0.068 B^2)` of the
/// mean channel intensities on a 0-255 scale.
pub fn perceived_brightness(img: &ImageBuffer) -> Result<f64> {
    if img.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sums = [0.0f64; 3];
    for px in img.pixels() {
        sums[0] += px[0];
        sums[1] += px[1];
        sums[2] += px[2];
    }
    let n = img.pixel_count() as f64;
    let [r, g, b] = sums.map(|s| s / n * 255.0);
    Ok((0.241 * r * r + 0.691 * g * g + 0.068 * b * b).sqrt())
}

/// Peak signal-to-noise ratio in dB with unit peak; `+inf` for identical inputs.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_size(b)?;
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    let se: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    let mse = se / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean structural similarity over all 8x8 windows (stride 1) of the luma
/// planes. Images smaller than the window use one window spanning the image.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_size(b)?;
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (w, h) = (a.width(), a.height());
    let ya = a.luminance();
    let yb = b.luminance();
    let win_w = SSIM_WINDOW.min(w);
    let win_h = SSIM_WINDOW.min(h);

    let sa = SummedArea::new(w, h, |i| ya[i]);
    let sb = SummedArea::new(w, h, |i| yb[i]);
    let saa = SummedArea::new(w, h, |i| ya[i] * ya[i]);
    let sbb = SummedArea::new(w, h, |i| yb[i] * yb[i]);
    let sab = SummedArea::new(w, h, |i| ya[i] * yb[i]);

    let n = (win_w * win_h) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - win_h {
        for x in 0..=w - win_w {
            let mu_a = sa.sum(x, y, win_w, win_h) / n;
            let mu_b = sb.sum(x, y, win_w, win_h) / n;
            let var_a = (saa.sum(x, y, win_w, win_h) / n - mu_a * mu_a).max(0.0);
            let var_b = (sbb.sum(x, y, win_w, win_h) / n - mu_b * mu_b).max(0.0);
            let cov = sab.sum(x, y, win_w, win_h) / n - mu_a * mu_b;
            total += ssim_window(mu_a, mu_b, var_a, var_b, cov);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[inline]
pub(crate) fn ssim_window(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2))
}

struct SummedArea {
    stride: usize,
    table: Vec<f64>,
}

impl SummedArea {
    fn new(w: usize, h: usize, value: impl Fn(usize) -> f64) -> Self {
        let stride = w + 1;
        let mut table = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += value(y * w + x);
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        SummedArea { stride, table }
    }

    #[inline]
    fn sum(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        let s = self.stride;
        self.table[(y + h) * s + x + w] - self.table[y * s + x + w] - self.table[(y + h) * s + x]
            + self.table[y * s + x]
    }
}
