//! Image-space helpers: SSIM, Gaussian blur and perturbation sensitivity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Side of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
/// Dynamic range of intensities.
const SSIM_RANGE: f64 = 1.0;
/// Added to the neighbourhood standard deviation in PSD.
pub const PSD_STD_FLOOR: f64 = 1e-6;

fn planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    match s.len() {
        3 => Ok((s[0], s[1], s[2])),
        4 if s[0] == 1 => Ok((s[1], s[2], s[3])),
        _ => Err(Error::input(format!("expected a single C×H×W image, got {s:?}"))),
    }
}

/// Mean SSIM over all valid windows of one channel.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let wh = SSIM_WINDOW.min(h);
    let ww = SSIM_WINDOW.min(w);
    let n = (wh * ww) as f64;
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - wh {
        for x0 in 0..=w - ww {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + wh {
                for x in x0..x0 + ww {
                    let (va, vb) = (a[y * w + x], b[y * w + x]);
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let var_a = (saa / n - ma * ma).max(0.0);
            let var_b = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Structural similarity of two images: 7×7 uniform windows, per channel,
/// averaged over channels. Windows shrink to the image when it is smaller.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (c, h, w) = planes(a)?;
    if planes(b)? != (c, h, w) {
        return Err(Error::input("SSIM of differently shaped images"));
    }
    let hw = h * w;
    let sum: f64 = (0..c)
        .map(|ch| ssim_plane(&a.data()[ch * hw..(ch + 1) * hw], &b.data()[ch * hw..(ch + 1) * hw], h, w))
        .sum();
    Ok(sum / c as f64)
}

/// Square Gaussian kernel applied per channel with replicate padding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurSpec {
    /// Odd kernel side; 1 is the identity.
    pub size: usize,
    pub sigma: f64,
}

impl Default for BlurSpec {
    fn default() -> Self {
        Self { size: 5, sigma: 1.0 }
    }
}

impl BlurSpec {
    pub fn identity() -> Self {
        Self { size: 1, sigma: 1.0 }
    }

    fn kernel(&self) -> Result<Vec<f64>> {
        if self.size % 2 == 0 || !(self.sigma > 0.0) {
            return Err(Error::config(format!(
                "blur kernel needs an odd size and positive sigma, got {self:?}"
            )));
        }
        let r = (self.size / 2) as isize;
        let mut k = Vec::with_capacity(self.size * self.size);
        for dy in -r..=r {
            for dx in -r..=r {
                k.push((-((dx * dx + dy * dy) as f64) / (2.0 * self.sigma * self.sigma)).exp());
            }
        }
        let total: f64 = k.iter().sum();
        Ok(k.into_iter().map(|v| v / total).collect())
    }
}

/// Gaussian blur of an N×C×H×W (or C×H×W) tensor.
pub fn gaussian_blur(images: &Tensor, spec: &BlurSpec) -> Result<Tensor> {
    let kernel = spec.kernel()?;
    let s = images.shape();
    if s.len() < 3 {
        return Err(Error::input(format!("blur expects images, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let r = (spec.size / 2) as isize;
    let mut out = images.clone();
    for (src, dst) in images.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                let mut ki = 0;
                for dy in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        acc += kernel[ki] * src[yy * w + xx];
                        ki += 1;
                    }
                }
                dst[y as usize * w + x as usize] = acc;
            }
        }
    }
    Ok(out)
}

/// Σᵢ |δᵢ| / (std(R(xᵢ)) + 1e-6), with R the 3×3 replicate-padded
/// neighbourhood of pixel i in the clean image.
pub fn perturbation_sensitivity(x: &Tensor, delta: &Tensor) -> Result<f64> {
    let (c, h, w) = planes(x)?;
    if planes(delta)? != (c, h, w) {
        return Err(Error::input("PSD of differently shaped tensors"));
    }
    let hw = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let plane = &x.data()[ch * hw..(ch + 1) * hw];
        let d = &delta.data()[ch * hw..(ch + 1) * hw];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                let dv = d[y as usize * w + xx as usize].abs();
                if dv == 0.0 {
                    continue;
                }
                let mut vals = [0.0; 9];
                let mut k = 0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                        let xc = (xx + dx).clamp(0, w as isize - 1) as usize;
                        vals[k] = plane[yy * w + xc];
                        k += 1;
                    }
                }
                let mean = vals.iter().sum::<f64>() / 9.0;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9.0;
                total += dv / (var.sqrt() + PSD_STD_FLOOR);
            }
        }
    }
    Ok(total)
}
