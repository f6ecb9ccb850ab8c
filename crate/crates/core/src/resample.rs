//! Bicubic resizing and Gaussian blur used by the degradation model and the
//! bicubic baseline renderer.
//!
//! The bicubic kernel is the Keys cubic convolution kernel with `a = -0.5`.
//! When shrinking, the kernel is stretched by the shrink factor so that it
//! low-pass filters (the convention of PIL and MATLAB `imresize`). Border
//! samples replicate the edge pixel. Accumulation happens in `f64` and the
//! separable passes always run horizontal first, so results are bit-exact
//! across runs.

use crate::error::{invalid, Result};
use crate::image::ImageTensor;

pub const BICUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Per-output-sample source indices and normalized weights for one axis.
struct AxisTaps {
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisTaps {
    fn new(src: usize, dst: usize) -> Self {
        let ratio = src as f64 / dst as f64;
        let stretch = ratio.max(1.0);
        let support = 2.0 * stretch;
        let taps = (0..dst)
            .map(|i| {
                let center = (i as f64 + 0.5) * ratio - 0.5;
                let lo = (center - support).floor() as isize;
                let hi = (center + support).ceil() as isize;
                let mut row: Vec<(usize, f64)> = Vec::with_capacity((hi - lo + 1) as usize);
                let mut total = 0.0;
                for j in lo..=hi {
                    let w = cubic_kernel((j as f64 - center) / stretch);
                    if w == 0.0 {
                        continue;
                    }
                    let idx = j.clamp(0, src as isize - 1) as usize;
                    total += w;
                    match row.iter_mut().find(|(k, _)| *k == idx) {
                        Some(entry) => entry.1 += w,
                        None => row.push((idx, w)),
                    }
                }
                for entry in &mut row {
                    entry.1 /= total;
                }
                row
            })
            .collect();
        Self { taps }
    }
}

/// Resizes to `out_h x out_w` with the stretched bicubic kernel.
pub fn resize_bicubic(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(invalid("resize target must be non-empty"));
    }
    let (h, w) = img.dims();
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = img.data();
    let xt = AxisTaps::new(w, out_w);
    let yt = AxisTaps::new(h, out_h);

    let mut tmp = vec![0.0f64; h * out_w * 3];
    for y in 0..h {
        for (x, taps) in xt.taps.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for &(sx, wt) in taps {
                let i = (y * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += wt * src[i + c] as f64;
                }
            }
            tmp[(y * out_w + x) * 3..][..3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0f32; out_h * out_w * 3];
    for (y, taps) in yt.taps.iter().enumerate() {
        for x in 0..out_w {
            let mut acc = [0.0f64; 3];
            for &(sy, wt) in taps {
                let i = (sy * out_w + x) * 3;
                for c in 0..3 {
                    acc[c] += wt * tmp[i + c];
                }
            }
            let o = (y * out_w + x) * 3;
            for c in 0..3 {
                out[o + c] = acc[c] as f32;
            }
        }
    }
    ImageTensor::new(out_h, out_w, out)
}

/// Normalized 1-D Gaussian taps with radius `ceil(2 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let radius = (2.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / total).collect())
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    let kernel = gaussian_kernel(sigma)?;
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = img.dims();
    let src = img.data();

    let mut tmp = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (k, &wt) in kernel.iter().enumerate() {
                let sx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                let i = (y * w + sx) * 3;
                for c in 0..3 {
                    acc[c] += wt * src[i + c] as f64;
                }
            }
            tmp[(y * w + x) * 3..][..3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for (k, &wt) in kernel.iter().enumerate() {
                let sy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                let i = (sy * w + x) * 3;
                for c in 0..3 {
                    acc[c] += wt * tmp[i + c];
                }
            }
            for c in 0..3 {
                out[(y * w + x) * 3 + c] = acc[c] as f32;
            }
        }
    }
    ImageTensor::new(h, w, out)
}
