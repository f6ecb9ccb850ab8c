//! PSNR, SSIM and absolute-error maps on RGB images in `[0, 1]`.
//!
//! No border crop and no luma conversion: both metrics run on all three
//! channels over the whole image.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::image::ImageTensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape(format!(
            "image dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `10 log10(1 / MSE)` in dB; `+inf` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all 11x11 Gaussian windows fully inside the image, averaged over channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = a
            .data()
            .iter()
            .skip(ch)
            .step_by(3)
            .map(|&v| v as f64)
            .collect();
        let pb: Vec<f64> = b
            .data()
            .iter()
            .skip(ch)
            .step_by(3)
            .map(|&v| v as f64)
            .collect();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let aa = filter_valid(&pa.iter().map(|v| v * v).collect::<Vec<_>>(), h, w, &k);
        let bb = filter_valid(&pb.iter().map(|v| v * v).collect::<Vec<_>>(), h, w, &k);
        let ab = filter_valid(
            &pa.iter().zip(&pb).map(|(x, y)| x * y).collect::<Vec<_>>(),
            h,
            w,
            &k,
        );
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = aa[i] - ma * ma;
            let var_b = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / 3.0)
}

/// Per-pixel channel-mean absolute difference, row-major.
pub fn abs_error(a: &ImageTensor, b: &ImageTensor) -> Result<Vec<f32>> {
    same_shape(a, b)?;
    Ok(a.data()
        .chunks(3)
        .zip(b.data().chunks(3))
        .map(|(x, y)| ((x[0] - y[0]).abs() + (x[1] - y[1]).abs() + (x[2] - y[2]).abs()) / 3.0)
        .collect())
}

/// "Hot" colormap: black -> red -> yellow -> white as `t` goes 0 -> 1.
/// Every channel is non-decreasing in `t`.
pub fn hot_colormap(t: f32) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    [
        (3.0 * t).min(1.0),
        (3.0 * t - 1.0).clamp(0.0, 1.0),
        (3.0 * t - 2.0).clamp(0.0, 1.0),
    ]
}

/// Absolute-error map rendered through [`hot_colormap`], normalized so the
/// largest error maps to white. Identical inputs give an all-black map.
pub fn error_map(a: &ImageTensor, b: &ImageTensor) -> Result<ImageTensor> {
    let err = abs_error(a, b)?;
    let max = err.iter().copied().fold(0.0f32, f32::max);
    let data = err
        .iter()
        .flat_map(|&e| hot_colormap(if max > 0.0 { e / max } else { 0.0 }))
        .collect();
    ImageTensor::new(a.height(), a.width(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: String,
    pub scale: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores for one method on one dataset, aggregated by scale.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub method: String,
    pub scores: Vec<ImageScore>,
    /// FID needs an external pretrained classifier and is never computed.
    pub fid: Option<f64>,
}

impl MetricReport {
    pub fn new(dataset: impl Into<String>, method: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            method: method.into(),
            scores: Vec::new(),
            fid: None,
        }
    }

    pub fn scales(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for s in &self.scores {
            if !out.contains(&s.scale) {
                out.push(s.scale);
            }
        }
        out
    }

    /// Arithmetic means `(psnr, ssim)` over the images scored at `scale`.
    pub fn mean_at(&self, scale: f64) -> Option<(f64, f64)> {
        let rows: Vec<&ImageScore> = self.scores.iter().filter(|s| s.scale == scale).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|s| s.psnr).sum::<f64>() / n,
            rows.iter().map(|s| s.ssim).sum::<f64>() / n,
        ))
    }

    /// One JSON record per `(dataset, scale, metric)`.
    pub fn records(&self) -> Vec<serde_json::Value> {
        let mut out = Vec::new();
        for scale in self.scales() {
            let (p, s) = self.mean_at(scale).expect("scale present");
            for (metric, value) in [("psnr", Some(p)), ("ssim", Some(s)), ("fid", self.fid)] {
                out.push(serde_json::json!({
                    "dataset": self.dataset,
                    "method": self.method,
                    "scale": scale,
                    "metric": metric,
                    "value": value,
                    "supported": metric != "fid",
                }));
            }
        }
        out
    }
}
