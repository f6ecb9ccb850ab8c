//! Evaluation sweeps, the per-scale comparison table and the ablation study.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::LoadedImage;
use crate::error::{Error, Result};
use crate::geometry::output_size;
use crate::image::ImageTensor;
use crate::metrics::{psnr, ssim, ImageScore, MetricReport};
use crate::model::{IsteModel, ModelConfig, Variant};
use crate::pipeline::{eval_pair, train, TrainConfig};
use crate::resample::resize_bicubic;

pub const DEFAULT_SCALES: [f64; 5] = [2.0, 3.0, 4.0, 6.0, 8.0];

/// Bicubic upsampling of `lr` onto the output grid at `scale`.
pub fn bicubic_upscale(lr: &ImageTensor, scale: f64) -> Result<ImageTensor> {
    resize_bicubic(
        lr,
        output_size(lr.height(), scale),
        output_size(lr.width(), scale),
    )
}

fn score_all(
    dataset: &str,
    method: &str,
    images: &[LoadedImage],
    scales: &[f64],
    mut render: impl FnMut(&ImageTensor, f64) -> Result<ImageTensor>,
) -> Result<MetricReport> {
    if images.is_empty() {
        return Err(Error::Data(format!(
            "dataset `{dataset}` has no evaluation images"
        )));
    }
    let mut report = MetricReport::new(dataset, method);
    for &scale in scales {
        for img in images {
            let (lr, hr) = eval_pair(&img.image, scale)?;
            let sr = render(&lr, scale)?;
            report.scores.push(ImageScore {
                image_id: img.id.clone(),
                scale,
                psnr: psnr(&sr, &hr)?,
                ssim: ssim(&sr, &hr)?,
            });
        }
    }
    Ok(report)
}

pub fn evaluate_model(
    model: &IsteModel,
    method: &str,
    dataset: &str,
    images: &[LoadedImage],
    scales: &[f64],
) -> Result<MetricReport> {
    score_all(dataset, method, images, scales, |lr, s| {
        model.forward(lr, s)
    })
}

pub fn evaluate_bicubic(
    dataset: &str,
    images: &[LoadedImage],
    scales: &[f64],
) -> Result<MetricReport> {
    score_all(dataset, "Bicubic", images, scales, |lr, s| {
        Ok(bicubic_upscale(lr, s)?.clamped())
    })
}

/// One row per scale, one `PSNR / SSIM` column pair per report.
pub fn scale_table(reports: &[&MetricReport], scales: &[f64]) -> String {
    let mut out = String::new();
    let _ = write!(out, "| Scale |");
    for r in reports {
        let _ = write!(out, " {} PSNR | {} SSIM |", r.method, r.method);
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in reports {
        out.push_str("---|---|");
    }
    out.push('\n');
    for &s in scales {
        let _ = write!(out, "| x{s} |");
        for r in reports {
            match r.mean_at(s) {
                Some((p, q)) => {
                    let _ = write!(out, " {p:.2} | {q:.4} |");
                }
                None => out.push_str(" - | - |"),
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub param_count: usize,
    pub params_by_module: BTreeMap<String, usize>,
    pub report: MetricReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub scales: Vec<f64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// One row per variant, one `PSNR / SSIM` column group per scale, plus the parameter count.
    pub fn table(&self) -> String {
        let mut out = String::from("| Variant | Params |");
        for s in &self.scales {
            let _ = write!(out, " x{s} PSNR | x{s} SSIM |");
        }
        out.push_str("\n|---|---|");
        for _ in &self.scales {
            out.push_str("---|---|");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "| {} | {} |", row.label, row.param_count);
            for &s in &self.scales {
                match row.report.mean_at(s) {
                    Some((p, q)) => {
                        let _ = write!(out, " {p:.2} | {q:.4} |");
                    }
                    None => out.push_str(" - | - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates the full model and the four ablations with one seed, so
/// every run sees the same data order and the same initial values for shared modules.
pub fn ablate(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    dataset: &str,
    train_images: &[LoadedImage],
    test_images: &[LoadedImage],
    scales: &[f64],
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let cfg = variant.apply(base);
        let trained = train(&cfg, train_cfg, train_images, &[], None)?;
        let report = evaluate_model(
            &trained.model,
            variant.label(),
            dataset,
            test_images,
            scales,
        )?;
        rows.push(AblationRow {
            variant,
            label: variant.label().to_string(),
            param_count: trained.model.params().census(),
            params_by_module: trained.model.params().census_by_module(),
            report,
        });
    }
    Ok(AblationReport {
        scales: scales.to_vec(),
        rows,
    })
}
