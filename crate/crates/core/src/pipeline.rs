//! Degradation model, training-pair sampling and the training loop.
//!
//! A training pair is built by drawing a magnification `m ~ U(scale_min,
//! scale_max)`, cropping a `ceil(lr_patch * m)` square, blurring it with a
//! Gaussian of sigma `m / 2`, then resizing it to `lr_patch` with bicubic.
//! Supervision is `n_query` HR pixels drawn without replacement from the crop.
//! Because the crop side is an integer, training uses the effective scale
//! `crop / lr_patch`, for which the output grid matches the crop exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::LoadedImage;
use crate::error::{invalid, Error, Result};
use crate::geometry::{build_query_set, output_size, QuerySet};
use crate::image::ImageTensor;
use crate::metrics::psnr;
use crate::model::{IsteModel, ModelConfig, QueryBatch};
use crate::resample::{gaussian_blur, resize_bicubic};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_patch: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub n_query: usize,
    pub step_size: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validate (and keep the best checkpoint) every this many epochs; 0 disables.
    pub val_every: usize,
    pub val_scales: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_patch: 48,
            scale_min: 1.0,
            scale_max: 4.0,
            n_query: 48 * 48,
            step_size: 1e-4,
            epochs: 1000,
            batch_size: 16,
            seed: 0,
            val_every: 50,
            val_scales: vec![2.0, 3.0, 4.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_patch == 0 || self.batch_size == 0 {
            return Err(invalid("lr_patch and batch_size must be positive"));
        }
        if !(self.scale_min >= 1.0 && self.scale_max >= self.scale_min) {
            return Err(invalid(format!(
                "scale range [{}, {}] must satisfy 1 <= min <= max",
                self.scale_min, self.scale_max
            )));
        }
        if self.n_query == 0 || self.n_query > self.lr_patch * self.lr_patch {
            return Err(invalid(format!(
                "n_query {} must be in 1..={} (the smallest HR crop)",
                self.n_query,
                self.lr_patch * self.lr_patch
            )));
        }
        if !(self.step_size >= 0.0) {
            return Err(invalid("step_size must be non-negative"));
        }
        Ok(())
    }
}

/// Side of the HR crop feeding an `lr` patch at magnification `m`.
pub fn crop_size(lr: usize, m: f64) -> usize {
    (lr as f64 * m - 1e-9).ceil() as usize
}

/// Gaussian blur with sigma `m / 2` on `hr`, then bicubic resize to `lr_h x lr_w`.
pub fn degrade_to(hr: &ImageTensor, m: f64, lr_h: usize, lr_w: usize) -> Result<ImageTensor> {
    if !(m >= 1.0) || !m.is_finite() {
        return Err(invalid(format!("magnification must be >= 1, got {m}")));
    }
    resize_bicubic(&gaussian_blur(hr, m / 2.0)?, lr_h, lr_w)
}

/// Square-patch degradation: `hr` must be `ceil(lr * m)` on each side.
pub fn degrade(hr_patch: &ImageTensor, m: f64, lr: usize) -> Result<ImageTensor> {
    if !(m >= 1.0) || !m.is_finite() {
        return Err(invalid(format!("magnification must be >= 1, got {m}")));
    }
    let side = crop_size(lr, m);
    if hr_patch.dims() != (side, side) {
        return Err(invalid(format!(
            "HR patch for lr {lr} at x{m} must be {side}x{side}, got {:?}",
            hr_patch.dims()
        )));
    }
    degrade_to(hr_patch, m, lr, lr)
}

/// LR input and matching HR crop for evaluating at `scale`: the LR side is
/// `floor(H / scale)` and the HR side is the output size at `scale`.
pub fn eval_pair(hr: &ImageTensor, scale: f64) -> Result<(ImageTensor, ImageTensor)> {
    let lr_h = ((hr.height() as f64 / scale) + 1e-9).floor() as usize;
    let lr_w = ((hr.width() as f64 / scale) + 1e-9).floor() as usize;
    if lr_h == 0 || lr_w == 0 {
        return Err(invalid(format!(
            "{:?} image too small for x{scale}",
            hr.dims()
        )));
    }
    let target = hr.crop(0, 0, output_size(lr_h, scale), output_size(lr_w, scale))?;
    let lr = degrade_to(&target, scale, lr_h, lr_w)?;
    Ok((lr, target))
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub lr: ImageTensor,
    pub queries: QuerySet,
    pub rgb: Vec<[f32; 3]>,
    pub cell: [f64; 2],
    /// Effective scale `crop / lr_patch`.
    pub scale: f64,
    /// `(y, x, side)` of the HR crop in the source image.
    pub crop: (usize, usize, usize),
}

/// Magnification `m ~ U(scale_min, scale_max)`.
pub fn draw_scale(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> f64 {
    cfg.scale_min + rng.gen::<f64>() * (cfg.scale_max - cfg.scale_min)
}

/// Draws one pair. `Ok(None)` signals that `img` is too small for the drawn
/// magnification so the caller can resample.
pub fn sample_training_pair(
    img: &ImageTensor,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<TrainingPair>> {
    let m = draw_scale(cfg, rng);
    let side = crop_size(cfg.lr_patch, m);
    if side > img.height() || side > img.width() {
        return Ok(None);
    }
    let scale = side as f64 / cfg.lr_patch as f64;
    let y = rng.gen_range(0..=img.height() - side);
    let x = rng.gen_range(0..=img.width() - side);
    let crop = img.crop(y, x, side, side)?;
    let lr = degrade(&crop, scale, cfg.lr_patch)?;
    let full = build_query_set(cfg.lr_patch, cfg.lr_patch, scale)?;
    debug_assert_eq!(full.out_dims, Some((side, side)));
    let picked = sample_indices(rng, side * side, cfg.n_query).into_vec();
    let rgb = picked
        .iter()
        .map(|&i| crop.pixel(i / side, i % side))
        .collect();
    Ok(Some(TrainingPair {
        lr,
        queries: full.select(&picked),
        rgb,
        cell: full.cell,
        scale,
        crop: (y, x, side),
    }))
}

pub struct Batch {
    pub lr: Tensor,
    pub queries: QueryBatch,
    pub target: Tensor,
    pub scale_mean: f64,
}

impl Batch {
    pub fn new(pairs: &[TrainingPair], device: &Device, dtype: DType) -> Result<Self> {
        let lrs: Vec<Tensor> = pairs
            .iter()
            .map(|p| p.lr.to_tensor(device, dtype))
            .collect::<Result<_>>()?;
        let sets: Vec<&QuerySet> = pairs.iter().map(|p| &p.queries).collect();
        let n = sets[0].len();
        let target: Vec<f32> = pairs
            .iter()
            .flat_map(|p| p.rgb.iter().flatten().copied())
            .collect();
        Ok(Self {
            lr: Tensor::cat(&lrs, 0)?,
            queries: QueryBatch::new(&sets, device, dtype)?,
            target: Tensor::from_vec(target, (pairs.len(), n, 3), device)?.to_dtype(dtype)?,
            scale_mean: pairs.iter().map(|p| p.scale).sum::<f64>() / pairs.len() as f64,
        })
    }
}

/// Mean absolute error between the unclamped prediction and the target.
pub fn l1_loss(model: &IsteModel, batch: &Batch, tracked: bool) -> Result<Tensor> {
    let pred = model.forward_batch(&batch.lr, &batch.queries, tracked)?;
    Ok((pred.rgb - &batch.target)?.abs()?.mean_all()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub scale_mean: f64,
}

/// Model plus the Adam state that updates it.
pub struct Trainer {
    pub model: IsteModel,
    opt: AdamW,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: IsteModel, step_size: f64) -> Result<Self> {
        let opt = AdamW::new(
            model.params().vars(),
            ParamsAdamW {
                lr: step_size,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                weight_decay: 0.0,
            },
        )?;
        Ok(Self {
            model,
            opt,
            step: 0,
        })
    }

    /// One optimizer step; stops at the first non-finite gradient (in parameter name order).
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossRecord> {
        self.step += 1;
        let loss = l1_loss(&self.model, batch, true)?;
        let grads = loss.backward()?;
        for (name, var) in self.model.params().iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let finite = g
                    .to_dtype(DType::F64)?
                    .flatten_all()?
                    .to_vec1::<f64>()?
                    .iter()
                    .all(|v| v.is_finite());
                if !finite {
                    return Err(Error::NonFinite {
                        step: self.step,
                        param: name.to_string(),
                    });
                }
            }
        }
        let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                param: "<loss>".into(),
            });
        }
        self.opt.step(&grads)?;
        Ok(LossRecord {
            step: self.step,
            loss: loss_value,
            lr: self.opt.learning_rate(),
            scale_mean: batch.scale_mean,
        })
    }
}

/// Draws a batch; images too small for the drawn scale are replaced by random others.
pub fn sample_batch(
    images: &[LoadedImage],
    order: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TrainingPair>> {
    const MAX_RESAMPLE: usize = 64;
    let mut pairs = Vec::with_capacity(order.len());
    for &first in order {
        let mut idx = first;
        let mut attempts = 0;
        loop {
            if let Some(pair) = sample_training_pair(&images[idx].image, cfg, rng)? {
                pairs.push(pair);
                break;
            }
            attempts += 1;
            if attempts >= MAX_RESAMPLE {
                return Err(Error::Data(format!(
                    "no training image is large enough for lr_patch {} at scales up to {}",
                    cfg.lr_patch, cfg.scale_max
                )));
            }
            idx = rng.gen_range(0..images.len());
        }
    }
    Ok(pairs)
}

/// Mean PSNR over `images` and `scales`.
pub fn validate(model: &IsteModel, images: &[LoadedImage], scales: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for img in images {
        for &s in scales {
            let (lr, hr) = eval_pair(&img.image, s)?;
            total += psnr(&model.forward(&lr, s)?, &hr)?;
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { total / n as f64 })
}

pub struct TrainReport {
    pub model: IsteModel,
    pub log: Vec<LossRecord>,
    pub best_val_psnr: Option<f64>,
}

/// Full training run. With `out_dir`, writes `loss.jsonl`, `last.ckpt` and
/// (when a validation split is given) `best.ckpt`.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_images: &[LoadedImage],
    val_images: &[LoadedImage],
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_images.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let model = IsteModel::new(model_cfg.clone(), cfg.seed, &Device::Cpu, DType::F32)?;
    let mut trainer = Trainer::new(model, cfg.step_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("loss.jsonl"))?)
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut best: Option<f64> = None;
    let mut order: Vec<usize> = (0..train_images.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let pairs = sample_batch(train_images, chunk, cfg, &mut rng)?;
            let batch = Batch::new(&pairs, &Device::Cpu, DType::F32)?;
            let rec = trainer.train_step(&batch)?;
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec).expect("plain record"))?;
            }
            log.push(rec);
        }
        if cfg.val_every > 0 && epoch % cfg.val_every == 0 && !val_images.is_empty() {
            let score = validate(&trainer.model, val_images, &cfg.val_scales)?;
            log::info!(
                "epoch {epoch} step {} validation PSNR {score:.3} dB",
                trainer.step
            );
            if best.is_none_or(|b| score > b) {
                best = Some(score);
                if let Some(dir) = out_dir {
                    checkpoint::save(&trainer.model, trainer.step, dir.join("best.ckpt"))?;
                }
            }
        }
        if let Some((dir, last)) = out_dir.zip(log.last()) {
            if cfg.val_every > 0 && epoch % cfg.val_every == 0 {
                checkpoint::save(&trainer.model, trainer.step, dir.join("last.ckpt"))?;
            }
            log::debug!("epoch {epoch} loss {:.5}", last.loss);
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&trainer.model, trainer.step, dir.join("last.ckpt"))?;
    }
    Ok(TrainReport {
        model: trainer.model,
        log,
        best_val_psnr: best,
    })
}
