//! Small deterministic models and images.

#![allow(dead_code)]

use candle_core::{DType, Device};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use texsr_core::encoder::EncoderConfig;
use texsr_core::{ImageTensor, IsteModel, ModelConfig};

/// Reduced widths that keep every module path live.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { n_blocks: 2 },
        texture_dim: 16,
        attn_dim: 16,
        lpd_hidden: vec![32, 32],
        ltd_hidden: vec![32],
        fusion_hidden: 32,
        ..ModelConfig::default()
    }
}

pub fn small_model(seed: u64) -> IsteModel {
    IsteModel::new(small_config(), seed, &Device::Cpu, DType::F32).unwrap()
}

pub fn model_with(cfg: ModelConfig, seed: u64) -> IsteModel {
    IsteModel::new(cfg, seed, &Device::Cpu, DType::F32).unwrap()
}

pub fn noise_image(h: usize, w: usize, seed: u64) -> ImageTensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::from_fn(h, w, |_, _| [r.gen(), r.gen(), r.gen()])
}

/// 96x96 image made of three colored plane waves whose periods divide 96.
pub fn periodic_texture(seed: u64) -> ImageTensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            (
                r.gen_range(4..14) as f32,
                r.gen_range(-10i32..10) as f32,
                r.gen_range(0.0..std::f32::consts::TAU),
                [
                    r.gen_range(0.05..0.2),
                    r.gen_range(0.05..0.2),
                    r.gen_range(0.05..0.2),
                ],
            )
        })
        .collect();
    ImageTensor::from_fn(96, 96, |y, x| {
        let mut c = [0.5f32; 3];
        for (fx, fy, phase, amp) in &waves {
            let s = (std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) / 96.0 + phase).sin();
            for k in 0..3 {
                c[k] += amp[k] * s;
            }
        }
        c
    })
}
