//! Residual convolutional feature extractor producing the 64-channel LR feature map.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{conv3x3, silu, Padding, ParamStore, Weights};

/// Channel count of every feature map handed to the heads.
pub const FEATURE_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { n_blocks: 8 }
    }
}

fn conv_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
) -> Result<()> {
    store.init_weight(rng, format!("{name}.w"), &[c_out, 3, 3, c_in], 9 * c_in)?;
    store.init_zeros(format!("{name}.b"), &[c_out])
}

pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &EncoderConfig) -> Result<()> {
    conv_params(store, rng, "encoder.head", 3, FEATURE_DIM)?;
    for i in 0..cfg.n_blocks {
        conv_params(
            store,
            rng,
            &format!("encoder.blocks.{i}.conv1"),
            FEATURE_DIM,
            FEATURE_DIM,
        )?;
        conv_params(
            store,
            rng,
            &format!("encoder.blocks.{i}.conv2"),
            FEATURE_DIM,
            FEATURE_DIM,
        )?;
    }
    conv_params(store, rng, "encoder.tail", FEATURE_DIM, FEATURE_DIM)
}

fn conv(w: &Weights, name: &str, x: &Tensor) -> Result<Tensor> {
    conv3x3(
        x,
        w.get(&format!("{name}.w"))?,
        Some(w.get(&format!("{name}.b"))?),
        Padding::Zero,
    )
}

/// `(B, 3, H, W)` -> `(B, 64, H, W)`.
pub fn forward(w: &Weights, cfg: &EncoderConfig, img: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = img.dims4()?;
    if c != 3 {
        return Err(invalid(format!(
            "encoder expects 3 input channels, got {c}"
        )));
    }
    let mut x = conv(w, "encoder.head", img)?;
    for i in 0..cfg.n_blocks {
        let h = silu(&conv(w, &format!("encoder.blocks.{i}.conv1"), &x)?)?;
        let h = conv(w, &format!("encoder.blocks.{i}.conv2"), &h)?;
        x = (x + h)?;
    }
    conv(w, "encoder.tail", &x)
}
