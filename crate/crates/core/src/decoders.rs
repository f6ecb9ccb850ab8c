//! Pixel decoder with local ensemble, texture decoder, and their sum.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::encoder::FEATURE_DIM;
use crate::error::{shape, Result};
use crate::nn::{init_mlp, mlp, ParamStore, Weights};

/// Pixel feature, relative offset `(dy, dx)`, and cell `(cy, cx)`.
pub const LPD_INPUT: usize = FEATURE_DIM + 2 + 2;

fn dims(input: usize, hidden: &[usize]) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(3);
    d
}

pub fn init_pixel(store: &mut ParamStore, rng: &mut ChaCha8Rng, hidden: &[usize]) -> Result<()> {
    init_mlp(store, rng, "lpd", &dims(LPD_INPUT, hidden))
}

pub fn init_texture(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    texture_dim: usize,
    hidden: &[usize],
) -> Result<()> {
    init_mlp(store, rng, "ltd", &dims(texture_dim, hidden))
}

/// Ensemble pixel decoding.
///
/// `feat (B, N, 64)` is the fused feature at each query, `offsets (B, 4, N, 2)`
/// the query-to-neighbour offsets, `cell (B, 2)`, and `weights (B, 4, N, 1)`
/// the normalized area weights. Returns `(B, N, 3)`.
pub fn decode_pixel(
    w: &Weights,
    layers: usize,
    feat: &Tensor,
    offsets: &Tensor,
    cell: &Tensor,
    weights: &Tensor,
) -> Result<Tensor> {
    let (b, n, c) = feat.dims3()?;
    if c != FEATURE_DIM
        || offsets.dims() != [b, 4, n, 2]
        || weights.dims() != [b, 4, n, 1]
        || cell.dims() != [b, 2]
    {
        return Err(shape(format!(
            "pixel decoder inputs misaligned: feat {:?}, offsets {:?}, cell {:?}, weights {:?}",
            feat.dims(),
            offsets.dims(),
            cell.dims(),
            weights.dims()
        )));
    }
    let feat4 = feat.unsqueeze(1)?.broadcast_as((b, 4, n, c))?;
    let cell4 = cell.reshape((b, 1, 1, 2))?.broadcast_as((b, 4, n, 2))?;
    let input = Tensor::cat(&[&feat4, offsets, &cell4], 3)?;
    let rgb =
        mlp(w, "lpd", layers, &input.reshape((b, 4 * n, LPD_INPUT))?)?.reshape((b, 4, n, 3))?;
    Ok(rgb.broadcast_mul(weights)?.sum(1)?)
}

/// `(B, N, T)` -> `(B, N, 3)`.
pub fn decode_texture(w: &Weights, layers: usize, f_tl: &Tensor) -> Result<Tensor> {
    mlp(w, "ltd", layers, f_tl)
}

/// Texture decoding evaluated separately for each ensemble neighbour:
/// `f_tl (B, 4, N, T)`, `weights (B, 4, N, 1)`.
pub fn decode_texture_ensemble(
    w: &Weights,
    layers: usize,
    f_tl: &Tensor,
    weights: &Tensor,
) -> Result<Tensor> {
    let rgb = mlp(w, "ltd", layers, f_tl)?;
    Ok(rgb.broadcast_mul(weights)?.sum(1)?)
}

/// Spatial-domain sum of the two branches. Unclamped; clamping happens when an image is emitted.
pub fn predict(pixel: &Tensor, texture: &Tensor) -> Result<Tensor> {
    if pixel.dims() != texture.dims() {
        return Err(shape(format!(
            "cannot add {:?} and {:?}",
            pixel.dims(),
            texture.dims()
        )));
    }
    Ok((pixel + texture)?)
}
