//! Texture learner: per-position amplitude and x/y frequency maps plus a
//! scale-dependent phase, combined into sinusoidal texture features
//!
//! ```text
//! F_TL[c] = Amp[c] * sin(FreqX[c] * dx + FreqY[c] * dy + Phase[c])
//! ```
//!
//! where `(dy, dx)` is the query's local grid and the maps are sampled at the
//! query's nearest LR cell. The scalar offsets multiply every frequency
//! channel. `Phase` is `sigmoid(A * cell + b)`, one vector per output scale.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::encoder::FEATURE_DIM;
use crate::error::{invalid, shape, Result};
use crate::nn::{conv3x3, linear, sigmoid, Padding, ParamStore, Weights};

pub const MAPS: [&str; 3] = ["tl.amp", "tl.freq_x", "tl.freq_y"];

pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, texture_dim: usize) -> Result<()> {
    for name in MAPS {
        store.init_weight(
            rng,
            format!("{name}.w"),
            &[texture_dim, 3, 3, FEATURE_DIM],
            9 * FEATURE_DIM,
        )?;
        store.init_zeros(format!("{name}.b"), &[texture_dim])?;
    }
    store.init_weight(rng, "tl.phase.w", &[texture_dim, 2], 2)?;
    store.init_zeros("tl.phase.b", &[texture_dim])
}

/// Plain convolutional replacement used when the texture learner is ablated.
pub fn init_plain(store: &mut ParamStore, rng: &mut ChaCha8Rng, texture_dim: usize) -> Result<()> {
    store.init_weight(
        rng,
        "tl.conv.w",
        &[texture_dim, 3, 3, FEATURE_DIM],
        9 * FEATURE_DIM,
    )?;
    store.init_zeros("tl.conv.b", &[texture_dim])
}

fn check_input(f: &Tensor) -> Result<()> {
    let (_, c, _, _) = f.dims4()?;
    if c != FEATURE_DIM {
        return Err(invalid(format!(
            "texture learner expects {FEATURE_DIM} channels, got {c}"
        )));
    }
    Ok(())
}

/// `(Amp, FreqX, FreqY)`, each `(B, T, H, W)`. The three convolutions run as
/// one stacked convolution.
pub fn maps(w: &Weights, f_lr: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    check_input(f_lr)?;
    let weights: Vec<&Tensor> = MAPS
        .iter()
        .map(|n| w.get(&format!("{n}.w")))
        .collect::<Result<_>>()?;
    let biases: Vec<&Tensor> = MAPS
        .iter()
        .map(|n| w.get(&format!("{n}.b")))
        .collect::<Result<_>>()?;
    let t = weights[0].dim(0)?;
    let stacked = conv3x3(
        f_lr,
        &Tensor::cat(&weights, 0)?,
        Some(&Tensor::cat(&biases, 0)?),
        Padding::Zero,
    )?;
    Ok((
        stacked.narrow(1, 0, t)?,
        stacked.narrow(1, t, t)?,
        stacked.narrow(1, 2 * t, t)?,
    ))
}

/// Output of the ablation conv, `(B, T, H, W)`.
pub fn plain_map(w: &Weights, f_lr: &Tensor) -> Result<Tensor> {
    check_input(f_lr)?;
    conv3x3(
        f_lr,
        w.get("tl.conv.w")?,
        Some(w.get("tl.conv.b")?),
        Padding::Zero,
    )
}

/// `cell (B, 2)` as `(cy, cx)` -> phase `(B, T)`.
pub fn phase(w: &Weights, cell: &Tensor) -> Result<Tensor> {
    sigmoid(&linear(
        cell,
        w.get("tl.phase.w")?,
        Some(w.get("tl.phase.b")?),
    )?)
}

/// Sinusoidal synthesis for gathered maps `(B, N, T)`, local grid `(B, N, 2)`
/// as `(dy, dx)`, and phase `(B, T)`.
pub fn synthesize(
    amp: &Tensor,
    freq_x: &Tensor,
    freq_y: &Tensor,
    local: &Tensor,
    phase: &Tensor,
) -> Result<Tensor> {
    let (b, n, t) = amp.dims3()?;
    if freq_x.dims() != amp.dims() || freq_y.dims() != amp.dims() {
        return Err(shape("amplitude and frequency maps must align"));
    }
    if local.dims() != [b, n, 2] {
        return Err(shape(format!(
            "local grid {:?} does not match {n} queries",
            local.dims()
        )));
    }
    if phase.dims() != [b, t] {
        return Err(shape(format!(
            "phase {:?} does not match texture dim {t}",
            phase.dims()
        )));
    }
    let dy = local.narrow(2, 0, 1)?;
    let dx = local.narrow(2, 1, 1)?;
    let arg = (freq_x.broadcast_mul(&dx)? + freq_y.broadcast_mul(&dy)?)?
        .broadcast_add(&phase.unsqueeze(1)?)?;
    Ok((amp * arg.sin()?)?)
}
