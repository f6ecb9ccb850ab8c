//! Local feature interaction: every position attends over ten sources drawn
//! from its 3x3 window — itself, the window average, and its eight
//! neighbours — with one projection set shared by all windows.
//!
//! Logits are `q . k / sqrt(d)` followed by a standard softmax over the ten
//! sources. Windows at the border see replicated edge features.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::encoder::FEATURE_DIM;
use crate::error::{invalid, Result};
use crate::nn::{softmax, window_taps, Padding, ParamStore, Weights};

pub const N_SOURCES: usize = 10;

pub fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, attn_dim: usize) -> Result<()> {
    store.init_weight(rng, "lfi.wq", &[attn_dim, FEATURE_DIM], FEATURE_DIM)?;
    store.init_weight(rng, "lfi.wk", &[attn_dim, FEATURE_DIM], FEATURE_DIM)?;
    store.init_weight(rng, "lfi.wv", &[FEATURE_DIM, FEATURE_DIM], FEATURE_DIM)
}

/// 1x1 projection of `(B, C, H, W)` by `(C_out, C)`.
fn project(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let c_out = weight.dim(0)?;
    let y = weight
        .broadcast_left(b)?
        .contiguous()?
        .matmul(&x.reshape((b, c, h * w))?)?;
    Ok(y.reshape((b, c_out, h, w))?)
}

/// Ten source maps in order: centre, window mean, then the eight neighbours
/// row-major. Projection is linear, so projecting once and then shifting or
/// pooling equals projecting each source vector.
fn sources(map: &Tensor) -> Result<Vec<Tensor>> {
    let taps = window_taps(map, Padding::Replicate)?;
    let pooled = (Tensor::stack(&taps, 0)?.sum(0)? / 9.0)?;
    let mut out = Vec::with_capacity(N_SOURCES);
    out.push(taps[4].clone());
    out.push(pooled);
    for (i, t) in taps.into_iter().enumerate() {
        if i != 4 {
            out.push(t);
        }
    }
    Ok(out)
}

fn check_input(f: &Tensor) -> Result<()> {
    let (_, c, h, w) = f.dims4()?;
    if c != FEATURE_DIM {
        return Err(invalid(format!(
            "LFI expects {FEATURE_DIM} channels, got {c}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(invalid("LFI input must be non-empty"));
    }
    Ok(())
}

/// Attention weights `(B, 10, H, W)`.
pub fn attention(w: &Weights, f_lr: &Tensor) -> Result<Tensor> {
    check_input(f_lr)?;
    let wq = w.get("lfi.wq")?;
    let d = wq.dim(0)?;
    let q = project(f_lr, wq)?;
    let keys = sources(&project(f_lr, w.get("lfi.wk")?)?)?;
    let logits: Vec<Tensor> = keys
        .iter()
        .map(|k| (&q * k)?.sum_keepdim(1))
        .collect::<candle_core::Result<_>>()?;
    let logits = (Tensor::cat(&logits, 1)? / (d as f64).sqrt())?;
    softmax(&logits, 1)
}

/// `(B, 64, H, W)` -> `(B, 64, H, W)`.
pub fn forward(w: &Weights, f_lr: &Tensor) -> Result<Tensor> {
    let attn = attention(w, f_lr)?;
    let values = sources(&project(f_lr, w.get("lfi.wv")?)?)?;
    let mut out: Option<Tensor> = None;
    for (i, v) in values.iter().enumerate() {
        let term = v.broadcast_mul(&attn.narrow(1, i, 1)?)?;
        out = Some(match out {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(out.expect("ten sources"))
}
