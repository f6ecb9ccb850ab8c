//! Self-texture fusion: every pixel feature retrieves its most similar
//! texture vector (cosine similarity, hard argmax over all texture
//! positions of the same image), and the retrieved vector is fused back in
//! weighted by the similarity it was found with.
//!
//! Pixel features are projected to the texture dimension before comparison
//! so the two sets share an inner-product space.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::encoder::FEATURE_DIM;
use crate::error::{shape, Result};
use crate::nn::{gather_rows, init_mlp, linear, mlp, sq_norm, ParamStore, Weights};

/// Added to vector norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

pub const DEFAULT_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Flat position of the best-matching texture vector per query.
    pub index: Vec<u32>,
    /// Cosine similarity of that match, in `[-1, 1]`.
    pub confidence: Vec<f32>,
}

pub fn init(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    texture_dim: usize,
    hidden: usize,
) -> Result<()> {
    store.init_weight(
        rng,
        "stf.query_proj.w",
        &[texture_dim, FEATURE_DIM],
        FEATURE_DIM,
    )?;
    init_mlp(
        store,
        rng,
        "stf.fusion",
        &[FEATURE_DIM + texture_dim, hidden, FEATURE_DIM],
    )
}

fn normalized_rows(data: &[f64], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_EPS;
        out.extend(row.iter().map(|v| v / norm));
    }
    out
}

/// Exhaustive cosine argmax of each of `queries` (`N x dim`, row-major)
/// against `keys` (`M x dim`). Ties resolve to the lowest key index. Queries
/// are processed `chunk` at a time; each query's answer is independent of
/// the chunking.
pub fn retrieve(
    queries: &[f64],
    keys: &[f64],
    dim: usize,
    chunk: usize,
) -> Result<RetrievalResult> {
    if dim == 0 || queries.len() % dim != 0 || keys.len() % dim != 0 {
        return Err(shape(format!("retrieval rows must have length {dim}")));
    }
    if keys.is_empty() {
        return Err(shape("retrieval needs at least one key"));
    }
    let q = normalized_rows(queries, dim);
    let k = normalized_rows(keys, dim);
    let n = q.len() / dim;
    let mut index = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for block in q.chunks(dim * chunk.max(1)) {
        for qi in block.chunks(dim) {
            let mut best = (0u32, f64::NEG_INFINITY);
            for (j, kj) in k.chunks(dim).enumerate() {
                let r: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                if r > best.1 {
                    best = (j as u32, r);
                }
            }
            index.push(best.0);
            confidence.push(best.1 as f32);
        }
    }
    Ok(RetrievalResult { index, confidence })
}

/// Batched retrieval over `(B, N, D)` queries and `(B, M, D)` keys; returns
/// `(B, N)` indices. No gradient flows through the argmax.
pub fn retrieve_batched(queries: &Tensor, keys: &Tensor, chunk: usize) -> Result<Tensor> {
    let (b, n, d) = queries.dims3()?;
    let (bk, _, dk) = keys.dims3()?;
    if b != bk || d != dk {
        return Err(shape(format!(
            "queries {:?} vs keys {:?}",
            queries.dims(),
            keys.dims()
        )));
    }
    let qv: Vec<Vec<Vec<f64>>> = queries.detach().to_dtype(DType::F64)?.to_vec3()?;
    let kv: Vec<Vec<Vec<f64>>> = keys.detach().to_dtype(DType::F64)?.to_vec3()?;
    let mut out = Vec::with_capacity(b * n);
    for (qb, kb) in qv.iter().zip(&kv) {
        let qf: Vec<f64> = qb.iter().flatten().copied().collect();
        let kf: Vec<f64> = kb.iter().flatten().copied().collect();
        out.extend(retrieve(&qf, &kf, d, chunk)?.index);
    }
    Ok(Tensor::from_vec(out, (b, n), queries.device())?)
}

fn unit(x: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_div(&(sq_norm(x)?.sqrt()? + NORM_EPS)?)?)
}

/// Differentiable similarity of each query with its retrieved key, `(B, N, 1)`.
pub fn confidence(queries: &Tensor, keys: &Tensor, index: &Tensor) -> Result<Tensor> {
    let picked = gather_rows(&unit(keys)?, index)?;
    Ok((unit(queries)? * picked)?.sum_keepdim(2)?)
}

/// `F_STF = F_LFIC + MLP(concat(F_LFIC, V[T])) * S`.
pub fn fuse(
    w: &Weights,
    f_lfic: &Tensor,
    values: &Tensor,
    index: &Tensor,
    conf: &Tensor,
) -> Result<Tensor> {
    let (b, n, c) = f_lfic.dims3()?;
    if c != FEATURE_DIM {
        return Err(shape(format!(
            "pixel features must have {FEATURE_DIM} channels, got {c}"
        )));
    }
    if index.dims() != [b, n] || conf.dims() != [b, n, 1] {
        return Err(shape("index/confidence must align with the pixel features"));
    }
    let retrieved = gather_rows(values, index)?;
    let z = mlp(w, "stf.fusion", 2, &Tensor::cat(&[f_lfic, &retrieved], 2)?)?;
    Ok((f_lfic + z.broadcast_mul(conf)?)?)
}

/// Full fusion step: project, retrieve, fuse. Keys double as values.
pub fn forward(w: &Weights, f_lfic: &Tensor, texture: &Tensor, chunk: usize) -> Result<Tensor> {
    let q = linear(f_lfic, w.get("stf.query_proj.w")?, None)?;
    let index = retrieve_batched(&q, texture, chunk)?;
    let conf = confidence(&q, texture, &index)?;
    fuse(w, f_lfic, texture, &index, &conf)
}
