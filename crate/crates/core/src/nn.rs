//! Parameter storage and the handful of layers the network stages need.
//!
//! Convolutions are lowered to im2col + matmul so their backward pass is
//! plain matmuls; candle's native conv backward is much slower on CPU.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape, Result};

/// Ordered, named collection of learnable arrays.
#[derive(Debug, Clone)]
pub struct ParamStore {
    device: Device,
    dtype: DType,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType) -> Self {
        Self {
            device,
            dtype,
            vars: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        values: Vec<f64>,
    ) -> Result<()> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.vars.insert(name.into(), Var::from_tensor(&t)?);
        Ok(())
    }

    /// Fan-in scaled uniform init `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init_weight(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, shape, values)
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![0.0; n])
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Total scalar count.
    pub fn census(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Scalar count per top-level module prefix (`encoder`, `lfi`, ...).
    pub fn census_by_module(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.vars {
            let module = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(module).or_insert(0) += v.elem_count();
        }
        out
    }

    /// Snapshot of every parameter as `f32`, for checkpoints and comparisons.
    pub fn to_f32(&self) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.vars {
            let values = v
                .as_tensor()
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?;
            out.insert(name.clone(), (v.dims().to_vec(), values));
        }
        Ok(out)
    }

    /// Overwrites a parameter in place, keeping its shape.
    pub fn set(&self, name: &str, values: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| shape(format!("unknown parameter `{name}`")))?;
        if var.dims() != values.dims() {
            return Err(shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                values.dims()
            )));
        }
        var.set(&values.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        Ok(())
    }

    /// Deep copy with fresh storage, optionally converted to `dtype`.
    pub fn duplicate(&self, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, v) in &self.vars {
            let t = v.as_tensor().to_dtype(dtype)?.copy()?;
            vars.insert(name.clone(), Var::from_tensor(&t)?);
        }
        Ok(Self {
            device: self.device.clone(),
            dtype,
            vars,
        })
    }
}

/// Resolved parameter tensors for one forward pass.
///
/// `tracked` tensors stay attached to their [`Var`]s so gradients flow;
/// detached ones keep inference from recording a graph.
pub struct Weights {
    map: BTreeMap<String, Tensor>,
}

impl Weights {
    pub fn new(store: &ParamStore, tracked: bool) -> Self {
        let map = store
            .iter()
            .map(|(k, v)| {
                let t = if tracked {
                    v.as_tensor().clone()
                } else {
                    v.as_tensor().detach()
                };
                (k.to_string(), t)
            })
            .collect();
        Self { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| shape(format!("missing parameter `{name}`")))
    }

    pub fn opt(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

fn pad1(x: &Tensor, padding: Padding) -> Result<Tensor> {
    Ok(match padding {
        Padding::Zero => x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?,
        Padding::Replicate => x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?,
    })
}

/// The nine 3x3 window taps of `x`, row-major `(dy, dx)`, each `(B, C, H, W)`.
pub fn window_taps(x: &Tensor, padding: Padding) -> Result<Vec<Tensor>> {
    let (_, _, h, w) = x.dims4()?;
    let p = pad1(x, padding)?;
    let mut taps = Vec::with_capacity(9);
    for dy in 0..3 {
        for dx in 0..3 {
            taps.push(p.narrow(2, dy, h)?.narrow(3, dx, w)?);
        }
    }
    Ok(taps)
}

/// 3x3 stride-1 "same" convolution.
///
/// `weight` has shape `(C_out, 3, 3, C_in)`; `bias` has shape `(C_out)`.
pub fn conv3x3(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    padding: Padding,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (c_out, kh, kw, c_in) = weight.dims4()?;
    if (kh, kw) != (3, 3) || c_in != c {
        return Err(shape(format!(
            "conv3x3 weight {:?} incompatible with input channels {c}",
            weight.dims()
        )));
    }
    let cols = Tensor::cat(&window_taps(x, padding)?, 1)?.reshape((b, 9 * c, h * w))?;
    let wmat = weight.reshape((c_out, 9 * c))?;
    let mut y = wmat.broadcast_left(b)?.contiguous()?.matmul(&cols)?;
    if let Some(bias) = bias {
        y = y.broadcast_add(&bias.reshape((1, c_out, 1))?)?;
    }
    Ok(y.reshape((b, c_out, h, w))?)
}

/// Affine map over the last dim: `x (.., in) * W^T (in, out) + b`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (rows, c_in) = (
        dims[..dims.len() - 1].iter().product::<usize>(),
        dims[dims.len() - 1],
    );
    let mut out_dims = dims;
    *out_dims.last_mut().expect("rank >= 1") = weight.dim(0)?;
    let y = x
        .reshape((rows, c_in))?
        .matmul(&weight.t()?)?
        .reshape(out_dims)?;
    Ok(match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Logistic sigmoid built from differentiable primitives.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Softmax over `dim`, max-shifted for stability.
pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let shift = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    let z = e.sum_keepdim(dim)?;
    Ok(e.broadcast_div(&z)?)
}

/// Registers an MLP `in -> hidden.. -> out` under `prefix.{i}.w/b`.
pub fn init_mlp(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    dims: &[usize],
) -> Result<()> {
    for (i, pair) in dims.windows(2).enumerate() {
        store.init_weight(rng, format!("{prefix}.{i}.w"), &[pair[1], pair[0]], pair[0])?;
        store.init_zeros(format!("{prefix}.{i}.b"), &[pair[1]])?;
    }
    Ok(())
}

/// Runs an MLP registered with [`init_mlp`]; SiLU between layers, none after the last.
pub fn mlp(weights: &Weights, prefix: &str, layers: usize, x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for i in 0..layers {
        h = linear(
            &h,
            weights.get(&format!("{prefix}.{i}.w"))?,
            Some(weights.get(&format!("{prefix}.{i}.b"))?),
        )?;
        if i + 1 < layers {
            h = silu(&h)?;
        }
    }
    Ok(h)
}

/// `(B, C, H, W)` -> `(B, H*W, C)` token layout.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Gathers rows of `(B, N, C)` by per-batch indices `(B, M)` -> `(B, M, C)`.
pub fn gather_rows(tokens: &Tensor, index: &Tensor) -> Result<Tensor> {
    let (b, n, c) = tokens.dims3()?;
    let (bi, m) = index.dims2()?;
    if bi != b {
        return Err(shape(format!("gather batch {bi} vs {b}")));
    }
    let offsets = Tensor::arange(0u32, b as u32, tokens.device())?
        .affine(n as f64, 0.0)?
        .reshape((b, 1))?;
    let flat = index.broadcast_add(&offsets)?.flatten_all()?;
    Ok(tokens
        .reshape((b * n, c))?
        .index_select(&flat, 0)?
        .reshape((b, m, c))?)
}

/// Sum of squares over the last dim, kept.
pub fn sq_norm(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?.sum_keepdim(D::Minus1)?)
}
