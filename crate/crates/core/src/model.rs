//! Full two-branch network: encoder, pixel branch (LFI, STF, pixel decoder)
//! and texture branch (texture learner, texture decoder).
//!
//! Everything that depends only on the LR cell a query falls into is
//! evaluated once on the LR grid and then gathered per query; nearest
//! upsampling followed by a per-position map equals the map followed by
//! nearest upsampling.
//!
//! Coordinates reach the networks in LR pixel units (normalized offsets and
//! cells multiplied by half the LR extent), so one set of weights behaves the
//! same on a training patch, a full image, or a tile.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoders;
use crate::encoder::{self, EncoderConfig, FEATURE_DIM};
use crate::error::{invalid, shape, Result};
use crate::geometry::{build_query_set, ensemble_neighbors_dims, FeatureMap, QuerySet};
use crate::image::ImageTensor;
use crate::lfi;
use crate::nn::{gather_rows, to_tokens, ParamStore, Weights};
use crate::stf;
use crate::texture;

/// Queries decoded per chunk at inference.
pub const INFER_CHUNK: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub feature_dim: usize,
    pub texture_dim: usize,
    pub attn_dim: usize,
    pub lpd_hidden: Vec<usize>,
    pub ltd_hidden: Vec<usize>,
    pub fusion_hidden: usize,
    pub use_lfi: bool,
    pub use_stf: bool,
    pub use_tl: bool,
    pub use_ltd: bool,
    /// Evaluate the texture branch per ensemble neighbour instead of once per query.
    pub per_neighbor_texture: bool,
    pub retrieval_chunk: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            feature_dim: FEATURE_DIM,
            texture_dim: 256,
            attn_dim: 64,
            lpd_hidden: vec![256; 4],
            ltd_hidden: vec![256],
            fusion_hidden: 256,
            use_lfi: true,
            use_stf: true,
            use_tl: true,
            use_ltd: true,
            per_neighbor_texture: false,
            retrieval_chunk: stf::DEFAULT_CHUNK,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim != FEATURE_DIM {
            return Err(invalid(format!(
                "feature_dim is fixed at {FEATURE_DIM}, got {}",
                self.feature_dim
            )));
        }
        if self.texture_dim == 0
            || self.attn_dim == 0
            || self.fusion_hidden == 0
            || self.retrieval_chunk == 0
        {
            return Err(invalid(
                "texture_dim, attn_dim, fusion_hidden and retrieval_chunk must be positive",
            ));
        }
        if self.lpd_hidden.contains(&0) || self.ltd_hidden.contains(&0) {
            return Err(invalid("decoder hidden widths must be positive"));
        }
        Ok(())
    }

    fn texture_needed(&self) -> bool {
        self.use_stf || self.use_ltd
    }
}

/// The full model and its four single-module ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoLfi,
    NoStf,
    NoTl,
    NoLtd,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoLfi,
        Variant::NoStf,
        Variant::NoTl,
        Variant::NoLtd,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::NoLfi => "w/o LFI",
            Variant::NoStf => "w/o STF",
            Variant::NoTl => "w/o TL",
            Variant::NoLtd => "w/o LTD",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoLfi => cfg.use_lfi = false,
            Variant::NoStf => cfg.use_stf = false,
            Variant::NoTl => cfg.use_tl = false,
            Variant::NoLtd => cfg.use_ltd = false,
        }
        cfg
    }
}

/// Query tensors for a batch of equally sized query sets over equally sized LR grids.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub lr_h: usize,
    pub lr_w: usize,
    /// `(B, N)` flat LR index of the nearest cell.
    pub nearest: Tensor,
    /// `(B, N, 2)` local grid in LR pixels.
    pub local: Tensor,
    /// `(B, 4, N, 2)` query-to-neighbour offsets in LR pixels.
    pub offsets: Tensor,
    /// `(B, 4, N, 1)` ensemble weights.
    pub weights: Tensor,
    /// `(B, 4, N)` flat LR indices of the ensemble neighbours.
    pub neighbors: Tensor,
    /// `(B, 2)` cell in LR pixels.
    pub cell: Tensor,
}

impl QueryBatch {
    pub fn new(sets: &[&QuerySet], device: &Device, dtype: DType) -> Result<Self> {
        let first = sets.first().ok_or_else(|| invalid("empty query batch"))?;
        let (lr_h, lr_w, n) = (first.lr_h, first.lr_w, first.len());
        if n == 0 {
            return Err(invalid("query set is empty"));
        }
        let (sy, sx) = (lr_h as f64 / 2.0, lr_w as f64 / 2.0);
        let b = sets.len();
        let mut nearest = Vec::with_capacity(b * n);
        let mut local = Vec::with_capacity(b * n * 2);
        let mut offsets = vec![0.0f64; b * 4 * n * 2];
        let mut weights = vec![0.0f64; b * 4 * n];
        let mut neighbors = vec![0u32; b * 4 * n];
        let mut cell = Vec::with_capacity(b * 2);
        for (bi, q) in sets.iter().enumerate() {
            if (q.lr_h, q.lr_w, q.len()) != (lr_h, lr_w, n) {
                return Err(shape("query sets in a batch must share LR dims and length"));
            }
            cell.extend([q.cell[0] * sy, q.cell[1] * sx]);
            for i in 0..n {
                let [r, c] = q.nearest_lr_index[i];
                nearest.push((r * lr_w + c) as u32);
                let [dy, dx] = q.local_grid[i];
                local.extend([dy * sy, dx * sx]);
                let e = ensemble_neighbors_dims(q.hr_coords[i], lr_h, lr_w);
                for t in 0..4 {
                    let slot = (bi * 4 + t) * n + i;
                    offsets[slot * 2] = e.offsets[t][0] * sy;
                    offsets[slot * 2 + 1] = e.offsets[t][1] * sx;
                    weights[slot] = e.weights[t];
                    neighbors[slot] = (e.indices[t][0] * lr_w + e.indices[t][1]) as u32;
                }
            }
        }
        let f = |v: Vec<f64>, s: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, s, device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            lr_h,
            lr_w,
            nearest: Tensor::from_vec(nearest, (b, n), device)?,
            local: f(local, &[b, n, 2])?,
            offsets: f(offsets, &[b, 4, n, 2])?,
            weights: f(weights, &[b, 4, n, 1])?,
            neighbors: Tensor::from_vec(neighbors, (b, 4, n), device)?,
            cell: f(cell, &[b, 2])?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.nearest.dims()[0]
    }

    pub fn len(&self) -> usize {
        self.nearest.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Texture-branch state on the LR grid.
pub enum TextureState {
    Sinusoidal {
        amp: Tensor,
        freq_x: Tensor,
        freq_y: Tensor,
        phase: Tensor,
    },
    Plain(Tensor),
}

/// Per-image state computed once on the LR grid, tokens `(B, h*w, C)`.
pub struct LrFeatures {
    pub pixel: Tensor,
    pub texture: Option<TextureState>,
}

pub struct Prediction {
    pub pixel: Tensor,
    pub texture: Option<Tensor>,
    /// `(B, N, 3)`, unclamped.
    pub rgb: Tensor,
}

#[derive(Debug, Clone)]
pub struct IsteModel {
    cfg: ModelConfig,
    params: ParamStore,
}

impl IsteModel {
    pub fn new(cfg: ModelConfig, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(device.clone(), dtype);
        encoder::init(&mut store, &mut rng, &cfg.encoder)?;
        if cfg.use_lfi {
            lfi::init(&mut store, &mut rng, cfg.attn_dim)?;
        }
        if cfg.use_tl {
            texture::init(&mut store, &mut rng, cfg.texture_dim)?;
        } else {
            texture::init_plain(&mut store, &mut rng, cfg.texture_dim)?;
        }
        if cfg.use_stf {
            stf::init(&mut store, &mut rng, cfg.texture_dim, cfg.fusion_hidden)?;
        }
        decoders::init_pixel(&mut store, &mut rng, &cfg.lpd_hidden)?;
        if cfg.use_ltd {
            decoders::init_texture(&mut store, &mut rng, cfg.texture_dim, &cfg.ltd_hidden)?;
        }
        Ok(Self { cfg, params: store })
    }

    /// Parameter names and shapes implied by `cfg`.
    pub fn layout(cfg: &ModelConfig) -> Result<BTreeMap<String, Vec<usize>>> {
        let m = Self::new(cfg.clone(), 0, &Device::Cpu, DType::F32)?;
        Ok(m.params
            .iter()
            .map(|(k, v)| (k.to_string(), v.dims().to_vec()))
            .collect())
    }

    /// Wraps existing parameters, checking them against the layout `cfg` implies.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        let layout = Self::layout(&cfg)?;
        if layout.len() != params.len() {
            return Err(shape(format!(
                "expected {} parameter arrays, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, dims) in &layout {
            match params.get(name) {
                Some(v) if v.dims() == dims.as_slice() => {}
                Some(v) => {
                    return Err(shape(format!(
                        "parameter `{name}` expected {dims:?}, got {:?}",
                        v.dims()
                    )));
                }
                None => return Err(shape(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Same weights in a different float type.
    pub fn with_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            cfg: self.cfg.clone(),
            params: self.params.duplicate(dtype)?,
        })
    }

    pub fn weights(&self, tracked: bool) -> Weights {
        Weights::new(&self.params, tracked)
    }

    fn lpd_layers(&self) -> usize {
        self.cfg.lpd_hidden.len() + 1
    }

    fn ltd_layers(&self) -> usize {
        self.cfg.ltd_hidden.len() + 1
    }

    /// Texture keys/values for retrieval: texture features at the LR cell centres.
    fn texture_keys(state: &TextureState) -> Result<Tensor> {
        Ok(match state {
            TextureState::Sinusoidal { amp, phase, .. } => {
                amp.broadcast_mul(&phase.sin()?.unsqueeze(1)?)?
            }
            TextureState::Plain(map) => map.clone(),
        })
    }

    /// `lr (B, 3, h, w)`, `cell (B, 2)` in LR pixels.
    pub fn lr_stage(&self, w: &Weights, lr: &Tensor, cell: &Tensor) -> Result<LrFeatures> {
        let f_lr = encoder::forward(w, &self.cfg.encoder, lr)?;
        let f_lfi = if self.cfg.use_lfi {
            lfi::forward(w, &f_lr)?
        } else {
            f_lr.clone()
        };
        let texture = if self.cfg.texture_needed() {
            Some(if self.cfg.use_tl {
                let (amp, fx, fy) = texture::maps(w, &f_lr)?;
                TextureState::Sinusoidal {
                    amp: to_tokens(&amp)?,
                    freq_x: to_tokens(&fx)?,
                    freq_y: to_tokens(&fy)?,
                    phase: texture::phase(w, cell)?,
                }
            } else {
                TextureState::Plain(to_tokens(&texture::plain_map(w, &f_lr)?)?)
            })
        } else {
            None
        };
        let lfic = to_tokens(&f_lfi)?;
        let pixel = match (&texture, self.cfg.use_stf) {
            (Some(state), true) => stf::forward(
                w,
                &lfic,
                &Self::texture_keys(state)?,
                self.cfg.retrieval_chunk,
            )?,
            _ => lfic,
        };
        Ok(LrFeatures { pixel, texture })
    }

    /// Texture features at gathered positions `index (B, M)` with local offsets `(B, M, 2)`.
    fn texture_at(state: &TextureState, index: &Tensor, local: &Tensor) -> Result<Tensor> {
        match state {
            TextureState::Sinusoidal {
                amp,
                freq_x,
                freq_y,
                phase,
            } => texture::synthesize(
                &gather_rows(amp, index)?,
                &gather_rows(freq_x, index)?,
                &gather_rows(freq_y, index)?,
                local,
                phase,
            ),
            TextureState::Plain(map) => gather_rows(map, index),
        }
    }

    pub fn query_stage(
        &self,
        w: &Weights,
        feats: &LrFeatures,
        q: &QueryBatch,
    ) -> Result<Prediction> {
        let (b, n) = (q.batch_size(), q.len());
        let feat = gather_rows(&feats.pixel, &q.nearest)?;
        let pixel =
            decoders::decode_pixel(w, self.lpd_layers(), &feat, &q.offsets, &q.cell, &q.weights)?;
        let texture = match (&feats.texture, self.cfg.use_ltd) {
            (Some(state), true) => Some(if self.cfg.per_neighbor_texture {
                let idx = q.neighbors.reshape((b, 4 * n))?;
                let local = q.offsets.reshape((b, 4 * n, 2))?;
                let f_tl = Self::texture_at(state, &idx, &local)?;
                let t = f_tl.dim(2)?;
                decoders::decode_texture_ensemble(
                    w,
                    self.ltd_layers(),
                    &f_tl.reshape((b, 4, n, t))?,
                    &q.weights,
                )?
            } else {
                let f_tl = Self::texture_at(state, &q.nearest, &q.local)?;
                decoders::decode_texture(w, self.ltd_layers(), &f_tl)?
            }),
            _ => None,
        };
        let rgb = match &texture {
            Some(t) => decoders::predict(&pixel, t)?,
            None => pixel.clone(),
        };
        Ok(Prediction {
            pixel,
            texture,
            rgb,
        })
    }

    /// Batched forward for training: `lr (B, 3, h, w)`.
    pub fn forward_batch(&self, lr: &Tensor, q: &QueryBatch, tracked: bool) -> Result<Prediction> {
        let (_, _, h, wd) = lr.dims4()?;
        if (h, wd) != (q.lr_h, q.lr_w) {
            return Err(shape(format!(
                "queries built for {}x{}, image is {h}x{wd}",
                q.lr_h, q.lr_w
            )));
        }
        let w = self.weights(tracked);
        let feats = self.lr_stage(&w, lr, &q.cell)?;
        self.query_stage(&w, &feats, q)
    }

    /// Unclamped RGB at arbitrary queries of one image.
    pub fn query(&self, img: &ImageTensor, queries: &QuerySet) -> Result<Vec<[f32; 3]>> {
        if (queries.lr_h, queries.lr_w) != img.dims() {
            return Err(shape("query set does not match image dims"));
        }
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let w = self.weights(false);
        let lr = img.to_tensor(self.device(), self.dtype())?;
        let (sy, sx) = (img.height() as f64 / 2.0, img.width() as f64 / 2.0);
        let cell = Tensor::from_vec(
            vec![queries.cell[0] * sy, queries.cell[1] * sx],
            (1, 2),
            self.device(),
        )?
        .to_dtype(self.dtype())?;
        let feats = self.lr_stage(&w, &lr, &cell)?;
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(INFER_CHUNK) {
            let batch = QueryBatch::new(&[&chunk], self.device(), self.dtype())?;
            let rgb = self.query_stage(&w, &feats, &batch)?.rgb;
            let v: Vec<f32> = rgb.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            out.extend(v.chunks(3).map(|c| [c[0], c[1], c[2]]));
        }
        Ok(out)
    }

    /// Super-resolves `img` to `floor(scale*H) x floor(scale*W)` without clamping.
    pub fn forward_raw(&self, img: &ImageTensor, scale: f64) -> Result<ImageTensor> {
        let q = build_query_set(img.height(), img.width(), scale)?;
        let (oh, ow) = q.out_dims.expect("full grid");
        let rgb = self.query(img, &q)?;
        ImageTensor::new(oh, ow, rgb.into_iter().flatten().collect())
    }

    /// Super-resolved image clamped to `[0, 1]`.
    pub fn forward(&self, img: &ImageTensor, scale: f64) -> Result<ImageTensor> {
        Ok(self.forward_raw(img, scale)?.clamped())
    }

    // Stage-level entry points over host types.

    pub fn feature_map_tensor(&self, f: &FeatureMap) -> Result<Tensor> {
        Ok(
            Tensor::from_slice(&f.data, (1, f.channels, f.height, f.width), self.device())?
                .to_dtype(self.dtype())?,
        )
    }

    pub fn tensor_feature_map(t: &Tensor) -> Result<FeatureMap> {
        let (_, c, h, w) = t.dims4()?;
        FeatureMap::new(c, h, w, t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
    }

    /// `F_LR` for one image.
    pub fn encode(&self, img: &ImageTensor) -> Result<FeatureMap> {
        let w = self.weights(false);
        let t = encoder::forward(
            &w,
            &self.cfg.encoder,
            &img.to_tensor(self.device(), self.dtype())?,
        )?;
        Self::tensor_feature_map(&t)
    }

    /// `F_LFI` for one feature map.
    pub fn interact(&self, f_lr: &FeatureMap) -> Result<FeatureMap> {
        if !self.cfg.use_lfi {
            return Err(invalid("model was built without the LFI module"));
        }
        let w = self.weights(false);
        Self::tensor_feature_map(&lfi::forward(&w, &self.feature_map_tensor(f_lr)?)?)
    }

    fn require_tl(&self) -> Result<()> {
        if !self.cfg.use_tl {
            return Err(invalid("model was built without the texture learner"));
        }
        Ok(())
    }

    /// `(F_Amp, F_FreqX, F_FreqY)`.
    pub fn texture_maps(&self, f_lr: &FeatureMap) -> Result<(FeatureMap, FeatureMap, FeatureMap)> {
        self.require_tl()?;
        let w = self.weights(false);
        let (a, x, y) = texture::maps(&w, &self.feature_map_tensor(f_lr)?)?;
        Ok((
            Self::tensor_feature_map(&a)?,
            Self::tensor_feature_map(&x)?,
            Self::tensor_feature_map(&y)?,
        ))
    }

    /// Phase vector for a cell `(cy, cx)`, each in `(0, 2]`.
    pub fn phase(&self, cell: [f64; 2]) -> Result<Vec<f32>> {
        self.require_tl()?;
        if !(cell[0] > 0.0 && cell[1] > 0.0) {
            return Err(invalid(format!("cell must be positive, got {cell:?}")));
        }
        let w = self.weights(false);
        let c = Tensor::from_vec(cell.to_vec(), (1, 2), self.device())?.to_dtype(self.dtype())?;
        Ok(texture::phase(&w, &c)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1()?)
    }

    /// Texture features `F_TL` at each query of `q`, one `T`-vector per query.
    /// Offsets and cell are converted to LR pixels as in the full forward pass.
    pub fn synthesize(&self, f_lr: &FeatureMap, q: &QuerySet) -> Result<Vec<Vec<f32>>> {
        self.require_tl()?;
        if (q.lr_h, q.lr_w) != (f_lr.height, f_lr.width) {
            return Err(shape("query set built for a different feature grid"));
        }
        let w = self.weights(false);
        let batch = QueryBatch::new(&[q], self.device(), self.dtype())?;
        let (a, x, y) = texture::maps(&w, &self.feature_map_tensor(f_lr)?)?;
        let state = TextureState::Sinusoidal {
            amp: to_tokens(&a)?,
            freq_x: to_tokens(&x)?,
            freq_y: to_tokens(&y)?,
            phase: texture::phase(&w, &batch.cell)?,
        };
        let f = Self::texture_at(&state, &batch.nearest, &batch.local)?;
        Ok(f.squeeze(0)?.to_dtype(DType::F32)?.to_vec2()?)
    }
}
