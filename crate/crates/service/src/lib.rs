//! HTTP tile service.
//!
//! `GET /meta` lists the loaded images and identifies the model;
//! `GET /tile?image_id&x&y&w&h&scale&renderer` renders the LR region
//! `[x, x + w) x [y, y + h)` at `scale` and answers with a PNG of
//! `floor(scale * w) x floor(scale * h)` pixels.
//!
//! A tile holds the pixels `[floor(scale * x), floor(scale * x) + floor(scale * w))`
//! (and likewise for rows) of the image's global output grid; the origin is
//! reported in `X-Output-X` / `X-Output-Y`. Adjacent regions therefore never
//! overlap, and they abut exactly whenever `scale * w` is an integer.

use std::collections::BTreeMap;
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use lru::LruCache;
use serde::Serialize;
use sha2::{Digest, Sha256};

use texsr_core::checkpoint;
use texsr_core::dataset::glob_match;
use texsr_core::geometry::output_size;
use texsr_core::resample::resize_bicubic;
use texsr_core::tiling::{render_window, Span};
use texsr_core::{DType, Device, ImageTensor, IsteModel};

/// LR pixels of context fed to the network around a requested region.
pub const CONTEXT: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub max_scale: f64,
    /// Largest accepted `w * h`.
    pub max_region: usize,
    pub cache_size: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_scale: 8.0,
            max_region: 256 * 256,
            cache_size: 256,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("render failed: {0}")]
    Render(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Render(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        (self.status(), self.to_string()).into_response()
    }
}

impl From<texsr_core::Error> for ServiceError {
    fn from(e: texsr_core::Error) -> Self {
        ServiceError::Render(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Renderer {
    Iste,
    Bicubic,
}

impl Renderer {
    pub fn parse(s: &str) -> Result<Self, ServiceError> {
        match s {
            "iste" => Ok(Renderer::Iste),
            "bicubic" => Ok(Renderer::Bicubic),
            other => Err(ServiceError::BadRequest(format!(
                "unknown renderer `{other}` (expected iste or bicubic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileRequest {
    pub image_id: String,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub scale: f64,
    pub renderer: Renderer,
}

fn field<'a>(params: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str, ServiceError> {
    params
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| ServiceError::BadRequest(format!("missing query parameter `{key}`")))
}

fn count(params: &BTreeMap<String, String>, key: &str) -> Result<usize, ServiceError> {
    let v = field(params, key)?;
    v.parse().map_err(|_| {
        ServiceError::BadRequest(format!("`{key}` must be a non-negative integer, got `{v}`"))
    })
}

impl TileRequest {
    pub fn from_query(params: &BTreeMap<String, String>) -> Result<Self, ServiceError> {
        let raw_scale = field(params, "scale")?;
        let scale: f64 = raw_scale.parse().map_err(|_| {
            ServiceError::BadRequest(format!("`scale` must be a number, got `{raw_scale}`"))
        })?;
        Ok(Self {
            image_id: field(params, "image_id")?.to_string(),
            x: count(params, "x")?,
            y: count(params, "y")?,
            w: count(params, "w")?,
            h: count(params, "h")?,
            scale,
            renderer: Renderer::parse(params.get("renderer").map_or("iste", String::as_str))?,
        })
    }

    fn cache_key(&self, model_hash: &str) -> TileKey {
        TileKey {
            image_id: self.image_id.clone(),
            region: [self.x, self.y, self.w, self.h],
            scale_bits: self.scale.to_bits(),
            renderer: self.renderer,
            model_hash: model_hash.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct TileKey {
    image_id: String,
    region: [usize; 4],
    scale_bits: u64,
    renderer: Renderer,
    model_hash: String,
}

/// Rendered tile with its placement on the output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub png: Vec<u8>,
    pub width: usize,
    pub height: usize,
    pub output_x: usize,
    pub output_y: usize,
    pub scale: f64,
}

/// Immutable model plus the hash that identifies it.
pub struct ModelSnapshot {
    pub model: IsteModel,
    pub hash: String,
}

impl ModelSnapshot {
    /// Identifies an in-memory model by the hash of its serialized checkpoint.
    pub fn from_model(model: IsteModel) -> texsr_core::Result<Self> {
        let hash = hex::encode(Sha256::digest(checkpoint::to_bytes(&model, 0)?));
        Ok(Self { model, hash })
    }

    /// Loads a checkpoint; the hash is that of the file bytes.
    pub fn load(path: &Path) -> texsr_core::Result<Self> {
        let bytes = std::fs::read(path)?;
        let (model, _) = checkpoint::from_bytes(&bytes, &Device::Cpu, DType::F32)?;
        Ok(Self {
            model,
            hash: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ImageEntry {
    pub id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ModelInfo {
    pub checkpoint_hash: String,
    pub max_scale: f64,
    pub max_region: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Meta {
    pub images: Vec<ImageEntry>,
    pub model: ModelInfo,
}

pub struct AppState {
    images: BTreeMap<String, ImageTensor>,
    snapshot: RwLock<Arc<ModelSnapshot>>,
    cache: Mutex<LruCache<TileKey, Arc<Tile>>>,
    cfg: ServiceConfig,
}

impl AppState {
    pub fn new(
        images: BTreeMap<String, ImageTensor>,
        snapshot: ModelSnapshot,
        cfg: ServiceConfig,
    ) -> Self {
        let cap = NonZeroUsize::new(cfg.cache_size.max(1)).expect("non-zero");
        Self {
            images,
            snapshot: RwLock::new(Arc::new(snapshot)),
            cache: Mutex::new(LruCache::new(cap)),
            cfg,
        }
    }

    /// Loads every image in `dir` whose name matches `glob`; the id is the file stem.
    pub fn load_images(
        dir: &Path,
        glob: &str,
    ) -> texsr_core::Result<BTreeMap<String, ImageTensor>> {
        let mut out = BTreeMap::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let name = entry.file_name().to_string_lossy().to_string();
            if !entry.file_type()?.is_file() || !glob_match(glob, &name) {
                continue;
            }
            let id = Path::new(&name)
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or(name.clone());
            out.insert(id, ImageTensor::load(entry.path())?);
        }
        Ok(out)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn snapshot(&self) -> Arc<ModelSnapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Swaps in a new model; in-flight requests finish on the snapshot they started with.
    pub fn replace_model(&self, snapshot: ModelSnapshot) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(snapshot);
    }

    pub fn reload(&self, checkpoint_path: &Path) -> texsr_core::Result<()> {
        self.replace_model(ModelSnapshot::load(checkpoint_path)?);
        Ok(())
    }

    pub fn meta(&self) -> Meta {
        Meta {
            images: self
                .images
                .iter()
                .map(|(id, img)| ImageEntry {
                    id: id.clone(),
                    width: img.width(),
                    height: img.height(),
                })
                .collect(),
            model: ModelInfo {
                checkpoint_hash: self.snapshot().hash.clone(),
                max_scale: self.cfg.max_scale,
                max_region: self.cfg.max_region,
            },
        }
    }

    /// Checks a request against the image bounds and service limits.
    pub fn validate(&self, req: &TileRequest) -> Result<&ImageTensor, ServiceError> {
        let img = self
            .images
            .get(&req.image_id)
            .ok_or_else(|| ServiceError::NotFound(format!("unknown image `{}`", req.image_id)))?;
        if !req.scale.is_finite() || req.scale < 1.0 || req.scale > self.cfg.max_scale {
            return Err(ServiceError::BadRequest(format!(
                "scale {} outside [1, {}]",
                req.scale, self.cfg.max_scale
            )));
        }
        if req.w == 0 || req.h == 0 {
            return Err(ServiceError::BadRequest("region must be non-empty".into()));
        }
        let (ih, iw) = img.dims();
        if req.x.checked_add(req.w).is_none_or(|e| e > iw)
            || req.y.checked_add(req.h).is_none_or(|e| e > ih)
        {
            return Err(ServiceError::BadRequest(format!(
                "region x=[{}, {}) y=[{}, {}) outside image bounds {iw}x{ih}",
                req.x,
                req.x.saturating_add(req.w),
                req.y,
                req.y.saturating_add(req.h)
            )));
        }
        if req.w.saturating_mul(req.h) > self.cfg.max_region {
            return Err(ServiceError::BadRequest(format!(
                "region of {} pixels exceeds the maximum of {}",
                req.w * req.h,
                self.cfg.max_region
            )));
        }
        Ok(img)
    }

    /// Renders (or fetches from the cache) one tile. Returns the tile and whether it was cached.
    pub fn render(&self, req: &TileRequest) -> Result<(Arc<Tile>, bool), ServiceError> {
        let img = self.validate(req)?;
        let snap = self.snapshot();
        let key = req.cache_key(&snap.hash);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok((hit.clone(), true));
        }
        let tile = Arc::new(render_tile(&snap.model, img, req)?);
        self.cache
            .lock()
            .expect("cache lock")
            .put(key, tile.clone());
        Ok((tile, false))
    }
}

/// Renders a tile without touching any cache.
pub fn render_tile(
    model: &IsteModel,
    img: &ImageTensor,
    req: &TileRequest,
) -> Result<Tile, ServiceError> {
    let (ih, iw) = img.dims();
    let (tw, th) = (output_size(req.w, req.scale), output_size(req.h, req.scale));
    let (ox, oy) = (output_size(req.x, req.scale), output_size(req.y, req.scale));
    let pixels = match req.renderer {
        Renderer::Bicubic => {
            resize_bicubic(&img.crop(req.y, req.x, req.h, req.w)?, th, tw)?.clamped()
        }
        Renderer::Iste => {
            let (out_h, out_w) = (output_size(ih, req.scale), output_size(iw, req.scale));
            if oy + th > out_h || ox + tw > out_w {
                return Err(ServiceError::Render("tile exceeds the output grid".into()));
            }
            let window = (
                Span {
                    start: req.y.saturating_sub(CONTEXT),
                    end: (req.y + req.h + CONTEXT).min(ih),
                },
                Span {
                    start: req.x.saturating_sub(CONTEXT),
                    end: (req.x + req.w + CONTEXT).min(iw),
                },
            );
            let coords: Vec<(usize, usize)> = (oy..oy + th)
                .flat_map(|r| (ox..ox + tw).map(move |c| (r, c)))
                .collect();
            let rgb = render_window(model, img, window, (out_h, out_w), &coords)?;
            ImageTensor::new(th, tw, rgb.into_iter().flatten().collect())?.clamped()
        }
    };
    Ok(Tile {
        png: pixels.encode_png()?,
        width: tw,
        height: th,
        output_x: ox,
        output_y: oy,
        scale: req.scale,
    })
}

fn header_value(v: impl ToString) -> HeaderValue {
    HeaderValue::from_str(&v.to_string()).expect("ascii header")
}

async fn get_meta(State(state): State<Arc<AppState>>) -> Json<Meta> {
    Json(state.meta())
}

async fn get_tile(
    State(state): State<Arc<AppState>>,
    Query(params): Query<BTreeMap<String, String>>,
) -> Result<Response, ServiceError> {
    let start = Instant::now();
    let req = TileRequest::from_query(&params)?;
    state.validate(&req)?;
    let worker = state.clone();
    let (tile, cached) = tokio::task::spawn_blocking(move || worker.render(&req))
        .await
        .map_err(|e| ServiceError::Render(format!("render task failed: {e}")))??;
    let elapsed_ms = (start.elapsed().as_secs_f64() * 1e3).max(1e-3);
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert("x-rendered-width", header_value(tile.width));
    headers.insert("x-rendered-height", header_value(tile.height));
    headers.insert("x-scale", header_value(tile.scale));
    headers.insert("x-output-x", header_value(tile.output_x));
    headers.insert("x-output-y", header_value(tile.output_y));
    headers.insert("x-render-time-ms", header_value(format!("{elapsed_ms:.3}")));
    headers.insert(
        "x-cache",
        HeaderValue::from_static(if cached { "hit" } else { "miss" }),
    );
    Ok((StatusCode::OK, headers, tile.png.clone()).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/meta", get(get_meta))
        .route("/tile", get(get_tile))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
