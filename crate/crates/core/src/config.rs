//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Keys are dotted
//! (`train.batch_size`, `model.use_lfi`, ...); lists are comma separated.
//! Command-line overrides are applied after the file, so they win.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::TrainConfig;
use crate::tiling::{DEFAULT_OVERLAP, DEFAULT_TILE};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub glob: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeConfig {
    pub port: u16,
    pub image_dir: Option<PathBuf>,
    pub max_scale: f64,
    pub max_region: usize,
    pub cache_size: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            image_dir: None,
            max_scale: 8.0,
            max_region: 256 * 256,
            cache_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval_scales: Vec<f64>,
    pub infer_tile: usize,
    pub infer_overlap: usize,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig {
                root: None,
                glob: None,
            },
            eval_scales: vec![2.0, 3.0, 4.0, 6.0, 8.0],
            infer_tile: DEFAULT_TILE,
            infer_overlap: DEFAULT_OVERLAP,
            serve: ServeConfig::default(),
        }
    }
}

/// Every key accepted by [`RunConfig::set`].
pub const KEYS: &[&str] = &[
    "seed",
    "out_dir",
    "model.n_blocks",
    "model.texture_dim",
    "model.attn_dim",
    "model.lpd_hidden",
    "model.ltd_hidden",
    "model.fusion_hidden",
    "model.use_lfi",
    "model.use_stf",
    "model.use_tl",
    "model.use_ltd",
    "model.per_neighbor_texture",
    "model.retrieval_chunk",
    "train.lr_patch",
    "train.scale_min",
    "train.scale_max",
    "train.n_query",
    "train.step_size",
    "train.epochs",
    "train.batch_size",
    "train.val_every",
    "train.val_scales",
    "data.root",
    "data.glob",
    "eval.scales",
    "infer.tile",
    "infer.overlap",
    "serve.port",
    "serve.image_dir",
    "serve.max_scale",
    "serve.max_region",
    "serve.cache_size",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                self.train.seed = self.seed;
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "model.n_blocks" => self.model.encoder.n_blocks = parse(key, v)?,
            "model.texture_dim" => self.model.texture_dim = parse(key, v)?,
            "model.attn_dim" => self.model.attn_dim = parse(key, v)?,
            "model.lpd_hidden" => self.model.lpd_hidden = parse_list(key, v)?,
            "model.ltd_hidden" => self.model.ltd_hidden = parse_list(key, v)?,
            "model.fusion_hidden" => self.model.fusion_hidden = parse(key, v)?,
            "model.use_lfi" => self.model.use_lfi = parse(key, v)?,
            "model.use_stf" => self.model.use_stf = parse(key, v)?,
            "model.use_tl" => self.model.use_tl = parse(key, v)?,
            "model.use_ltd" => self.model.use_ltd = parse(key, v)?,
            "model.per_neighbor_texture" => self.model.per_neighbor_texture = parse(key, v)?,
            "model.retrieval_chunk" => self.model.retrieval_chunk = parse(key, v)?,
            "train.lr_patch" => self.train.lr_patch = parse(key, v)?,
            "train.scale_min" => self.train.scale_min = parse(key, v)?,
            "train.scale_max" => self.train.scale_max = parse(key, v)?,
            "train.n_query" => self.train.n_query = parse(key, v)?,
            "train.step_size" => self.train.step_size = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.val_every" => self.train.val_every = parse(key, v)?,
            "train.val_scales" => self.train.val_scales = parse_list(key, v)?,
            "data.root" => self.data.root = Some(PathBuf::from(v)),
            "data.glob" => self.data.glob = Some(v.to_string()),
            "eval.scales" => self.eval_scales = parse_list(key, v)?,
            "infer.tile" => self.infer_tile = parse(key, v)?,
            "infer.overlap" => self.infer_overlap = parse(key, v)?,
            "serve.port" => self.serve.port = parse(key, v)?,
            "serve.image_dir" => self.serve.image_dir = Some(PathBuf::from(v)),
            "serve.max_scale" => self.serve.max_scale = parse(key, v)?,
            "serve.max_region" => self.serve.max_region = parse(key, v)?,
            "serve.cache_size" => self.serve.cache_size = parse(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}`; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines from `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected `key = value`, got `{raw}`",
                    n + 1
                ))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` must be key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then the overrides; validated.
    pub fn resolve<S: AsRef<str>>(file: Option<&Path>, overrides: &[S]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            cfg.apply_text(&text)?;
        }
        cfg.apply_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        if self.eval_scales.iter().any(|s| !(*s >= 1.0)) || self.eval_scales.is_empty() {
            return Err(Error::Config(
                "eval.scales must be a non-empty list of values >= 1".into(),
            ));
        }
        if !(self.serve.max_scale >= 1.0) || self.serve.max_region == 0 {
            return Err(Error::Config(
                "serve.max_scale must be >= 1 and serve.max_region positive".into(),
            ));
        }
        Ok(())
    }

    /// The configuration as `key = value` text that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let flist = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("out_dir = {}", self.out_dir.display()),
            format!("model.n_blocks = {}", self.model.encoder.n_blocks),
            format!("model.texture_dim = {}", self.model.texture_dim),
            format!("model.attn_dim = {}", self.model.attn_dim),
            format!("model.lpd_hidden = {}", list(&self.model.lpd_hidden)),
            format!("model.ltd_hidden = {}", list(&self.model.ltd_hidden)),
            format!("model.fusion_hidden = {}", self.model.fusion_hidden),
            format!("model.use_lfi = {}", self.model.use_lfi),
            format!("model.use_stf = {}", self.model.use_stf),
            format!("model.use_tl = {}", self.model.use_tl),
            format!("model.use_ltd = {}", self.model.use_ltd),
            format!(
                "model.per_neighbor_texture = {}",
                self.model.per_neighbor_texture
            ),
            format!("model.retrieval_chunk = {}", self.model.retrieval_chunk),
            format!("train.lr_patch = {}", self.train.lr_patch),
            format!("train.scale_min = {}", self.train.scale_min),
            format!("train.scale_max = {}", self.train.scale_max),
            format!("train.n_query = {}", self.train.n_query),
            format!("train.step_size = {}", self.train.step_size),
            format!("train.epochs = {}", self.train.epochs),
            format!("train.batch_size = {}", self.train.batch_size),
            format!("train.val_every = {}", self.train.val_every),
            format!("train.val_scales = {}", flist(&self.train.val_scales)),
        ];
        if let Some(r) = &self.data.root {
            lines.push(format!("data.root = {}", r.display()));
        }
        if let Some(g) = &self.data.glob {
            lines.push(format!("data.glob = {g}"));
        }
        lines.extend([
            format!("eval.scales = {}", flist(&self.eval_scales)),
            format!("infer.tile = {}", self.infer_tile),
            format!("infer.overlap = {}", self.infer_overlap),
            format!("serve.port = {}", self.serve.port),
        ]);
        if let Some(d) = &self.serve.image_dir {
            lines.push(format!("serve.image_dir = {}", d.display()));
        }
        lines.extend([
            format!("serve.max_scale = {}", self.serve.max_scale),
            format!("serve.max_region = {}", self.serve.max_region),
            format!("serve.cache_size = {}", self.serve.cache_size),
        ]);
        lines.join("\n") + "\n"
    }
}
