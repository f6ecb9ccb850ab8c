//! `texsr` subcommands: train, eval, infer, ablate and serve.
//!
//! Every command resolves a [`RunConfig`] from built-in defaults, then the
//! optional `--config` file, then `--set key=value` overrides, then the
//! dedicated flags (`--seed`, `--scales`, ...), so later sources win.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use texsr_core::checkpoint;
use texsr_core::config::RunConfig;
use texsr_core::dataset::{DatasetSpec, LoadedImage, Split, DEFAULT_GLOB};
use texsr_core::evaluate::{ablate, evaluate_bicubic, evaluate_model, scale_table, AblationReport};
use texsr_core::metrics::MetricReport;
use texsr_core::pipeline::{train, TrainReport};
use texsr_core::tiling::infer_tiled;
use texsr_core::{DType, Device, Error, ImageTensor, IsteModel};
use texsr_service::{AppState, ModelSnapshot, ServiceConfig};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "texsr",
    version,
    about = "Arbitrary-scale super-resolution for pathology images"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on `<data>/train` (validating on `<data>/val` when present).
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root; overrides `data.root`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and the loss log; overrides `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint and the bicubic baseline on `<data>/test`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated scales; overrides `eval.scales`.
        #[arg(long)]
        scales: Option<String>,
        /// Directory for `report.md` and `records.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Super-resolve one image at an arbitrary scale with tiled inference.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        scale: f64,
        /// Tile side in LR pixels; overrides `infer.tile`.
        #[arg(long)]
        tile: Option<usize>,
        /// Blending overlap in LR pixels; overrides `infer.overlap`.
        #[arg(long)]
        overlap: Option<usize>,
        /// Output image path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the full model and its four ablations under one seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        scales: Option<String>,
        /// Directory for `ablation.md` and `ablation.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Launch the HTTP tile service.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of images to serve; overrides `serve.image_dir`.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Compute device; only `cpu` is available.
    #[arg(long, default_value = "cpu")]
    pub device: String,
}

impl Common {
    /// Resolves the run configuration with `extra` overrides applied last.
    pub fn resolve(&self, extra: &[(&str, Option<String>)]) -> anyhow::Result<RunConfig> {
        if self.device != "cpu" {
            return Err(Error::Config(format!(
                "unsupported device `{}`; only `cpu` is available",
                self.device
            ))
            .into());
        }
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        for (key, value) in extra {
            if let Some(v) = value {
                overrides.push(format!("{key}={v}"));
            }
        }
        Ok(RunConfig::resolve(self.config.as_deref(), &overrides)?)
    }
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

/// Maps an error chain onto the documented process exit codes.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
                Error::NonFinite { .. } => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    1
}

fn dataset(cfg: &RunConfig) -> anyhow::Result<DatasetSpec> {
    let root = cfg
        .data
        .root
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset root; pass --data or set data.root".into()))?;
    Ok(DatasetSpec::discover(root, cfg.data.glob.as_deref())?)
}

fn dataset_name(spec: &DatasetSpec) -> String {
    spec.root
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("dataset")
        .to_string()
}

fn load_checkpoint(path: &Path) -> anyhow::Result<IsteModel> {
    let (model, meta) = checkpoint::load(path, &Device::Cpu, DType::F32)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    log::info!("loaded {} (step {})", path.display(), meta.step);
    Ok(model)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common, data, out } => {
            let cfg =
                common.resolve(&[("data.root", path_str(&data)), ("out_dir", path_str(&out))])?;
            let report = cmd_train(&cfg)?;
            let last = report.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!("trained {} steps, final loss {last:.5}", report.log.len());
            if let Some(best) = report.best_val_psnr {
                println!("best validation PSNR {best:.2} dB");
            }
            println!("checkpoints in {}", cfg.out_dir.display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            scales,
            out,
        } => {
            let cfg = common.resolve(&[("data.root", path_str(&data)), ("eval.scales", scales)])?;
            let (model_report, bicubic) = cmd_eval(&checkpoint, &cfg)?;
            let table = scale_table(&[&model_report, &bicubic], &cfg.eval_scales);
            print!("{table}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("report.md"), &table)?;
                let lines: Vec<String> = [&model_report, &bicubic]
                    .iter()
                    .flat_map(|r| r.records())
                    .map(|v| v.to_string())
                    .collect();
                fs::write(dir.join("records.jsonl"), lines.join("\n") + "\n")?;
            }
        }
        Command::Infer {
            common,
            checkpoint,
            input,
            scale,
            tile,
            overlap,
            out,
        } => {
            let cfg = common.resolve(&[
                ("infer.tile", tile.map(|t| t.to_string())),
                ("infer.overlap", overlap.map(|o| o.to_string())),
            ])?;
            let img = cmd_infer(
                &checkpoint,
                &input,
                scale,
                cfg.infer_tile,
                cfg.infer_overlap,
            )?;
            img.save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            println!(
                "wrote {}x{} to {}",
                img.width(),
                img.height(),
                out.display()
            );
        }
        Command::Ablate {
            common,
            data,
            scales,
            out,
        } => {
            let cfg = common.resolve(&[("data.root", path_str(&data)), ("eval.scales", scales)])?;
            let report = cmd_ablate(&cfg)?;
            let table = report.table();
            print!("{table}");
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("ablation.md"), &table)?;
                fs::write(
                    dir.join("ablation.json"),
                    serde_json::to_string_pretty(&report)?,
                )?;
            }
        }
        Command::Serve {
            common,
            checkpoint,
            images,
            port,
        } => {
            let cfg = common.resolve(&[
                ("serve.image_dir", path_str(&images)),
                ("serve.port", port.map(|p| p.to_string())),
            ])?;
            let state = service_state(&checkpoint, &cfg)?;
            let addr = SocketAddr::from(([0, 0, 0, 0], cfg.serve.port));
            tokio::runtime::Runtime::new()?.block_on(texsr_service::serve(state, addr))?;
        }
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<TrainReport> {
    let spec = dataset(cfg)?;
    let train_images = spec.load(Split::Train)?;
    let val_images = spec.load(Split::Val)?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    log::info!(
        "training on {} images ({} validation), writing to {}",
        train_images.len(),
        val_images.len(),
        cfg.out_dir.display()
    );
    Ok(train(
        &cfg.model,
        &cfg.train,
        &train_images,
        &val_images,
        Some(&cfg.out_dir),
    )?)
}

/// Returns the model report and the bicubic baseline on the test split.
pub fn cmd_eval(
    checkpoint: &Path,
    cfg: &RunConfig,
) -> anyhow::Result<(MetricReport, MetricReport)> {
    let model = load_checkpoint(checkpoint)?;
    let spec = dataset(cfg)?;
    let name = dataset_name(&spec);
    let test = spec.load(Split::Test)?;
    let ours = evaluate_model(&model, "ISTE", &name, &test, &cfg.eval_scales)?;
    let bicubic = evaluate_bicubic(&name, &test, &cfg.eval_scales)?;
    Ok((ours, bicubic))
}

pub fn cmd_infer(
    checkpoint: &Path,
    input: &Path,
    scale: f64,
    tile: usize,
    overlap: usize,
) -> anyhow::Result<ImageTensor> {
    if !(scale >= 1.0) {
        return Err(Error::Config(format!("scale must be >= 1, got {scale}")).into());
    }
    let model = load_checkpoint(checkpoint)?;
    let img = ImageTensor::load(input).with_context(|| format!("reading {}", input.display()))?;
    Ok(infer_tiled(&model, &img, scale, tile, overlap)?)
}

pub fn cmd_ablate(cfg: &RunConfig) -> anyhow::Result<AblationReport> {
    let spec = dataset(cfg)?;
    let name = dataset_name(&spec);
    let train_images = spec.load(Split::Train)?;
    let test_images = spec.load(Split::Test)?;
    ablate_images(cfg, &name, &train_images, &test_images)
}

/// [`cmd_ablate`] on images already in memory.
pub fn ablate_images(
    cfg: &RunConfig,
    name: &str,
    train_images: &[LoadedImage],
    test_images: &[LoadedImage],
) -> anyhow::Result<AblationReport> {
    if test_images.is_empty() {
        bail!(Error::Data(format!("dataset `{name}` has no test images")));
    }
    Ok(ablate(
        &cfg.model,
        &cfg.train,
        name,
        train_images,
        test_images,
        &cfg.eval_scales,
    )?)
}

pub fn service_state(checkpoint: &Path, cfg: &RunConfig) -> anyhow::Result<Arc<AppState>> {
    let snapshot = ModelSnapshot::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let images = match &cfg.serve.image_dir {
        Some(dir) => AppState::load_images(dir, cfg.data.glob.as_deref().unwrap_or(DEFAULT_GLOB))?,
        None => Default::default(),
    };
    log::info!("serving {} images", images.len());
    let service = ServiceConfig {
        max_scale: cfg.serve.max_scale,
        max_region: cfg.serve.max_region,
        cache_size: cfg.serve.cache_size,
    };
    Ok(Arc::new(AppState::new(images, snapshot, service)))
}
