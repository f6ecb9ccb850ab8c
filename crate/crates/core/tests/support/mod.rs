//! Scalar reference implementations and the measurement routines shared by
//! the integration tests and the acceptance suite.
//!
//! Every reference works on plain `f64` slices with explicit loops so it
//! shares no code path with the tensor implementation it is checked against.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use texsr_core::checkpoint;
use texsr_core::decoders;
use texsr_core::encoder::{EncoderConfig, FEATURE_DIM};
use texsr_core::geometry::{
    build_query_set, cell_center, ensemble_neighbors_dims, make_coord_grid, nearest_index,
    nn_upsample, output_size, FeatureMap,
};
use texsr_core::lfi;
use texsr_core::model::{IsteModel, ModelConfig, QueryBatch};
use texsr_core::nn::{gather_rows, ParamStore, Weights};
use texsr_core::stf;
use texsr_core::texture;

pub mod fixtures;

// ---------------------------------------------------------------- references

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Values of a named parameter as `f64`.
pub fn param(store: &ParamStore, name: &str) -> Vec<f64> {
    store
        .get(name)
        .unwrap_or_else(|| panic!("missing {name}"))
        .as_tensor()
        .to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

/// `y = W x + b` with `W` stored `(out, in)` row-major.
pub fn affine(w: &[f64], b: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    let n_out = w.len() / n_in;
    (0..n_out)
        .map(|o| {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..n_in {
                acc += w[o * n_in + i] * x[i];
            }
            acc
        })
        .collect()
}

/// MLP registered as `prefix.{i}.w/b`; SiLU between layers.
pub fn mlp_ref(store: &ParamStore, prefix: &str, layers: usize, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for i in 0..layers {
        h = affine(
            &param(store, &format!("{prefix}.{i}.w")),
            Some(&param(store, &format!("{prefix}.{i}.b"))),
            &h,
        );
        if i + 1 < layers {
            h = h.into_iter().map(silu).collect();
        }
    }
    h
}

/// Channel-major `(C, H, W)` feature grid in `f64`.
#[derive(Clone)]
pub struct Grid {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    /// Feature vector at `(y, x)` with out-of-range indices clamped to the border.
    pub fn clamped(&self, y: i64, x: i64) -> Vec<f64> {
        let yy = y.clamp(0, self.h as i64 - 1) as usize;
        let xx = x.clamp(0, self.w as i64 - 1) as usize;
        (0..self.c).map(|c| self.at(c, yy, xx)).collect()
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let (_, c, h, w) = t.dims4().unwrap();
        let data = t
            .to_dtype(DType::F64)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        Self { c, h, w, data }
    }
}

/// Zero-padded 3x3 convolution at one position; weight `(C_out, 3, 3, C_in)`.
pub fn conv_at(g: &Grid, weight: &[f64], bias: &[f64], y: usize, x: usize) -> Vec<f64> {
    let c_out = bias.len();
    (0..c_out)
        .map(|o| {
            let mut acc = bias[o];
            for ky in 0..3 {
                for kx in 0..3 {
                    let (yy, xx) = (y as i64 + ky as i64 - 1, x as i64 + kx as i64 - 1);
                    if yy < 0 || xx < 0 || yy >= g.h as i64 || xx >= g.w as i64 {
                        continue;
                    }
                    for i in 0..g.c {
                        acc += weight[((o * 3 + ky) * 3 + kx) * g.c + i]
                            * g.at(i, yy as usize, xx as usize);
                    }
                }
            }
            acc
        })
        .collect()
}

/// Local feature interaction at one position.
pub fn lfi_ref(store: &ParamStore, f: &Grid, y: usize, x: usize) -> Vec<f64> {
    let (wq, wk, wv) = (
        param(store, "lfi.wq"),
        param(store, "lfi.wk"),
        param(store, "lfi.wv"),
    );
    let d = wq.len() / f.c;
    let centre = f.clamped(y as i64, x as i64);
    let mut sources = vec![centre.clone()];
    let mut mean = vec![0.0; f.c];
    for dy in -1..=1i64 {
        for dx in -1..=1i64 {
            let v = f.clamped(y as i64 + dy, x as i64 + dx);
            for (m, vi) in mean.iter_mut().zip(&v) {
                *m += vi / 9.0;
            }
            if dy != 0 || dx != 0 {
                sources.push(v);
            }
        }
    }
    sources.push(mean);
    let q = affine(&wq, None, &centre);
    let logits: Vec<f64> = sources
        .iter()
        .map(|s| {
            let k = affine(&wk, None, s);
            q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut out = vec![0.0; f.c];
    for (s, ej) in sources.iter().zip(&e) {
        for (o, v) in out.iter_mut().zip(affine(&wv, None, s)) {
            *o += ej / z * v;
        }
    }
    out
}

/// Texture feature for a query anchored at `(y, x)` with local offset `(dy, dx)`.
pub fn tl_ref(
    store: &ParamStore,
    f: &Grid,
    y: usize,
    x: usize,
    local: [f64; 2],
    cell: [f64; 2],
) -> Vec<f64> {
    let amp = conv_at(
        f,
        &param(store, "tl.amp.w"),
        &param(store, "tl.amp.b"),
        y,
        x,
    );
    let fx = conv_at(
        f,
        &param(store, "tl.freq_x.w"),
        &param(store, "tl.freq_x.b"),
        y,
        x,
    );
    let fy = conv_at(
        f,
        &param(store, "tl.freq_y.w"),
        &param(store, "tl.freq_y.b"),
        y,
        x,
    );
    let pw = param(store, "tl.phase.w");
    let pb = param(store, "tl.phase.b");
    (0..amp.len())
        .map(|t| {
            let phase = sigmoid(pw[t * 2] * cell[0] + pw[t * 2 + 1] * cell[1] + pb[t]);
            amp[t] * (fx[t] * local[1] + fy[t] * local[0] + phase).sin()
        })
        .collect()
}

/// Self-texture fusion of every row of `f` (`N x 64`) against keys `v` (`M x T`).
pub fn stf_ref(store: &ParamStore, f: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let proj = param(store, "stf.query_proj.w");
    let norm = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-12;
    f.iter()
        .map(|fi| {
            let q = affine(&proj, None, fi);
            let (mut best, mut best_r) = (0usize, f64::NEG_INFINITY);
            for (j, vj) in v.iter().enumerate() {
                let r = q.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>() / (norm(&q) * norm(vj));
                if r > best_r {
                    best = j;
                    best_r = r;
                }
            }
            let mut input = fi.clone();
            input.extend_from_slice(&v[best]);
            let z = mlp_ref(store, "stf.fusion", 2, &input);
            fi.iter().zip(&z).map(|(a, b)| a + b * best_r).collect()
        })
        .collect()
}

// ------------------------------------------------------------------ helpers

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn tensor(v: &[f64], shape: &[usize], dtype: DType) -> Tensor {
    Tensor::from_slice(v, shape, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap()
}

/// Replaces every parameter (including biases) with `U(-a, a) / sqrt(fan_in)`-ish values.
pub fn randomize(store: &ParamStore, rng: &mut ChaCha8Rng, a: f64) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let var = store.get(&name).unwrap();
        let dims = var.dims().to_vec();
        let n: usize = dims.iter().product();
        let fan_in = if dims.len() > 1 {
            dims[1..].iter().product::<usize>()
        } else {
            1
        };
        let bound = a / (fan_in as f64).sqrt().max(1.0);
        let v = uniform(rng, n, -bound, bound);
        store.set(&name, &tensor(&v, &dims, DType::F64)).unwrap();
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn random_dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=4))
}

fn random_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Grid {
    Grid {
        c,
        h,
        w,
        data: uniform(rng, c * h * w, -1.0, 1.0),
    }
}

// ------------------------------------------------------- equation oracles

/// Max abs error of the LFI module against [`lfi_ref`] over `cases` random instances (f32).
pub fn lfi_oracle(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mut store = ParamStore::new(Device::Cpu, DType::F32);
        lfi::init(&mut store, &mut r, 16).unwrap();
        randomize(&store, &mut r, 1.0);
        let (h, w) = random_dims(&mut r);
        let g = random_grid(&mut r, FEATURE_DIM, h, w);
        let out = lfi::forward(
            &Weights::new(&store, false),
            &tensor(&g.data, &[1, FEATURE_DIM, h, w], DType::F32),
        )
        .unwrap();
        let got = Grid::from_tensor(&out);
        for y in 0..h {
            for x in 0..w {
                let want = lfi_ref(&store, &g, y, x);
                let have: Vec<f64> = (0..FEATURE_DIM).map(|c| got.at(c, y, x)).collect();
                worst = worst.max(max_abs_diff(&want, &have));
            }
        }
    }
    worst
}

/// Max abs error of the texture learner (maps, phase and synthesis) against [`tl_ref`] (f32).
pub fn tl_oracle(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let t_dim = 12;
    for _ in 0..cases {
        let mut store = ParamStore::new(Device::Cpu, DType::F32);
        texture::init(&mut store, &mut r, t_dim).unwrap();
        randomize(&store, &mut r, 1.0);
        let (h, w) = random_dims(&mut r);
        let g = random_grid(&mut r, FEATURE_DIM, h, w);
        let n = 10;
        let idx: Vec<(usize, usize)> = (0..n)
            .map(|_| (r.gen_range(0..h), r.gen_range(0..w)))
            .collect();
        let local = uniform(&mut r, n * 2, -1.0, 1.0);
        let cell = [r.gen_range(0.01..2.0), r.gen_range(0.01..2.0)];

        let wts = Weights::new(&store, false);
        let (amp, fx, fy) =
            texture::maps(&wts, &tensor(&g.data, &[1, FEATURE_DIM, h, w], DType::F32)).unwrap();
        let tok = |m: &Tensor| texsr_core::nn::to_tokens(m).unwrap();
        let flat: Vec<u32> = idx.iter().map(|&(y, x)| (y * w + x) as u32).collect();
        let index = Tensor::from_vec(flat, (1, n), &Device::Cpu).unwrap();
        let phase = texture::phase(&wts, &tensor(&cell, &[1, 2], DType::F32)).unwrap();
        let out = texture::synthesize(
            &gather_rows(&tok(&amp), &index).unwrap(),
            &gather_rows(&tok(&fx), &index).unwrap(),
            &gather_rows(&tok(&fy), &index).unwrap(),
            &tensor(&local, &[1, n, 2], DType::F32),
            &phase,
        )
        .unwrap();
        let have = to_f64(&out);
        for (k, &(y, x)) in idx.iter().enumerate() {
            let want = tl_ref(&store, &g, y, x, [local[2 * k], local[2 * k + 1]], cell);
            worst = worst.max(max_abs_diff(&want, &have[k * t_dim..(k + 1) * t_dim]));
        }
    }
    worst
}

/// Max abs error of retrieval + fusion against [`stf_ref`] (f32).
pub fn stf_oracle(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let t_dim = 8;
    for _ in 0..cases {
        let mut store = ParamStore::new(Device::Cpu, DType::F32);
        stf::init(&mut store, &mut r, t_dim, 16).unwrap();
        randomize(&store, &mut r, 1.0);
        let (h, w) = random_dims(&mut r);
        let n = h * w;
        let f = uniform(&mut r, n * FEATURE_DIM, -1.0, 1.0);
        let v = uniform(&mut r, n * t_dim, -1.0, 1.0);
        // Round inputs to f32 so both sides see identical values.
        let f: Vec<f64> = f.iter().map(|x| *x as f32 as f64).collect();
        let v: Vec<f64> = v.iter().map(|x| *x as f32 as f64).collect();
        let out = stf::forward(
            &Weights::new(&store, false),
            &tensor(&f, &[1, n, FEATURE_DIM], DType::F32),
            &tensor(&v, &[1, n, t_dim], DType::F32),
            3,
        )
        .unwrap();
        let fr: Vec<Vec<f64>> = f.chunks(FEATURE_DIM).map(<[f64]>::to_vec).collect();
        let vr: Vec<Vec<f64>> = v.chunks(t_dim).map(<[f64]>::to_vec).collect();
        let want: Vec<f64> = stf_ref(&store, &fr, &vr).into_iter().flatten().collect();
        worst = worst.max(max_abs_diff(&want, &to_f64(&out)));
    }
    worst
}

/// Max abs error of the pixel decoder ensemble, the texture decoder and their
/// sum against scalar MLP evaluation (f32).
pub fn decoder_oracle(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let t_dim = 10;
    let (lpd_hidden, ltd_hidden) = ([16, 12], [14]);
    for _ in 0..cases {
        let mut store = ParamStore::new(Device::Cpu, DType::F32);
        decoders::init_pixel(&mut store, &mut r, &lpd_hidden).unwrap();
        decoders::init_texture(&mut store, &mut r, t_dim, &ltd_hidden).unwrap();
        randomize(&store, &mut r, 1.0);
        let (h, w) = random_dims(&mut r);
        let n = h * w;
        let feat = uniform(&mut r, n * FEATURE_DIM, -1.0, 1.0);
        let offsets = uniform(&mut r, 4 * n * 2, -2.0, 2.0);
        let cell = uniform(&mut r, 2, 0.05, 2.0);
        let mut weights = uniform(&mut r, 4 * n, 0.0, 1.0);
        for i in 0..n {
            let s: f64 = (0..4).map(|t| weights[t * n + i]).sum();
            for t in 0..4 {
                weights[t * n + i] /= s;
            }
        }
        let f_tl = uniform(&mut r, n * t_dim, -1.0, 1.0);
        let wts = Weights::new(&store, false);
        let pixel = decoders::decode_pixel(
            &wts,
            lpd_hidden.len() + 1,
            &tensor(&feat, &[1, n, FEATURE_DIM], DType::F32),
            &tensor(&offsets, &[1, 4, n, 2], DType::F32),
            &tensor(&cell, &[1, 2], DType::F32),
            &tensor(&weights, &[1, 4, n, 1], DType::F32),
        )
        .unwrap();
        let tex = decoders::decode_texture(
            &wts,
            ltd_hidden.len() + 1,
            &tensor(&f_tl, &[1, n, t_dim], DType::F32),
        )
        .unwrap();
        let sum = decoders::predict(&pixel, &tex).unwrap();
        let (pixel, tex, sum) = (to_f64(&pixel), to_f64(&tex), to_f64(&sum));
        for i in 0..n {
            let mut want_pixel = [0.0f64; 3];
            for t in 0..4 {
                let mut input = feat[i * FEATURE_DIM..(i + 1) * FEATURE_DIM].to_vec();
                input.extend_from_slice(&offsets[(t * n + i) * 2..(t * n + i) * 2 + 2]);
                input.extend_from_slice(&cell);
                let rgb = mlp_ref(&store, "lpd", lpd_hidden.len() + 1, &input);
                for k in 0..3 {
                    want_pixel[k] += weights[t * n + i] * rgb[k];
                }
            }
            let want_tex = mlp_ref(
                &store,
                "ltd",
                ltd_hidden.len() + 1,
                &f_tl[i * t_dim..(i + 1) * t_dim],
            );
            for k in 0..3 {
                worst = worst
                    .max((want_pixel[k] - pixel[i * 3 + k]).abs())
                    .max((want_tex[k] - tex[i * 3 + k]).abs())
                    .max((want_pixel[k] + want_tex[k] - sum[i * 3 + k]).abs());
            }
        }
    }
    worst
}

// ----------------------------------------------------------- gradient suite

/// Small model whose every module is live; `variant_cfg` can switch paths.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { n_blocks: 1 },
        texture_dim: 6,
        attn_dim: 5,
        lpd_hidden: vec![8],
        ltd_hidden: vec![7],
        fusion_hidden: 9,
        ..ModelConfig::default()
    }
}

pub struct GradReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_param: String,
    pub tensors: Vec<String>,
}

/// Compares analytic gradients with central differences for a sample of
/// entries from every parameter tensor, on a 2x2 input rendered at x2 (4x4).
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(cfg: ModelConfig, seed: u64, per_tensor: usize) -> GradReport {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let mut r = rng(seed);
    let model = IsteModel::new(cfg, seed, &Device::Cpu, DType::F64).unwrap();
    randomize(model.params(), &mut r, 1.0);
    let lr = tensor(&uniform(&mut r, 12, 0.0, 1.0), &[1, 3, 2, 2], DType::F64);
    let q = build_query_set(2, 2, 2.0).unwrap();
    let batch = QueryBatch::new(&[&q], &Device::Cpu, DType::F64).unwrap();
    let probe = tensor(&uniform(&mut r, 16 * 3, -1.0, 1.0), &[1, 16, 3], DType::F64);
    let loss = |tracked: bool| -> Tensor {
        let pred = model.forward_batch(&lr, &batch, tracked).unwrap();
        (pred.rgb * &probe).unwrap().sum_all().unwrap()
    };
    let grads = loss(true).backward().unwrap();
    let mut report = GradReport {
        checked: 0,
        worst_rel: 0.0,
        worst_param: String::new(),
        tensors: Vec::new(),
    };
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for name in names {
        let var = model.params().get(&name).unwrap().clone();
        let dims = var.dims().to_vec();
        let base = to_f64(var.as_tensor());
        let analytic = grads
            .get(var.as_tensor())
            .map(to_f64)
            .unwrap_or_else(|| vec![0.0; base.len()]);
        let picks: Vec<usize> = if base.len() <= per_tensor {
            (0..base.len()).collect()
        } else {
            (0..per_tensor)
                .map(|_| r.gen_range(0..base.len()))
                .collect()
        };
        for i in picks {
            let mut v = base.clone();
            v[i] = base[i] + H;
            model
                .params()
                .set(&name, &tensor(&v, &dims, DType::F64))
                .unwrap();
            let up = loss(false).to_scalar::<f64>().unwrap();
            v[i] = base[i] - H;
            model
                .params()
                .set(&name, &tensor(&v, &dims, DType::F64))
                .unwrap();
            let down = loss(false).to_scalar::<f64>().unwrap();
            model
                .params()
                .set(&name, &tensor(&base, &dims, DType::F64))
                .unwrap();
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            report.checked += 1;
            if rel > report.worst_rel {
                report.worst_rel = rel;
                report.worst_param = format!("{name}[{i}] analytic {a:e} numeric {numeric:e}");
            }
        }
        report.tensors.push(name);
    }
    report
}

// ----------------------------------------------------------- geometry suite

pub struct GeometryReport {
    pub cases: usize,
    pub worst_simplex: f64,
    pub coord_mismatches: usize,
    pub roundtrip_failures: usize,
}

/// Randomized geometry checks: ensemble weights lie on the simplex,
/// coordinates follow `-1 + (2i + 1) / n` exactly, and nearest upsampling by
/// an integer factor followed by nearest downsampling returns the input.
pub fn geometry_suite(cases: usize, seed: u64) -> GeometryReport {
    let mut r = rng(seed);
    let mut rep = GeometryReport {
        cases,
        worst_simplex: 0.0,
        coord_mismatches: 0,
        roundtrip_failures: 0,
    };
    for _ in 0..cases {
        let (h, w) = (r.gen_range(1..40usize), r.gen_range(1..40usize));
        // Ensemble weights at a random point, including outside the centre band.
        let coord = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
        let e = ensemble_neighbors_dims(coord, h, w);
        let sum: f64 = e.weights.iter().sum();
        let neg = e.weights.iter().cloned().fold(0.0f64, |m, x| m.max(-x));
        rep.worst_simplex = rep.worst_simplex.max((sum - 1.0).abs()).max(neg);

        // Coordinate formula on a random grid entry.
        let g = make_coord_grid(h, w).unwrap();
        let (i, j) = (r.gen_range(0..h), r.gen_range(0..w));
        let want = [
            -1.0 + (2 * i + 1) as f64 / h as f64,
            -1.0 + (2 * j + 1) as f64 / w as f64,
        ];
        if g.coord(i, j) != want || cell_center(i, h) != want[0] || nearest_index(want[0], h) != i {
            rep.coord_mismatches += 1;
        }

        // Output-size floor rule at a random real scale.
        let s: f64 = r.gen_range(1.0..8.0);
        let q = build_query_set(h.min(6), w.min(6), s).unwrap();
        let dims = (output_size(h.min(6), s), output_size(w.min(6), s));
        if q.out_dims != Some(dims) || dims.0 != (s * h.min(6) as f64 + 1e-9).floor() as usize {
            rep.coord_mismatches += 1;
        }

        // nn_upsample round trip.
        let (fh, fw, c) = (
            r.gen_range(1..6usize),
            r.gen_range(1..6usize),
            r.gen_range(1..4usize),
        );
        let k = r.gen_range(1..5usize);
        let data: Vec<f32> = (0..c * fh * fw).map(|_| r.gen_range(-1.0..1.0)).collect();
        let f = FeatureMap::new(c, fh, fw, data).unwrap();
        let up = nn_upsample(&f, fh * k, fw * k).unwrap();
        let mut ok = true;
        for ch in 0..c {
            for y in 0..fh * k {
                for x in 0..fw * k {
                    ok &= up.at(ch, y, x) == f.at(ch, y / k, x / k);
                }
            }
        }
        let back = FeatureMap::new(
            c,
            fh,
            fw,
            (0..c)
                .flat_map(|ch| {
                    let up = &up;
                    (0..fh).flat_map(move |y| {
                        (0..fw).map(move |x| {
                            up.at(
                                ch,
                                nearest_index(cell_center(y, fh), fh * k),
                                nearest_index(cell_center(x, fw), fw * k),
                            )
                        })
                    })
                })
                .collect(),
        )
        .unwrap();
        ok &= back == f;
        if !ok {
            rep.roundtrip_failures += 1;
        }
    }
    rep
}

// ------------------------------------------------------- checkpoint fuzzing

/// Applies `n` random truncations or byte edits and counts clean rejections.
pub fn checkpoint_fuzz(bytes: &[u8], n: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut rejected = 0;
    for i in 0..n {
        let mut b = bytes.to_vec();
        if i % 2 == 0 {
            b.truncate(r.gen_range(0..bytes.len()));
        } else {
            let pos = r.gen_range(0..b.len());
            b[pos] ^= r.gen_range(1..=255u8);
        }
        let outcome = std::panic::catch_unwind(|| {
            checkpoint::from_bytes(&b, &Device::Cpu, DType::F32).is_err()
        });
        if matches!(outcome, Ok(true)) {
            rejected += 1;
        }
    }
    rejected
}
