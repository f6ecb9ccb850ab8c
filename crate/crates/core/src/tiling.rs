//! Tiled inference over the global output grid.
//!
//! Every output pixel keeps the coordinate it has in the untiled result; a
//! tile only changes which LR pixels the network sees. A global normalized
//! coordinate `c` (image extent `H`) maps into a tile starting at `y0` with
//! extent `th` as `c' = c * H / th + (H - 2 * y0 - th) / th`, and the cell
//! scales by `H / th`. Overlapping tiles are blended with linear ramps that
//! sum to one across each overlap band.
//!
//! The network sees each tile widened by `overlap` LR pixels of context on
//! every side (clipped at the image border), so pixels the tile contributes
//! to are never closer than `overlap` to an artificial window edge.

use std::ops::Range;

use crate::error::{invalid, Result};
use crate::geometry::{cell_center, nearest_index, output_size, QuerySet};
use crate::image::ImageTensor;
use crate::model::IsteModel;

pub const DEFAULT_TILE: usize = 96;
pub const DEFAULT_OVERLAP: usize = 12;
pub const MIN_TILE: usize = 48;

/// Span `[start, end)` of one tile along an axis, in LR pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Tile spans covering `[0, n)` with stride `tile - overlap`.
pub fn tile_spans(n: usize, tile: usize, overlap: usize) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + tile).min(n);
        spans.push(Span { start, end });
        if end == n {
            return spans;
        }
        start += tile - overlap;
    }
}

/// Blend weight of each tile at continuous LR position `p`; nonzero entries only.
fn axis_weights(p: f64, spans: &[Span], overlap: usize) -> Vec<(usize, f64)> {
    let ov = overlap as f64;
    let mut out = Vec::with_capacity(2);
    for (k, s) in spans.iter().enumerate() {
        let (a, b) = (s.start as f64, s.end as f64);
        if p < a || p >= b {
            continue;
        }
        let mut w = 1.0f64;
        if k > 0 && overlap > 0 {
            w = w.min((p - a) / ov);
        }
        if k + 1 < spans.len() && overlap > 0 {
            w = w.min((b - p) / ov);
        }
        if w > 0.0 {
            out.push((k, w.min(1.0)));
        }
    }
    out
}

/// Maps a global normalized coordinate into a window `[start, start + len)` of an axis of extent `n`.
pub fn to_window(c: f64, n: usize, start: usize, len: usize) -> f64 {
    let (n, s, l) = (n as f64, start as f64, len as f64);
    c * n / l + (n - 2.0 * s - l) / l
}

/// Predicts the given global output pixels from an LR window of `img`.
/// `rows`/`cols` index the global `out_h x out_w` grid.
pub fn render_window(
    model: &IsteModel,
    img: &ImageTensor,
    window: (Span, Span),
    out_dims: (usize, usize),
    pixels: &[(usize, usize)],
) -> Result<Vec<[f32; 3]>> {
    let (h, w) = img.dims();
    let (out_h, out_w) = out_dims;
    let (ys, xs) = window;
    if ys.end > h || xs.end > w || ys.is_empty() || xs.is_empty() {
        return Err(invalid(format!(
            "window {ys:?} x {xs:?} outside {h}x{w} image"
        )));
    }
    let crop = img.crop(ys.start, xs.start, ys.len(), xs.len())?;
    let coords = pixels
        .iter()
        .map(|&(r, c)| {
            [
                to_window(cell_center(r, out_h), h, ys.start, ys.len()),
                to_window(cell_center(c, out_w), w, xs.start, xs.len()),
            ]
        })
        .collect();
    let cell = [
        2.0 / out_h as f64 * h as f64 / ys.len() as f64,
        2.0 / out_w as f64 * w as f64 / xs.len() as f64,
    ];
    let mut q = QuerySet::from_coords(ys.len(), xs.len(), coords, cell)?;
    // Nearest cells are decided on the global grid: a query exactly between
    // two LR cells must resolve the same way in every window, and the
    // transformed coordinate can round across the tie.
    for (k, &(r, c)) in pixels.iter().enumerate() {
        let (gy, gx) = (cell_center(r, out_h), cell_center(c, out_w));
        let (ny, nx) = (nearest_index(gy, h), nearest_index(gx, w));
        let ly = ny.clamp(ys.start, ys.end - 1);
        let lx = nx.clamp(xs.start, xs.end - 1);
        q.nearest_lr_index[k] = [ly - ys.start, lx - xs.start];
        q.local_grid[k] = [
            (gy - cell_center(ly, h)) * h as f64 / ys.len() as f64,
            (gx - cell_center(lx, w)) * w as f64 / xs.len() as f64,
        ];
    }
    model.query(&crop, &q)
}

/// Super-resolves `img` tile by tile; output is `floor(s*H) x floor(s*W)`, clamped.
pub fn infer_tiled(
    model: &IsteModel,
    img: &ImageTensor,
    scale: f64,
    tile: usize,
    overlap: usize,
) -> Result<ImageTensor> {
    if !(scale >= 1.0) || !scale.is_finite() {
        return Err(invalid(format!("scale must be >= 1, got {scale}")));
    }
    if tile < MIN_TILE {
        return Err(invalid(format!("tile must be >= {MIN_TILE}, got {tile}")));
    }
    if 2 * overlap >= tile {
        return Err(invalid(format!(
            "overlap {overlap} must be below half the tile size {tile}"
        )));
    }
    let (h, w) = img.dims();
    let (oh, ow) = (output_size(h, scale), output_size(w, scale));
    let row_spans = tile_spans(h, tile, overlap);
    let col_spans = tile_spans(w, tile, overlap);
    if row_spans.len() == 1 && col_spans.len() == 1 {
        return model.forward(img, scale);
    }
    let lr_pos = |i: usize, n_out: usize, n: usize| (cell_center(i, n_out) + 1.0) * n as f64 / 2.0;
    let row_w: Vec<_> = (0..oh)
        .map(|r| axis_weights(lr_pos(r, oh, h), &row_spans, overlap))
        .collect();
    let col_w: Vec<_> = (0..ow)
        .map(|c| axis_weights(lr_pos(c, ow, w), &col_spans, overlap))
        .collect();

    let mut acc = vec![0.0f64; oh * ow * 3];
    let mut norm = vec![0.0f64; oh * ow];
    for (ti, ys) in row_spans.iter().enumerate() {
        let rows: Vec<(usize, f64)> = pick(&row_w, ti);
        for (tj, xs) in col_spans.iter().enumerate() {
            let cols: Vec<(usize, f64)> = pick(&col_w, tj);
            let mut pixels = Vec::with_capacity(rows.len() * cols.len());
            let mut weights = Vec::with_capacity(rows.len() * cols.len());
            for &(r, wr) in &rows {
                for &(c, wc) in &cols {
                    pixels.push((r, c));
                    weights.push(wr * wc);
                }
            }
            if pixels.is_empty() {
                continue;
            }
            let window = (with_context(*ys, overlap, h), with_context(*xs, overlap, w));
            let rgb = render_window(model, img, window, (oh, ow), &pixels)?;
            for ((&(r, c), wt), v) in pixels.iter().zip(&weights).zip(&rgb) {
                let i = r * ow + c;
                norm[i] += wt;
                for k in 0..3 {
                    acc[i * 3 + k] += wt * v[k] as f64;
                }
            }
        }
    }
    let data = acc
        .chunks(3)
        .zip(&norm)
        .flat_map(|(v, &n)| v.iter().map(move |x| (x / n) as f32))
        .collect();
    Ok(ImageTensor::new(oh, ow, data)?.clamped())
}

fn with_context(s: Span, overlap: usize, n: usize) -> Span {
    Span {
        start: s.start.saturating_sub(overlap),
        end: (s.end + overlap).min(n),
    }
}

fn pick(weights: &[Vec<(usize, f64)>], tile: usize) -> Vec<(usize, f64)> {
    weights
        .iter()
        .enumerate()
        .filter_map(|(i, ws)| ws.iter().find(|(k, _)| *k == tile).map(|&(_, w)| (i, w)))
        .collect()
}

/// Output pixel range covered by LR region `[x, x + w)` at `scale`: it starts at
/// `floor(scale * x)` and has `floor(scale * w)` pixels.
pub fn region_output_range(x: usize, w: usize, scale: f64) -> Range<usize> {
    let start = output_size(x, scale);
    start..start + output_size(w, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_cover_with_fixed_overlap() {
        assert_eq!(tile_spans(50, 96, 12), vec![Span { start: 0, end: 50 }]);
        let s = tile_spans(200, 96, 12);
        assert_eq!(
            s,
            vec![
                Span { start: 0, end: 96 },
                Span {
                    start: 84,
                    end: 180
                },
                Span {
                    start: 168,
                    end: 200
                }
            ]
        );
        for n in 1..300 {
            let s = tile_spans(n, 64, 10);
            assert_eq!(s.last().unwrap().end, n);
            for pair in s.windows(2) {
                assert_eq!(pair[0].end - pair[1].start, 10);
                assert!(pair[1].len() > 10);
            }
        }
    }

    #[test]
    fn axis_weights_partition_unity() {
        let spans = tile_spans(200, 96, 12);
        for i in 0..2000 {
            let p = i as f64 * 0.1 + 0.05;
            let ws = axis_weights(p, &spans, 12);
            let total: f64 = ws.iter().map(|w| w.1).sum();
            assert!((total - 1.0).abs() < 1e-12, "p {p}: {ws:?}");
            assert!(ws.len() <= 2);
        }
    }

    #[test]
    fn window_map_identity_and_offsets() {
        assert_eq!(to_window(0.3, 50, 0, 50), 0.3);
        // Left edge of the window maps to -1, right edge to 1.
        let left = -1.0 + 2.0 * 20.0 / 100.0;
        let right = -1.0 + 2.0 * 60.0 / 100.0;
        assert!((to_window(left, 100, 20, 40) + 1.0).abs() < 1e-12);
        assert!((to_window(right, 100, 20, 40) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn region_ranges() {
        assert_eq!(region_output_range(0, 32, 2.5), 0..80);
        assert_eq!(region_output_range(32, 32, 2.5), 80..160);
    }
}
