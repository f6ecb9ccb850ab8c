//! Normalized coordinate systems shared by the pixel and texture branches.
//!
//! An axis of `n` cells is mapped onto `[-1, 1]` with cell `i` centred at
//! `-1 + (2i + 1) / n`. Output grids at scale `s` have `floor(s * n)` cells.

use crate::error::{invalid, shape, Result};

/// Tolerance absorbed by [`output_size`] so that e.g. `121/48 * 48` floors to 121.
const FLOOR_EPS: f64 = 1e-9;

/// Centre of cell `i` on an axis of `n` cells.
#[inline]
pub fn cell_center(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// Number of output cells at `scale` for an axis of `n` input cells.
pub fn output_size(n: usize, scale: f64) -> usize {
    (scale * n as f64 + FLOOR_EPS).floor() as usize
}

/// Continuous cell position in index units: cell centres sit on integers.
#[inline]
fn index_position(coord: f64, n: usize) -> f64 {
    (coord + 1.0) * n as f64 / 2.0 - 0.5
}

/// Index of the cell whose centre is nearest to `coord`. Exact midpoints go to
/// the lower index; results are clamped into the axis.
#[inline]
pub fn nearest_index(coord: f64, n: usize) -> usize {
    let p = index_position(coord, n);
    let idx = (p - 0.5).ceil();
    idx.clamp(0.0, (n - 1) as f64) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordGrid {
    pub height: usize,
    pub width: usize,
    /// `(y, x)` per cell, row-major.
    pub coords: Vec<[f64; 2]>,
}

impl CoordGrid {
    pub fn coord(&self, row: usize, col: usize) -> [f64; 2] {
        self.coords[row * self.width + col]
    }
}

pub fn make_coord_grid(height: usize, width: usize) -> Result<CoordGrid> {
    if height == 0 || width == 0 {
        return Err(invalid(format!(
            "grid dims must be positive, got {height}x{width}"
        )));
    }
    let mut coords = Vec::with_capacity(height * width);
    for r in 0..height {
        let y = cell_center(r, height);
        for c in 0..width {
            coords.push([y, cell_center(c, width)]);
        }
    }
    Ok(CoordGrid {
        height,
        width,
        coords,
    })
}

/// HR query positions together with their LR anchoring.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub lr_h: usize,
    pub lr_w: usize,
    /// Output grid dims when the set covers a full grid; `None` for scattered queries.
    pub out_dims: Option<(usize, usize)>,
    pub hr_coords: Vec<[f64; 2]>,
    pub nearest_lr_index: Vec<[usize; 2]>,
    /// `hr_coord - lr_coord(nearest)` in normalized units.
    pub local_grid: Vec<[f64; 2]>,
    /// Normalized size of one output pixel, `(2 / out_h, 2 / out_w)`.
    pub cell: [f64; 2],
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.hr_coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr_coords.is_empty()
    }

    /// Builds a query set from arbitrary normalized coordinates.
    pub fn from_coords(
        lr_h: usize,
        lr_w: usize,
        hr_coords: Vec<[f64; 2]>,
        cell: [f64; 2],
    ) -> Result<Self> {
        if lr_h == 0 || lr_w == 0 {
            return Err(invalid("LR grid must be non-empty"));
        }
        if !(cell[0] > 0.0 && cell[1] > 0.0) {
            return Err(invalid(format!("cell must be positive, got {cell:?}")));
        }
        let mut nearest = Vec::with_capacity(hr_coords.len());
        let mut local = Vec::with_capacity(hr_coords.len());
        for &[y, x] in &hr_coords {
            let (r, c) = (nearest_index(y, lr_h), nearest_index(x, lr_w));
            nearest.push([r, c]);
            local.push([y - cell_center(r, lr_h), x - cell_center(c, lr_w)]);
        }
        Ok(Self {
            lr_h,
            lr_w,
            out_dims: None,
            hr_coords,
            nearest_lr_index: nearest,
            local_grid: local,
            cell,
        })
    }

    /// Keeps only the queries at `indices` (in the given order).
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            lr_h: self.lr_h,
            lr_w: self.lr_w,
            out_dims: None,
            hr_coords: indices.iter().map(|&i| self.hr_coords[i]).collect(),
            nearest_lr_index: indices.iter().map(|&i| self.nearest_lr_index[i]).collect(),
            local_grid: indices.iter().map(|&i| self.local_grid[i]).collect(),
            cell: self.cell,
        }
    }

    /// Splits into consecutive chunks of at most `size` queries.
    pub fn chunks(&self, size: usize) -> Vec<Self> {
        let size = size.max(1);
        (0..self.len())
            .step_by(size)
            .map(|start| {
                let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
                self.select(&idx)
            })
            .collect()
    }
}

/// Queries for every cell of the `floor(scale * lr)` output grid.
pub fn build_query_set(lr_h: usize, lr_w: usize, scale: f64) -> Result<QuerySet> {
    if !(scale >= 1.0) || !scale.is_finite() {
        return Err(invalid(format!("scale must be >= 1, got {scale}")));
    }
    if lr_h == 0 || lr_w == 0 {
        return Err(invalid("LR grid must be non-empty"));
    }
    let (out_h, out_w) = (output_size(lr_h, scale), output_size(lr_w, scale));
    let grid = make_coord_grid(out_h, out_w)?;
    let cell = [2.0 / out_h as f64, 2.0 / out_w as f64];
    let mut q = QuerySet::from_coords(lr_h, lr_w, grid.coords, cell)?;
    q.out_dims = Some((out_h, out_w));
    Ok(q)
}

/// Four LR cells surrounding a query, ordered upper-left, upper-right,
/// lower-left, lower-right, with normalized area weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleNeighbors {
    pub indices: [[usize; 2]; 4],
    pub weights: [f64; 4],
    /// `x_q - u_t` in normalized units.
    pub offsets: [[f64; 2]; 4],
}

/// Lower/upper neighbour indices along one axis and their interpolation weights.
fn axis_neighbors(coord: f64, n: usize) -> ([usize; 2], [f64; 2]) {
    let p = index_position(coord, n);
    let lo = p.floor();
    let clamp = |v: f64| v.clamp(0.0, (n - 1) as f64);
    let (lo_c, hi_c) = (clamp(lo), clamp(lo + 1.0));
    let (d_lo, d_hi) = ((p - lo_c).abs(), (p - hi_c).abs());
    let total = d_lo + d_hi;
    // A neighbour's weight is the extent towards the opposite neighbour.
    let weights = if total > 0.0 {
        [d_hi / total, d_lo / total]
    } else {
        [0.5, 0.5]
    };
    ([lo_c as usize, hi_c as usize], weights)
}

/// Local-ensemble neighbours of `coord` on `lr_grid`.
///
/// The weight of neighbour `t` is the area of the rectangle spanned by the
/// query and the diagonally opposite neighbour, normalized by the total area.
/// Because those areas factor into per-axis extents, this is computed axis by
/// axis. Out-of-grid neighbours are clamped to the edge cell.
pub fn ensemble_neighbors(coord: [f64; 2], lr_grid: &CoordGrid) -> EnsembleNeighbors {
    ensemble_neighbors_dims(coord, lr_grid.height, lr_grid.width)
}

pub fn ensemble_neighbors_dims(coord: [f64; 2], lr_h: usize, lr_w: usize) -> EnsembleNeighbors {
    let (ry, wy) = axis_neighbors(coord[0], lr_h);
    let (rx, wx) = axis_neighbors(coord[1], lr_w);
    let mut indices = [[0; 2]; 4];
    let mut weights = [0.0; 4];
    let mut offsets = [[0.0; 2]; 4];
    for a in 0..2 {
        for b in 0..2 {
            let t = a * 2 + b;
            indices[t] = [ry[a], rx[b]];
            weights[t] = wy[a] * wx[b];
            offsets[t] = [
                coord[0] - cell_center(ry[a], lr_h),
                coord[1] - cell_center(rx[b], lr_w),
            ];
        }
    }
    EnsembleNeighbors {
        indices,
        weights,
        offsets,
    }
}

/// Host-side `C x h x w` feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major data.
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn vector(&self, y: usize, x: usize) -> Vec<f32> {
        (0..self.channels).map(|c| self.at(c, y, x)).collect()
    }
}

/// Nearest-neighbour upsampling using the same nearest-index rule as [`build_query_set`].
pub fn nn_upsample(f: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if out_h < f.height || out_w < f.width {
        return Err(invalid(format!(
            "nn_upsample cannot shrink {}x{} to {out_h}x{out_w}",
            f.height, f.width
        )));
    }
    let rows: Vec<usize> = (0..out_h)
        .map(|i| nearest_index(cell_center(i, out_h), f.height))
        .collect();
    let cols: Vec<usize> = (0..out_w)
        .map(|j| nearest_index(cell_center(j, out_w), f.width))
        .collect();
    let mut data = Vec::with_capacity(f.channels * out_h * out_w);
    for c in 0..f.channels {
        for &r in &rows {
            for &col in &cols {
                data.push(f.at(c, r, col));
            }
        }
    }
    FeatureMap::new(f.channels, out_h, out_w, data)
}
