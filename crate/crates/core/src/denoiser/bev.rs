//! Handcrafted bird's-eye-view raster of a point cloud.

use crate::error::{Error, Result};
use crate::geom::Point3;
use serde::{Deserialize, Serialize};

pub const BEV_CHANNELS: usize = 6;

/// Channel order of [`BevGrid`] cells.
pub const BEV_CHANNEL_NAMES: [&str; BEV_CHANNELS] = [
    "log_count",
    "max_z",
    "min_z",
    "mean_z",
    "var_z",
    "mean_range",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BevConfig {
    /// The grid covers `[-half_extent, half_extent)` on both axes.
    pub half_extent: f64,
    pub cell: f64,
    /// Attention tokens average `token_stride × token_stride` cells.
    pub token_stride: usize,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self {
            half_extent: 48.0,
            cell: 0.5,
            token_stride: 4,
        }
    }
}

impl BevConfig {
    pub fn cells_per_side(&self) -> Result<usize> {
        let n = 2.0 * self.half_extent / self.cell;
        if !(self.cell > 0.0) || !(n >= 1.0) || (n - n.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "cell size {} does not tile the extent {}",
                self.cell,
                2.0 * self.half_extent
            )));
        }
        let n = n.round() as usize;
        if self.token_stride == 0 || !n.is_multiple_of(self.token_stride) {
            return Err(Error::Config(format!(
                "token_stride {} does not divide {n} cells",
                self.token_stride
            )));
        }
        Ok(n)
    }
}

/// Per-cell statistics on a square grid, stored cell-major
/// (`data[(row * n + col) * C + channel]`, row along `y`), plus pooled
/// tokens for global attention.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    pub config: BevConfig,
    pub n: usize,
    pub data: Vec<f64>,
    /// Pooled cell features, `tokens × C`.
    pub tokens: Vec<f64>,
    /// Centre of each token in meters.
    pub token_xy: Vec<[f64; 2]>,
}

impl BevGrid {
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.n + col) * BEV_CHANNELS;
        &self.data[i..i + BEV_CHANNELS]
    }

    pub fn num_tokens(&self) -> usize {
        self.token_xy.len()
    }

    /// Whether `(x, y)` lies on the grid.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let e = self.config.half_extent;
        (-e..e).contains(&x) && (-e..e).contains(&y)
    }

    /// Bilinear interpolation over cell centres; coordinates beyond the outer
    /// centres clamp to the border.
    pub fn sample(&self, x: f64, y: f64) -> [f64; BEV_CHANNELS] {
        let e = self.config.half_extent;
        let c = self.config.cell;
        let top = (self.n - 1) as f64;
        let fx = ((x + e) / c - 0.5).clamp(0.0, top);
        let fy = ((y + e) / c - 0.5).clamp(0.0, top);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.n - 1), (y0 + 1).min(self.n - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let mut out = [0.0; BEV_CHANNELS];
        for (row, col, w) in [
            (y0, x0, (1.0 - tx) * (1.0 - ty)),
            (y0, x1, tx * (1.0 - ty)),
            (y1, x0, (1.0 - tx) * ty),
            (y1, x1, tx * ty),
        ] {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.cell(row, col)) {
                *o += w * v;
            }
        }
        out
    }
}

/// Rasterizes `points` onto the grid. Empty cells are all zero; points off
/// the grid are ignored.
pub fn rasterize_points(points: &[Point3], config: &BevConfig) -> Result<BevGrid> {
    let n = config.cells_per_side()?;
    let e = config.half_extent;
    let mut count = vec![0usize; n * n];
    let mut zmax = vec![f64::NEG_INFINITY; n * n];
    let mut zmin = vec![f64::INFINITY; n * n];
    let mut zsum = vec![0.0; n * n];
    let mut zsq = vec![0.0; n * n];
    let mut rsum = vec![0.0; n * n];
    for p in points {
        if !(-e..e).contains(&p.x) || !(-e..e).contains(&p.y) {
            continue;
        }
        let col = (((p.x + e) / config.cell).floor() as usize).min(n - 1);
        let row = (((p.y + e) / config.cell).floor() as usize).min(n - 1);
        let i = row * n + col;
        count[i] += 1;
        zmax[i] = zmax[i].max(p.z);
        zmin[i] = zmin[i].min(p.z);
        zsum[i] += p.z;
        zsq[i] += p.z * p.z;
        rsum[i] += p.norm();
    }
    let mut data = vec![0.0; n * n * BEV_CHANNELS];
    for i in 0..n * n {
        if count[i] == 0 {
            continue;
        }
        let k = count[i] as f64;
        let mean = zsum[i] / k;
        let cell = &mut data[i * BEV_CHANNELS..(i + 1) * BEV_CHANNELS];
        cell[0] = (1.0 + k).ln();
        cell[1] = zmax[i];
        cell[2] = zmin[i];
        cell[3] = mean;
        cell[4] = (zsq[i] / k - mean * mean).max(0.0);
        cell[5] = rsum[i] / k;
    }

    let s = config.token_stride;
    let m = n / s;
    let mut tokens = vec![0.0; m * m * BEV_CHANNELS];
    let mut token_xy = Vec::with_capacity(m * m);
    let norm = 1.0 / (s * s) as f64;
    for tr in 0..m {
        for tc in 0..m {
            let t = &mut tokens[(tr * m + tc) * BEV_CHANNELS..(tr * m + tc + 1) * BEV_CHANNELS];
            for r in tr * s..(tr + 1) * s {
                for c in tc * s..(tc + 1) * s {
                    let i = (r * n + c) * BEV_CHANNELS;
                    for (o, v) in t.iter_mut().zip(&data[i..i + BEV_CHANNELS]) {
                        *o += v * norm;
                    }
                }
            }
            let span = s as f64 * config.cell;
            token_xy.push([-e + (tc as f64 + 0.5) * span, -e + (tr as f64 + 0.5) * span]);
        }
    }
    Ok(BevGrid {
        config: *config,
        n,
        data,
        tokens,
        token_xy,
    })
}

pub fn rasterize_bev(scene: &crate::scene::Scene, config: &BevConfig) -> Result<BevGrid> {
    rasterize_points(&scene.points, config)
}
