//! Scalar volumes on axis-aligned grids, trilinear sampling and the raw volume format.
//!
//! Voxel `(i, j, k)` sits at world position `origin + spacing * (i, j, k)` (mm).
//! Storage is x-fastest: `index = (k * ny + j) * nx + i`, which is the
//! `[D, H, W] = [nz, ny, nx]` layout the networks consume.
//!
//! On disk a volume is a raw file of little-endian `f64` values plus a JSON
//! sidecar at `<path>.json` holding the [`Grid`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::shape::Point;

/// Distance below which a continuous index is treated as lying exactly on a voxel.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// Voxel counts along x, y, z.
    pub dims: [usize; 3],
    /// Voxel spacing along x, y, z in mm.
    pub spacing: [f64; 3],
    /// World position of voxel (0, 0, 0) in mm.
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Self { dims, spacing, origin };
        g.validate()?;
        Ok(g)
    }

    /// Cubic grid of `n` voxels per side centred on the world origin.
    pub fn centered(n: usize, spacing: f64) -> Result<Self> {
        let o = -0.5 * (n as f64 - 1.0) * spacing;
        Self::new([n; 3], [spacing; 3], [o; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(CoreError::Invalid(format!("grid extents must be >= 1, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(CoreError::Invalid(format!("grid spacing must be positive, got {:?}", self.spacing)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(CoreError::Invalid("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tensor layout `[nz, ny, nx]`.
    pub fn tensor_shape(&self) -> [usize; 3] {
        [self.dims[2], self.dims[1], self.dims[0]]
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn world(&self, i: usize, j: usize, k: usize) -> Point {
        [
            self.origin[0] + self.spacing[0] * i as f64,
            self.origin[1] + self.spacing[1] * j as f64,
            self.origin[2] + self.spacing[2] * k as f64,
        ]
    }

    /// Continuous voxel coordinates of a world point.
    pub fn continuous_index(&self, p: Point) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.origin[a]) / self.spacing[a])
    }

    /// World-space bounding box `(min, max)` of voxel centres.
    pub fn bounds(&self) -> (Point, Point) {
        let hi = self.world(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        (self.origin, hi)
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f64>,
}

/// Lower neighbour, upper neighbour and upper weight along one axis.
fn axis_weights(u: f64, n: usize) -> Option<(usize, usize, f64)> {
    let r = u.round();
    let u = if (u - r).abs() < SNAP { r } else { u };
    if u < 0.0 || u > (n - 1) as f64 {
        return None;
    }
    if n == 1 {
        return Some((0, 0, 0.0));
    }
    let i0 = (u.floor() as usize).min(n - 2);
    Some((i0, i0 + 1, u - i0 as f64))
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(CoreError::Dimension(format!(
                "volume data has {} values, grid {:?} needs {}",
                data.len(),
                grid.dims,
                grid.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Invalid("volume intensities must be finite".into()));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Result<Self> {
        Self::new(grid, vec![value; grid.len()])
    }

    /// Evaluates `f` at every voxel centre.
    pub fn from_fn(grid: Grid, f: impl Fn(Point) -> f64 + Sync) -> Result<Self> {
        use rayon::prelude::*;
        grid.validate()?;
        let [nx, ny, _] = grid.dims;
        let data: Vec<f64> = (0..grid.len())
            .into_par_iter()
            .map(|idx| {
                let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
                f(grid.world(i, j, k))
            })
            .collect();
        Self::new(grid, data)
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    /// Trilinear interpolation at a world point; points outside the voxel-centre
    /// bounding box yield `background`. Points within 1e-9 voxel of a grid
    /// position return that voxel's value exactly.
    pub fn sample(&self, p: Point, background: f64) -> f64 {
        let u = self.grid.continuous_index(p);
        let [nx, ny, nz] = self.grid.dims;
        let (Some((x0, x1, fx)), Some((y0, y1, fy)), Some((z0, z1, fz))) =
            (axis_weights(u[0], nx), axis_weights(u[1], ny), axis_weights(u[2], nz))
        else {
            return background;
        };
        if fx == 0.0 && fy == 0.0 && fz == 0.0 {
            return self.at(x0, y0, z0);
        }
        let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
        let c00 = lerp(self.at(x0, y0, z0), self.at(x1, y0, z0), fx);
        let c10 = lerp(self.at(x0, y1, z0), self.at(x1, y1, z0), fx);
        let c01 = lerp(self.at(x0, y0, z1), self.at(x1, y0, z1), fx);
        let c11 = lerp(self.at(x0, y1, z1), self.at(x1, y1, z1), fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }

    /// Resamples onto `grid` by trilinear interpolation.
    pub fn resample(&self, grid: Grid, background: f64) -> Result<Self> {
        Self::from_fn(grid, |p| self.sample(p, background))
    }

    /// Block-averages by `factor` per axis: extents shrink by `factor`, spacing grows by it,
    /// and the origin moves to the centre of the first block.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(CoreError::Invalid("downsample factor must be >= 1".into()));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let g = &self.grid;
        if g.dims.iter().any(|d| d % factor != 0) {
            return Err(CoreError::Invalid(format!("extents {:?} not divisible by {factor}", g.dims)));
        }
        let dims = g.dims.map(|d| d / factor);
        let spacing = g.spacing.map(|s| s * factor as f64);
        let shift = 0.5 * (factor as f64 - 1.0);
        let origin = [0, 1, 2].map(|a| g.origin[a] + shift * g.spacing[a]);
        let out = Grid::new(dims, spacing, origin)?;
        let norm = 1.0 / (factor * factor * factor) as f64;
        let mut data = vec![0.0; out.len()];
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let mut s = 0.0;
                    for dk in 0..factor {
                        for dj in 0..factor {
                            for di in 0..factor {
                                s += self.at(i * factor + di, j * factor + dj, k * factor + dk);
                            }
                        }
                    }
                    data[out.index(i, j, k)] = s * norm;
                }
            }
        }
        Self::new(out, data)
    }

    /// Zero-mean, unit-variance copy of the intensities (only centred when constant).
    pub fn standardized(&self) -> Vec<f64> {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        self.data.iter().map(|v| (v - mean) * inv).collect()
    }

    /// Intensity-weighted centroid in world coordinates.
    pub fn centroid(&self) -> Point {
        let [nx, ny, nz] = self.grid.dims;
        let mut acc = [0.0; 3];
        let mut mass = 0.0;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let w = self.at(i, j, k);
                    let p = self.grid.world(i, j, k);
                    for a in 0..3 {
                        acc[a] += w * p[a];
                    }
                    mass += w;
                }
            }
        }
        acc.map(|v| v / mass)
    }

    /// Sum of intensities times voxel volume.
    pub fn integral(&self) -> f64 {
        let dv: f64 = self.grid.spacing.iter().product();
        self.data.iter().sum::<f64>() * dv
    }
}

/// Sidecar header path for a raw volume file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct Header {
    grid: Grid,
    dtype: String,
    order: String,
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    let mut bytes = Vec::with_capacity(volume.data.len() * 8);
    for v in &volume.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| CoreError::io(path, e))?;
    let header = Header { grid: volume.grid, dtype: "f64le".into(), order: "x-fastest".into() };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&header)?;
    fs::write(&side, json + "\n").map_err(|e| CoreError::io(&side, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| CoreError::io(&side, e))?;
    let header: Header = serde_json::from_str(&text)?;
    if header.dtype != "f64le" || header.order != "x-fastest" {
        return Err(CoreError::Invalid(format!(
            "{}: unsupported layout {}/{}",
            side.display(),
            header.dtype,
            header.order
        )));
    }
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    if bytes.len() != header.grid.len() * 8 {
        return Err(CoreError::Dimension(format!(
            "{}: {} bytes for grid {:?}",
            path.display(),
            bytes.len(),
            header.grid.dims
        )));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Volume::new(header.grid, data)
}
