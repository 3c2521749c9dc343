//! BEV raster geometry and planar rigid transforms.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2D point or vector in meters.
pub type Vec2 = [f64; 2];

/// Row-major cell index into a [`GridSpec`] raster.
pub type CellIndex = usize;

/// Axis-aligned bird's-eye-view raster in an agent's local frame.
///
/// Rows run along `y` (row 0 at `y_min`), columns along `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpecDef", into = "GridSpecDef")]
pub struct GridSpec {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    cell_size: f64,
    z_min: f64,
    z_max: f64,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSpecDef {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    cell_size: f64,
    z_min: f64,
    z_max: f64,
}

impl TryFrom<GridSpecDef> for GridSpec {
    type Error = Error;

    fn try_from(d: GridSpecDef) -> Result<Self> {
        GridSpec::new(
            (d.x_min, d.x_max),
            (d.y_min, d.y_max),
            d.cell_size,
            (d.z_min, d.z_max),
        )
    }
}

impl From<GridSpec> for GridSpecDef {
    fn from(g: GridSpec) -> Self {
        GridSpecDef {
            x_min: g.x_min,
            x_max: g.x_max,
            y_min: g.y_min,
            y_max: g.y_max,
            cell_size: g.cell_size,
            z_min: g.z_min,
            z_max: g.z_max,
        }
    }
}

fn cell_count(span: f64, cell_size: f64) -> usize {
    // Tolerate representation error so that e.g. 76.8 / 0.4 yields 192, not 193.
    ((span / cell_size) - 1e-9).ceil().max(1.0) as usize
}

impl GridSpec {
    pub fn new(x: (f64, f64), y: (f64, f64), cell_size: f64, height_band: (f64, f64)) -> Result<Self> {
        let all = [x.0, x.1, y.0, y.1, cell_size, height_band.0, height_band.1];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("grid parameters must be finite"));
        }
        if cell_size <= 0.0 {
            return Err(Error::invalid("cell_size must be positive"));
        }
        if x.1 <= x.0 || y.1 <= y.0 {
            return Err(Error::invalid("grid extent must satisfy max > min on both axes"));
        }
        if height_band.1 <= height_band.0 {
            return Err(Error::invalid("height band must satisfy z_max > z_min"));
        }
        Ok(GridSpec {
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
            cell_size,
            z_min: height_band.0,
            z_max: height_band.1,
            rows: cell_count(y.1 - y.0, cell_size),
            cols: cell_count(x.1 - x.0, cell_size),
        })
    }

    /// Square grid centred on the local origin.
    pub fn centered(half_extent: f64, cell_size: f64, height_band: (f64, f64)) -> Result<Self> {
        GridSpec::new(
            (-half_extent, half_extent),
            (-half_extent, half_extent),
            cell_size,
            height_band,
        )
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.x_min, self.x_max)
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.y_min, self.y_max)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn height_band(&self) -> (f64, f64) {
        (self.z_min, self.z_max)
    }

    /// Number of rows (H).
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of columns (W).
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> CellIndex {
        row * self.cols + col
    }

    pub fn row_col(&self, idx: CellIndex) -> (usize, usize) {
        (idx / self.cols, idx % self.cols)
    }

    pub fn cell_center(&self, idx: CellIndex) -> Vec2 {
        let (row, col) = self.row_col(idx);
        [
            self.x_min + (col as f64 + 0.5) * self.cell_size,
            self.y_min + (row as f64 + 0.5) * self.cell_size,
        ]
    }

    /// Nearest-cell lookup; `None` outside the raster.
    pub fn cell_of(&self, p: Vec2) -> Option<CellIndex> {
        let fx = (p[0] - self.x_min) / self.cell_size;
        let fy = (p[1] - self.y_min) / self.cell_size;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (col, row) = (fx as usize, fy as usize);
        (col < self.cols && row < self.rows).then(|| row * self.cols + col)
    }

    /// Stable 64-bit fingerprint of the grid definition (FNV-1a over the
    /// little-endian bit patterns of the defining parameters).
    pub fn hash(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut h = OFFSET;
        for v in [
            self.x_min,
            self.x_max,
            self.y_min,
            self.y_max,
            self.cell_size,
            self.z_min,
            self.z_max,
        ] {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        }
        h
    }
}

/// Wrap an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Rigid planar pose of a local frame expressed in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub translation: Vec2,
    rotation: f64,
}

impl Default for Pose2D {
    fn default() -> Self {
        Pose2D::identity()
    }
}

impl Pose2D {
    pub fn new(translation: Vec2, rotation: f64) -> Self {
        Pose2D {
            translation,
            rotation: normalize_angle(rotation),
        }
    }

    pub fn identity() -> Self {
        Pose2D::new([0.0, 0.0], 0.0)
    }

    pub fn rotation(&self) -> f64 {
        self.rotation
    }

    /// Map a local-frame point into the world frame.
    pub fn to_world(&self, p: Vec2) -> Vec2 {
        let (s, c) = self.rotation.sin_cos();
        [
            c * p[0] - s * p[1] + self.translation[0],
            s * p[0] + c * p[1] + self.translation[1],
        ]
    }
}

/// World-to-ego rigid transform: `R(-θ)·(p - t)`.
pub fn world_to_ego(point: Vec2, ego_pose: &Pose2D) -> Vec2 {
    let (s, c) = ego_pose.rotation.sin_cos();
    let dx = point[0] - ego_pose.translation[0];
    let dy = point[1] - ego_pose.translation[1];
    [c * dx + s * dy, -s * dx + c * dy]
}

pub(crate) fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}
