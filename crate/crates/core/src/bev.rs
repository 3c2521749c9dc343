//! Occupancy rasterization, Beer–Lambert line-of-sight transmittance and
//! blind-zone masks.
//!
//! Every raster lives in an agent-local frame whose origin is the sensor.
//! Rays start at that origin and read occupancy by nearest-cell lookup at
//! equally spaced samples `s = kΔs`, `k = 0..=K`, with `K = round(r/Δs)`.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{world_to_ego, CellIndex, GridSpec, Pose2D, Vec2};

/// Per-cell occupancy `o(u)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyField {
    grid: GridSpec,
    values: Vec<f64>,
}

impl OccupancyField {
    pub fn zeros(grid: GridSpec) -> Self {
        OccupancyField {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(format!(
                "occupancy has {} values, grid has {} cells",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("occupancy values must lie in [0, 1]"));
        }
        Ok(OccupancyField { grid, values })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, idx: CellIndex) -> f64 {
        self.values[idx]
    }
}

/// Sensor field of view: a range limit and an optional azimuth sector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FovSpec {
    pub max_range: f64,
    /// `(start, end)` azimuths in `[0, 2π]`, counter-clockwise from +x.
    /// `None` is a full circle. A sector with `start > end` wraps through 0.
    #[serde(default)]
    pub azimuth_span: Option<(f64, f64)>,
}

impl Default for FovSpec {
    fn default() -> Self {
        FovSpec {
            max_range: 60.0,
            azimuth_span: None,
        }
    }
}

impl FovSpec {
    pub fn full_circle(max_range: f64) -> Self {
        FovSpec {
            max_range,
            azimuth_span: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_range > 0.0 && self.max_range.is_finite()) {
            return Err(Error::invalid("fov max_range must be positive"));
        }
        if let Some((a, b)) = self.azimuth_span {
            if !(0.0..=2.0 * PI).contains(&a) || !(0.0..=2.0 * PI).contains(&b) {
                return Err(Error::invalid("fov azimuth span must lie within [0, 2π]"));
            }
        }
        Ok(())
    }

    /// The FoV gate χ: whether a sensor-frame point is observable at all.
    pub fn contains(&self, p: Vec2) -> bool {
        if p[0].hypot(p[1]) > self.max_range {
            return false;
        }
        match self.azimuth_span {
            None => true,
            Some((start, end)) => {
                let a = p[1].atan2(p[0]).rem_euclid(2.0 * PI);
                if start <= end {
                    a >= start && a <= end
                } else {
                    a >= start || a <= end
                }
            }
        }
    }
}

/// Attenuation coefficient λ (1/m) and march step Δs (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaycastParams {
    pub lambda_attenuation: f64,
    pub step: f64,
}

impl RaycastParams {
    pub fn new(lambda_attenuation: f64, step: f64) -> Result<Self> {
        let p = RaycastParams {
            lambda_attenuation,
            step,
        };
        p.validate()?;
        Ok(p)
    }

    /// λ = 2 /m and Δs = half a cell.
    pub fn default_for(grid: &GridSpec) -> Self {
        RaycastParams {
            lambda_attenuation: 2.0,
            step: grid.cell_size() / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_attenuation > 0.0 && self.lambda_attenuation.is_finite()) {
            return Err(Error::invalid("attenuation lambda must be positive"));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("ray step must be positive"));
        }
        Ok(())
    }

    pub fn validate_for(&self, grid: &GridSpec) -> Result<()> {
        self.validate()?;
        if self.step > grid.cell_size() {
            return Err(Error::invalid(format!(
                "ray step {} exceeds cell size {}",
                self.step,
                grid.cell_size()
            )));
        }
        Ok(())
    }
}

/// Per-cell occlusion probability and the thresholded blind-zone mask.
#[derive(Debug, Clone, PartialEq)]
pub struct BlindZoneMask {
    grid: GridSpec,
    occluded: Vec<bool>,
    occ_prob: Vec<f64>,
}

impl BlindZoneMask {
    pub fn from_parts(grid: GridSpec, occluded: Vec<bool>, occ_prob: Vec<f64>) -> Result<Self> {
        if occluded.len() != grid.len() || occ_prob.len() != grid.len() {
            return Err(Error::invalid("blind-zone mask shape does not match grid"));
        }
        if occ_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("occlusion probabilities must lie in [0, 1]"));
        }
        Ok(BlindZoneMask {
            grid,
            occluded,
            occ_prob,
        })
    }

    /// Threshold a probability plane: `occluded = occ_prob > tau_occ`.
    pub fn from_probabilities(grid: GridSpec, occ_prob: Vec<f64>, tau_occ: f64) -> Result<Self> {
        let occluded = occ_prob.iter().map(|&p| p > tau_occ).collect();
        BlindZoneMask::from_parts(grid, occluded, occ_prob)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn occluded(&self) -> &[bool] {
        &self.occluded
    }

    pub fn occ_prob(&self) -> &[f64] {
        &self.occ_prob
    }

    pub fn is_occluded(&self, idx: CellIndex) -> bool {
        self.occluded[idx]
    }

    pub fn occluded_count(&self) -> usize {
        self.occluded.iter().filter(|&&b| b).count()
    }
}

/// Rasterize world-frame points into an ego-frame occupancy field.
///
/// Points outside the height band or the grid are dropped. Per-cell counts
/// are summed over a `(2r+1)²` box kernel and squashed by `1 - e^(-a)`.
pub fn build_occupancy(
    points: &[[f64; 3]],
    ego_pose: &Pose2D,
    grid: &GridSpec,
    kernel_radius: usize,
) -> Result<OccupancyField> {
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("point coordinates must be finite"));
    }
    let (z_min, z_max) = grid.height_band();
    let mut counts = vec![0u32; grid.len()];
    for p in points {
        if p[2] < z_min || p[2] > z_max {
            continue;
        }
        if let Some(idx) = grid.cell_of(world_to_ego([p[0], p[1]], ego_pose)) {
            counts[idx] += 1;
        }
    }

    let (rows, cols) = (grid.rows(), grid.cols());
    let r = kernel_radius;
    let mut values = vec![0.0; grid.len()];
    for row in 0..rows {
        for col in 0..cols {
            let mut a = 0u64;
            for rr in row.saturating_sub(r)..=(row + r).min(rows - 1) {
                for cc in col.saturating_sub(r)..=(col + r).min(cols - 1) {
                    a += counts[rr * cols + cc] as u64;
                }
            }
            values[row * cols + col] = squash(a as f64);
        }
    }
    Ok(OccupancyField {
        grid: *grid,
        values,
    })
}

/// σ(a) = 1 − e^(−a).
pub fn squash(a: f64) -> f64 {
    1.0 - (-a).exp()
}

/// Number of samples `K + 1` on the ray from the sensor to `target`.
pub fn ray_sample_count(grid: &GridSpec, target: CellIndex, params: &RaycastParams) -> usize {
    let c = grid.cell_center(target);
    (c[0].hypot(c[1]) / params.step).round() as usize + 1
}

/// Optical depth `Σ o(r(kΔs))` over a sub-range of sample indices,
/// skipping samples that land in the target cell itself.
fn sampled_occupancy(
    field: &OccupancyField,
    target: CellIndex,
    params: &RaycastParams,
    samples: RangeInclusive<usize>,
) -> f64 {
    let grid = &field.grid;
    let c = grid.cell_center(target);
    let (sin, cos) = c[1].atan2(c[0]).sin_cos();
    let mut sum = 0.0;
    for k in samples {
        let s = k as f64 * params.step;
        if let Some(idx) = grid.cell_of([s * cos, s * sin]) {
            if idx != target {
                sum += field.values[idx];
            }
        }
    }
    sum
}

/// Transmittance over a contiguous subset of the ray's samples.
pub fn transmittance_segment(
    field: &OccupancyField,
    target: CellIndex,
    params: &RaycastParams,
    samples: RangeInclusive<usize>,
) -> f64 {
    let depth = sampled_occupancy(field, target, params, samples);
    (-params.lambda_attenuation * params.step * depth).exp()
}

/// Line-of-sight transmittance from the sensor origin to the centre of `target`.
pub fn transmittance(field: &OccupancyField, target: CellIndex, params: &RaycastParams) -> f64 {
    let k_max = ray_sample_count(&field.grid, target, params) - 1;
    transmittance_segment(field, target, params, 0..=k_max)
}

/// Occlusion probability `1 − χ·T` for every cell, thresholded at `tau_occ`.
pub fn occlusion_map(
    field: &OccupancyField,
    fov: &FovSpec,
    params: &RaycastParams,
    tau_occ: f64,
) -> Result<BlindZoneMask> {
    if !(tau_occ > 0.0 && tau_occ < 1.0) {
        return Err(Error::invalid("tau_occ must lie in (0, 1)"));
    }
    fov.validate()?;
    params.validate_for(&field.grid)?;
    let grid = field.grid;
    let occ_prob = (0..grid.len())
        .map(|idx| {
            if fov.contains(grid.cell_center(idx)) {
                1.0 - transmittance(field, idx, params)
            } else {
                1.0
            }
        })
        .collect();
    BlindZoneMask::from_probabilities(grid, occ_prob, tau_occ)
}

/// Resample a per-cell plane from one local frame into another by
/// nearest-cell lookup. Destination cells whose centres fall outside the
/// source raster receive `fill`.
pub fn warp_plane<T: Copy>(
    src: &[T],
    src_grid: &GridSpec,
    src_pose: &Pose2D,
    dst_grid: &GridSpec,
    dst_pose: &Pose2D,
    fill: T,
) -> Vec<T> {
    (0..dst_grid.len())
        .map(|idx| {
            let world = dst_pose.to_world(dst_grid.cell_center(idx));
            src_grid
                .cell_of(world_to_ego(world, src_pose))
                .map_or(fill, |s| src[s])
        })
        .collect()
}

/// Fuse the last `K_t` masks into the current frame: a cell is blind when
/// the fraction of frames in which it was blind exceeds `tau_t`.
///
/// Cells that warp outside a past raster count as blind for that frame.
/// The returned `occ_prob` is the mean warped occlusion probability.
pub fn stabilize_blind_zone(
    history: &[(BlindZoneMask, Pose2D)],
    current_pose: &Pose2D,
    tau_t: f64,
) -> Result<BlindZoneMask> {
    let Some((first, _)) = history.first() else {
        return Err(Error::invalid("stabilization history is empty"));
    };
    if !(tau_t > 0.0 && tau_t < 1.0) {
        return Err(Error::invalid("tau_t must lie in (0, 1)"));
    }
    let grid = first.grid;
    if history.iter().any(|(m, _)| m.grid != grid) {
        return Err(Error::invalid("history masks use different grids"));
    }

    let n = grid.len();
    let mut blind_votes = vec![0usize; n];
    let mut prob_sum = vec![0.0; n];
    for (mask, pose) in history {
        let occluded = warp_plane(&mask.occluded, &grid, pose, &grid, current_pose, true);
        let probs = warp_plane(&mask.occ_prob, &grid, pose, &grid, current_pose, 1.0);
        for i in 0..n {
            blind_votes[i] += occluded[i] as usize;
            prob_sum[i] += probs[i];
        }
    }
    let k = history.len() as f64;
    let occluded = blind_votes.iter().map(|&v| v as f64 / k > tau_t).collect();
    let occ_prob = prob_sum.iter().map(|&s| (s / k).clamp(0.0, 1.0)).collect();
    BlindZoneMask::from_parts(grid, occluded, occ_prob)
}
