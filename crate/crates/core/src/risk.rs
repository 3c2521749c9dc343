//! Object risk labels, rasterized BEV risk maps and the pairwise risk matrix.
//!
//! Per-object risk is a clipped weighted sum of three cues: distance to the
//! ego, relative speed normalized over the scene, and proximity to the
//! nearest known intersection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{dist, normalize_angle, world_to_ego, CellIndex, GridSpec, Pose2D, Vec2};

pub type ObjectId = u32;

/// Kinematic state and footprint of one road user. `position` is the box centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectState {
    pub id: ObjectId,
    pub position: Vec2,
    pub velocity: Vec2,
    pub length: f64,
    pub width: f64,
    #[serde(default = "default_height")]
    pub height: f64,
    pub yaw: f64,
    #[serde(default)]
    pub is_connected: bool,
}

fn default_height() -> f64 {
    1.56
}

impl ObjectState {
    pub fn validate(&self) -> Result<()> {
        let finite = self
            .position
            .iter()
            .chain(self.velocity.iter())
            .chain([self.length, self.width, self.height, self.yaw].iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid(format!("object {} has non-finite state", self.id)));
        }
        if self.length <= 0.0 || self.width <= 0.0 || self.height <= 0.0 {
            return Err(Error::invalid(format!("object {} has non-positive extent", self.id)));
        }
        Ok(())
    }

    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    /// Whether a point lies inside the (closed) footprint rectangle.
    pub fn contains(&self, p: Vec2) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.position[0];
        let dy = p[1] - self.position[1];
        let lx = c * dx + s * dy;
        let ly = -s * dx + c * dy;
        lx.abs() <= self.length / 2.0 && ly.abs() <= self.width / 2.0
    }

    /// Footprint corners, counter-clockwise.
    pub fn corners(&self) -> [Vec2; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| {
            [
                self.position[0] + c * a - s * b,
                self.position[1] + s * a + c * b,
            ]
        })
    }

    /// Grid cells whose centres fall inside the footprint, ascending.
    pub fn footprint_cells(&self, grid: &GridSpec) -> Vec<CellIndex> {
        let corners = self.corners();
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for c in &corners {
            for a in 0..2 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let cs = grid.cell_size();
        let (x0, _) = grid.x_range();
        let (y0, _) = grid.y_range();
        let col_range = |v: f64, origin: f64, n: usize| {
            let f = ((v - origin) / cs - 0.5).floor();
            f.clamp(0.0, n as f64) as usize
        };
        let c_lo = col_range(lo[0], x0, grid.cols());
        let c_hi = (col_range(hi[0], x0, grid.cols()) + 1).min(grid.cols());
        let r_lo = col_range(lo[1], y0, grid.rows());
        let r_hi = (col_range(hi[1], y0, grid.rows()) + 1).min(grid.rows());
        let mut cells = Vec::new();
        for row in r_lo..r_hi {
            for col in c_lo..c_hi {
                let idx = grid.index(row, col);
                if self.contains(grid.cell_center(idx)) {
                    cells.push(idx);
                }
            }
        }
        cells
    }

    /// The same object expressed in a local frame.
    pub fn in_frame(&self, pose: &Pose2D) -> ObjectState {
        let (s, c) = pose.rotation().sin_cos();
        let v = self.velocity;
        ObjectState {
            position: world_to_ego(self.position, pose),
            velocity: [c * v[0] + s * v[1], -s * v[0] + c * v[1]],
            yaw: normalize_angle(self.yaw - pose.rotation()),
            ..self.clone()
        }
    }
}

/// Mixing weights and decay rates of the risk model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskWeights {
    pub alpha_d: f64,
    pub alpha_s: f64,
    pub alpha_n: f64,
    pub lambda_d: f64,
    pub lambda_n: f64,
    pub epsilon: f64,
}

impl Default for RiskWeights {
    fn default() -> Self {
        RiskWeights {
            alpha_d: 0.5,
            alpha_s: 0.3,
            alpha_n: 0.2,
            lambda_d: 0.05,
            lambda_n: 0.02,
            epsilon: 0.01,
        }
    }
}

impl RiskWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_d,
            self.alpha_s,
            self.alpha_n,
            self.lambda_d,
            self.lambda_n,
            self.epsilon,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("risk weights must be finite and non-negative"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::invalid("risk epsilon must be positive"));
        }
        Ok(())
    }
}

/// `exp(-λ_d·‖p_obj − p_ego‖)`.
pub fn distance_risk(p_obj: Vec2, p_ego: Vec2, lambda_d: f64) -> f64 {
    (-lambda_d * dist(p_obj, p_ego)).exp()
}

fn rel_speed(v: Vec2, ego: Vec2) -> f64 {
    (v[0] - ego[0]).hypot(v[1] - ego[1])
}

/// Relative speed normalized by the largest relative speed in the scene.
pub fn speed_risk(
    obj: &ObjectState,
    ego: &ObjectState,
    scene_objects: &[ObjectState],
    epsilon: f64,
) -> f64 {
    let own = rel_speed(obj.velocity, ego.velocity);
    let max = scene_objects
        .iter()
        .map(|o| rel_speed(o.velocity, ego.velocity))
        .fold(own, f64::max);
    own / (max + epsilon)
}

/// `exp(-λ_n·min_q ‖p − q‖)`; zero when there are no intersections.
pub fn intersection_risk(p_obj: Vec2, intersections: &[Vec2], lambda_n: f64) -> f64 {
    intersections
        .iter()
        .map(|&q| dist(p_obj, q))
        .reduce(f64::min)
        .map_or(0.0, |d| (-lambda_n * d).exp())
}

/// Weighted combination clipped to `[0, 1]`.
pub fn total_risk(components: (f64, f64, f64), weights: &RiskWeights) -> f64 {
    let (d, s, n) = components;
    (weights.alpha_d * d + weights.alpha_s * s + weights.alpha_n * n).clamp(0.0, 1.0)
}

/// Scene-level inputs shared by every object's risk evaluation.
#[derive(Debug, Clone, Copy)]
pub struct RiskContext<'a> {
    pub scene_objects: &'a [ObjectState],
    pub intersections: &'a [Vec2],
}

/// Clipped risk of `obj` with respect to `ego`.
pub fn object_risk(
    obj: &ObjectState,
    ego: &ObjectState,
    ctx: RiskContext<'_>,
    weights: &RiskWeights,
) -> f64 {
    total_risk(
        (
            distance_risk(obj.position, ego.position, weights.lambda_d),
            speed_risk(obj, ego, ctx.scene_objects, weights.epsilon),
            intersection_risk(obj.position, ctx.intersections, weights.lambda_n),
        ),
        weights,
    )
}

/// Per-cell risk field in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskMap {
    grid: GridSpec,
    values: Vec<f64>,
}

impl RiskMap {
    pub fn zeros(grid: GridSpec) -> Self {
        RiskMap {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid("risk map shape does not match grid"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("risk values must lie in [0, 1]"));
        }
        Ok(RiskMap { grid, values })
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

    /// Raise every listed cell to at least `value`.
    pub(crate) fn paint_max(&mut self, cells: &[CellIndex], value: f64) {
        let v = value.clamp(0.0, 1.0);
        for &c in cells {
            if self.values[c] < v {
                self.values[c] = v;
            }
        }
    }
}

/// Rasterize object risk onto the footprints of `objects` (all given in the
/// grid's frame); overlapping footprints keep the maximum.
pub fn rasterize_risk_map(
    objects: &[ObjectState],
    ego: &ObjectState,
    intersections: &[Vec2],
    weights: &RiskWeights,
    grid: &GridSpec,
) -> RiskMap {
    let ctx = RiskContext {
        scene_objects: objects,
        intersections,
    };
    let mut map = RiskMap::zeros(*grid);
    for obj in objects {
        let r = object_risk(obj, ego, ctx, weights);
        map.paint_max(&obj.footprint_cells(grid), r);
    }
    map
}

/// Risk of every neighbour with respect to one ego, ordered by neighbour id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskMatrix {
    pub ego: ObjectId,
    pub entries: Vec<(ObjectId, f64)>,
}

pub fn pairwise_risk_matrix(
    ego: &ObjectState,
    neighbors: &[ObjectState],
    ctx: RiskContext<'_>,
    weights: &RiskWeights,
) -> RiskMatrix {
    let mut entries: Vec<(ObjectId, f64)> = neighbors
        .iter()
        .map(|n| (n.id, object_risk(n, ego, ctx, weights)))
        .collect();
    entries.sort_by_key(|e| e.0);
    RiskMatrix { ego: ego.id, entries }
}

/// Neighbours whose risk strictly exceeds `tau_r`.
pub fn dangerous_set(matrix: &RiskMatrix, tau_r: f64) -> BTreeSet<ObjectId> {
    matrix
        .entries
        .iter()
        .filter(|(_, rho)| *rho > tau_r)
        .map(|(id, _)| *id)
        .collect()
}
