//! Synthetic driving scenes and a 2D ray caster standing in for LiDAR.
//!
//! All scenes share one road layout: an east–west road along `y = 0` and a
//! north–south road along `x = 0`, 3.5 m lanes, right-hand traffic, with the
//! junction at the origin. Objects follow per-frame waypoint scripts.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::FovSpec;
use crate::error::{Error, Result};
use crate::grid::{normalize_angle, Vec2};
use crate::risk::{ObjectId, ObjectState};

const LANE: f64 = 3.5;
const CAR: (f64, f64) = (4.5, 1.8);
const TRUCK: (f64, f64) = (10.0, 2.5);
const VAN: (f64, f64) = (6.0, 2.2);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub position: Vec2,
    pub yaw: f64,
    pub velocity: Vec2,
}

/// An object with a fixed footprint and a kinematic script. A script of
/// length one holds the object still for the whole scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedObject {
    pub id: ObjectId,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub script: Vec<Waypoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    UnprotectedLeftTurn,
    Intersection,
    Merge,
    HeadOn,
    Overtake,
    StraightBaseline,
    MultiAgent,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 7] = [
        ScenarioKind::UnprotectedLeftTurn,
        ScenarioKind::Intersection,
        ScenarioKind::Merge,
        ScenarioKind::HeadOn,
        ScenarioKind::Overtake,
        ScenarioKind::StraightBaseline,
        ScenarioKind::MultiAgent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::UnprotectedLeftTurn => "unprotected-left-turn",
            ScenarioKind::Intersection => "intersection",
            ScenarioKind::Merge => "merge",
            ScenarioKind::HeadOn => "head-on",
            ScenarioKind::Overtake => "overtake",
            ScenarioKind::StraightBaseline => "straight-baseline",
            ScenarioKind::MultiAgent => "multi-agent",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == key || k.name().replace('-', "") == key)
            .ok_or_else(|| {
                let names: Vec<_> = ScenarioKind::ALL.iter().map(|k| k.name()).collect();
                Error::invalid(format!("unknown scenario kind '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

/// A scripted scene. `ego` is the connected agent whose perception is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub name: String,
    #[serde(default)]
    pub kind: Option<ScenarioKind>,
    #[serde(default)]
    pub seed: u64,
    pub frames: usize,
    pub dt: f64,
    pub ego: ObjectId,
    pub connected: Vec<ObjectId>,
    #[serde(default)]
    pub intersections: Vec<Vec2>,
    /// Planned ego path; carried as metadata only.
    #[serde(default)]
    pub ego_path: Vec<Vec2>,
    pub objects: Vec<ScriptedObject>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("scene '{}': {msg}", self.name)));
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt must be positive".into());
        }
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return bad(format!("duplicate object id {}", o.id));
            }
            if !(o.length > 0.0 && o.width > 0.0 && o.height > 0.0) {
                return bad(format!("object {} has non-positive extent", o.id));
            }
            if o.script.len() != 1 && o.script.len() != self.frames {
                return bad(format!(
                    "object {} script has {} waypoints, expected 1 or {}",
                    o.id,
                    o.script.len(),
                    self.frames
                ));
            }
            let finite = o
                .script
                .iter()
                .flat_map(|w| [w.position[0], w.position[1], w.yaw, w.velocity[0], w.velocity[1]])
                .all(f64::is_finite);
            if !finite {
                return bad(format!("object {} has a non-finite waypoint", o.id));
            }
        }
        if self.connected.is_empty() {
            return bad("at least one connected agent is required".into());
        }
        if let Some(c) = self.connected.iter().find(|c| !ids.contains(c)) {
            return bad(format!("connected id {c} is not an object"));
        }
        if !self.connected.contains(&self.ego) {
            return bad(format!("ego {} is not a connected agent", self.ego));
        }
        if self.intersections.iter().flatten().chain(self.ego_path.iter().flatten()).any(|v| !v.is_finite()) {
            return bad("non-finite intersection or path point".into());
        }
        Ok(())
    }

    pub fn is_connected(&self, id: ObjectId) -> bool {
        self.connected.contains(&id)
    }

    /// Object states at `frame` (clamped to the last scripted frame).
    pub fn objects_at(&self, frame: usize) -> Vec<ObjectState> {
        self.objects
            .iter()
            .map(|o| {
                let w = o.script[frame.min(o.script.len() - 1)];
                ObjectState {
                    id: o.id,
                    position: w.position,
                    velocity: w.velocity,
                    length: o.length,
                    width: o.width,
                    height: o.height,
                    yaw: w.yaw,
                    is_connected: self.is_connected(o.id),
                }
            })
            .collect()
    }

    pub fn object_at(&self, id: ObjectId, frame: usize) -> Option<ObjectState> {
        self.objects_at(frame).into_iter().find(|o| o.id == id)
    }

    pub fn from_json(text: &str) -> Result<Scene> {
        let scene: Scene = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scene serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Scene> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Scene::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Generation knobs shared by all scenario kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioParams {
    pub frames: usize,
    pub dt: f64,
    /// Maximum seeded offset applied to start positions along each lane, meters.
    pub position_jitter: f64,
    /// Maximum relative seeded change of scripted speeds.
    pub speed_jitter: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams {
            frames: 8,
            dt: 0.1,
            position_jitter: 1.0,
            speed_jitter: 0.1,
        }
    }
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::invalid("scenario frames must be at least 1"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid("scenario dt must be positive"));
        }
        if !(0.0..=2.0).contains(&self.position_jitter) {
            return Err(Error::invalid("position_jitter must lie in [0, 2] m"));
        }
        if !(0.0..0.5).contains(&self.speed_jitter) {
            return Err(Error::invalid("speed_jitter must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

struct Builder {
    params: ScenarioParams,
    rng: ChaCha8Rng,
    objects: Vec<ScriptedObject>,
}

impl Builder {
    fn new(kind: ScenarioKind, seed: u64, params: ScenarioParams) -> Self {
        let stream = ScenarioKind::ALL.iter().position(|k| *k == kind).unwrap_or(0) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Builder {
            params,
            rng,
            objects: Vec::new(),
        }
    }

    fn jitter(&mut self, scale: f64) -> f64 {
        if scale == 0.0 {
            0.0
        } else {
            self.rng.gen_range(-scale..=scale)
        }
    }

    /// Constant-velocity object. `start` is jittered along the heading by
    /// up to `slack` times the configured position jitter.
    fn moving(&mut self, id: ObjectId, size: (f64, f64), start: Vec2, heading: f64, speed: f64, slack: f64) {
        let (s, c) = heading.sin_cos();
        let along = self.jitter(self.params.position_jitter * slack);
        let speed = speed * (1.0 + self.jitter(self.params.speed_jitter));
        let p0 = [start[0] + c * along, start[1] + s * along];
        let v = [snap(c * speed), snap(s * speed)];
        let script = (0..self.params.frames)
            .map(|f| {
                let t = f as f64 * self.params.dt;
                Waypoint {
                    position: [snap(p0[0] + v[0] * t), snap(p0[1] + v[1] * t)],
                    yaw: normalize_angle(heading),
                    velocity: v,
                }
            })
            .collect();
        self.push(id, size, script);
    }

    fn parked(&mut self, id: ObjectId, size: (f64, f64), at: Vec2, heading: f64) {
        let script = vec![Waypoint {
            position: at,
            yaw: normalize_angle(heading),
            velocity: [0.0, 0.0],
        }];
        self.push(id, size, script);
    }

    fn push(&mut self, id: ObjectId, size: (f64, f64), script: Vec<Waypoint>) {
        let height = if size.0 >= TRUCK.0 { 3.5 } else { 1.6 };
        self.objects.push(ScriptedObject {
            id,
            length: size.0,
            width: size.1,
            height,
            script,
        });
    }
}

/// Round to micrometres so generated files stay readable.
fn snap(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

const EAST: f64 = 0.0;
const NORTH: f64 = FRAC_PI_2;
const WEST: f64 = PI;
const SOUTH: f64 = -FRAC_PI_2;

/// Deterministic scene for `(kind, seed)`.
///
/// Every kind except the straight baseline hides at least one moving road
/// user from the ego behind an unconnected occluder while a connected
/// partner has line of sight to it.
pub fn generate_scene(kind: ScenarioKind, seed: u64, params: &ScenarioParams) -> Result<Scene> {
    params.validate()?;
    let mut b = Builder::new(kind, seed, *params);
    let h = LANE / 2.0;
    let (ego, connected, intersections, ego_path): (ObjectId, Vec<ObjectId>, Vec<Vec2>, Vec<Vec2>) = match kind {
        ScenarioKind::UnprotectedLeftTurn => {
            // Ego waits to turn left; an oncoming truck waiting to turn hides
            // the second oncoming lane.
            b.moving(1, CAR, [-8.0, -h], EAST, 2.0, 0.5);
            b.parked(2, TRUCK, [6.0, h], WEST);
            b.moving(3, CAR, [22.0, 3.0 * h], WEST, 10.0, 1.0);
            b.moving(4, CAR, [-1.0 * h, 14.0], SOUTH, 3.0, 0.5);
            b.moving(5, CAR, [-13.0, h], WEST, 9.0, 0.5);
            b.parked(6, CAR, [-20.0, -h], EAST);
            (1, vec![1, 4], vec![[0.0, 0.0]], vec![[-8.0, -h], [0.0, 0.0], [h, 20.0]])
        }
        ScenarioKind::Intersection => {
            // Ego heads north; a van stopped in the right-turn pocket hides
            // eastern cross traffic.
            b.moving(1, CAR, [h, -14.0], NORTH, 6.0, 0.5);
            b.parked(2, VAN, [3.0 * h, -7.5], NORTH);
            b.moving(3, CAR, [20.0, h], WEST, 9.0, 1.0);
            b.moving(4, CAR, [-h, 12.0], SOUTH, 4.0, 0.5);
            b.moving(5, CAR, [-16.0, -h], EAST, 5.0, 0.5);
            (1, vec![1, 4], vec![[0.0, 0.0]], vec![[h, -14.0], [h, 20.0]])
        }
        ScenarioKind::Merge => {
            // Ego on the main road; a truck in the right lane hides a car on
            // the converging ramp.
            let ramp = -0.25f64;
            b.moving(1, CAR, [-12.0, 3.0 * h], EAST, 12.0, 0.5);
            b.moving(2, TRUCK, [-4.0, h], EAST, 11.0, 0.3);
            b.moving(3, CAR, [6.0, -7.0], ramp.abs(), 12.0, 1.0);
            b.moving(4, CAR, [12.0, 3.0 * h], EAST, 12.0, 0.5);
            b.moving(5, CAR, [-24.0, h], EAST, 12.0, 0.5);
            (1, vec![1, 4], vec![[14.0, h]], vec![[-12.0, 3.0 * h], [30.0, 3.0 * h]])
        }
        ScenarioKind::HeadOn => {
            // Ego follows a slow truck; an oncoming car is hidden by it.
            b.moving(1, CAR, [-14.0, -h], EAST, 8.0, 0.5);
            b.moving(2, TRUCK, [-1.0, -h], EAST, 7.0, 0.3);
            b.moving(3, CAR, [24.0, h], WEST, 12.0, 1.0);
            b.moving(4, CAR, [16.0, -h], EAST, 8.0, 0.5);
            b.moving(5, CAR, [-26.0, -h], EAST, 8.0, 0.5);
            (1, vec![1, 4], vec![], vec![[-14.0, -h], [30.0, -h]])
        }
        ScenarioKind::Overtake => {
            // Ego pulls out to pass a truck; a braking car ahead of the truck
            // is out of the ego's sight.
            b.moving(1, CAR, [-14.0, -0.2], EAST, 12.0, 0.5);
            b.moving(2, TRUCK, [-1.0, -h], EAST, 9.0, 0.3);
            b.moving(3, CAR, [13.0, -h], EAST, 6.0, 1.0);
            b.moving(4, CAR, [26.0, h], WEST, 6.0, 0.5);
            b.moving(5, CAR, [-26.0, -h], EAST, 9.0, 0.5);
            (1, vec![1, 4], vec![], vec![[-14.0, -0.2], [30.0, h]])
        }
        ScenarioKind::StraightBaseline => {
            // Open road, nothing occluded and nothing close.
            b.moving(1, CAR, [0.0, -h], EAST, 10.0, 0.5);
            b.moving(2, CAR, [-22.0, h], WEST, 10.0, 0.5);
            b.moving(3, CAR, [24.0, -h], EAST, 10.0, 0.5);
            b.moving(4, CAR, [-24.0, -h], EAST, 10.0, 0.5);
            (1, vec![1, 3], vec![], vec![[0.0, -h], [40.0, -h]])
        }
        ScenarioKind::MultiAgent => {
            // Busy junction with three connected agents and two hidden cars.
            b.moving(1, CAR, [h, -14.0], NORTH, 5.0, 0.5);
            b.parked(2, VAN, [3.0 * h, -7.5], NORTH);
            b.parked(3, TRUCK, [-7.5, -3.0 * h], EAST);
            b.moving(4, CAR, [20.0, h], WEST, 9.0, 1.0);
            b.moving(5, CAR, [-22.0, -h], EAST, 9.0, 1.0);
            b.moving(6, CAR, [-h, 13.0], SOUTH, 4.0, 0.5);
            b.moving(7, CAR, [20.0, -h], EAST, 5.0, 0.5);
            b.moving(8, CAR, [h, 22.0], NORTH, 6.0, 0.5);
            (1, vec![1, 6, 7, 8], vec![[0.0, 0.0]], vec![[h, -14.0], [h, 20.0]])
        }
    };
    let scene = Scene {
        name: format!("{kind}-{seed}"),
        kind: Some(kind),
        seed,
        frames: params.frames,
        dt: params.dt,
        ego,
        connected,
        intersections,
        ego_path,
        objects: b.objects,
    };
    scene.validate()?;
    Ok(scene)
}

/// Ray-cast returns plus the number of rays that hit each object.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RaycastReturn {
    pub points: Vec<[f64; 3]>,
    pub hits: BTreeMap<ObjectId, usize>,
}

/// Entry distance of a ray into an oriented box, if it enters ahead of the
/// origin. Rays starting inside the box never hit it.
pub fn ray_box_entry(origin: Vec2, dir: Vec2, obj: &ObjectState) -> Option<f64> {
    let (s, c) = obj.yaw.sin_cos();
    let rel = [origin[0] - obj.position[0], origin[1] - obj.position[1]];
    let o = [c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1]];
    let d = [c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1]];
    let half = [obj.length / 2.0, obj.width / 2.0];
    let (mut t_in, mut t_out) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..2 {
        if d[a].abs() < 1e-12 {
            if o[a].abs() > half[a] {
                return None;
            }
            continue;
        }
        let t1 = (-half[a] - o[a]) / d[a];
        let t2 = (half[a] - o[a]) / d[a];
        t_in = t_in.max(t1.min(t2));
        t_out = t_out.min(t1.max(t2));
    }
    (t_in <= t_out && t_in > 0.0).then_some(t_in)
}

fn ray_angles(fov: &FovSpec, rays: usize) -> Vec<f64> {
    match fov.azimuth_span {
        None => (0..rays).map(|i| 2.0 * PI * i as f64 / rays as f64).collect(),
        Some((start, end)) => {
            let mut span = end - start;
            if span <= 0.0 {
                span += 2.0 * PI;
            }
            let n = rays.max(1);
            (0..n)
                .map(|i| start + span * (i as f64 + 0.5) / n as f64)
                .collect()
        }
    }
}

/// Cast `rays` equiangular rays from `agent` and record first hits.
///
/// Each return is jittered in range by up to `jitter` meters and given a
/// height drawn inside the hit object's vertical extent.
pub fn raycast_hits(
    scene: &Scene,
    agent: ObjectId,
    frame: usize,
    fov: &FovSpec,
    rays: usize,
    jitter: f64,
    seed: u64,
) -> Result<RaycastReturn> {
    fov.validate()?;
    if !scene.is_connected(agent) {
        return Err(Error::invalid(format!("agent {agent} is not connected")));
    }
    let objects = scene.objects_at(frame);
    let me = objects
        .iter()
        .find(|o| o.id == agent)
        .ok_or_else(|| Error::invalid(format!("agent {agent} not in scene")))?;
    let origin = me.position;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(agent) << 32) ^ frame as u64);
    let mut out = RaycastReturn::default();
    for theta in ray_angles(fov, rays) {
        let dir = [theta.cos(), theta.sin()];
        let nearest = objects
            .iter()
            .filter(|o| o.id != agent)
            .filter_map(|o| ray_box_entry(origin, dir, o).map(|t| (t, o)))
            .filter(|(t, _)| *t <= fov.max_range)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.id.cmp(&b.1.id)));
        let Some((t, obj)) = nearest else { continue };
        let r = t + if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
        let z = rng.gen_range(0.05..obj.height);
        out.points.push([origin[0] + r * dir[0], origin[1] + r * dir[1], z]);
        *out.hits.entry(obj.id).or_default() += 1;
    }
    Ok(out)
}

/// Point cloud of [`raycast_hits`] with the default ±0.05 m range jitter.
pub fn raycast_points(
    scene: &Scene,
    agent: ObjectId,
    frame: usize,
    fov: &FovSpec,
    rays: usize,
    seed: u64,
) -> Result<Vec<[f64; 3]>> {
    Ok(raycast_hits(scene, agent, frame, fov, rays, 0.05, seed)?.points)
}
