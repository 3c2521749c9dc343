//! Frame-by-frame simulation of the protocol over a scripted scene.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    link_seed, needs_cooperation, observation_features, respond, select_partner, CPRequest, CommPolicy,
    CoverageBeacon, RequesterInfo, ResponderView, SensorConfig, SimConfig,
};
use crate::bev::{build_occupancy, occlusion_map, stabilize_blind_zone, BlindZoneMask};
use crate::error::{Error, Result};
use crate::fusion::{decode_detections, fuse, DetectionBox, SurrogateFeatures};
use crate::grid::{Pose2D, Vec2};
use crate::payload::deserialize_payload;
use crate::risk::{object_risk, ObjectId, ObjectState, RiskContext, RiskMap, RiskWeights};
use crate::scenario::{raycast_hits, Scene};
use crate::selection::{capacity_cells, BudgetSpec, SelectionMask};

/// Frames a lost track is extrapolated before it is dropped.
const LOST_TRACK_FRAMES: usize = 10;

/// An object the agent's sensor hit often enough to report.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub object: ObjectState,
    pub confidence: f64,
}

/// One agent's perception at one frame.
#[derive(Debug, Clone)]
pub struct AgentSensing {
    pub id: ObjectId,
    pub state: ObjectState,
    pub hits: BTreeMap<ObjectId, usize>,
    pub observed: Vec<Observation>,
    /// Previously observed objects no longer seen, extrapolated to now.
    pub lost: Vec<ObjectState>,
    pub blind: BlindZoneMask,
    pub beacon: Vec<u8>,
}

impl AgentSensing {
    pub fn pose(&self) -> Pose2D {
        Pose2D::new(self.state.position, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SensingKey {
    sensor: SensorConfig,
    tau_occ: f64,
    tau_t: f64,
    k_t: usize,
    seed: u64,
    frames: usize,
}

impl SensingKey {
    fn of(scene: &Scene, config: &SimConfig) -> Self {
        SensingKey {
            sensor: config.sensor,
            tau_occ: config.tau_occ,
            tau_t: config.tau_t,
            k_t: config.k_t,
            seed: config.seed,
            frames: config.frames.map_or(scene.frames, |f| f.min(scene.frames)),
        }
    }
}

/// Policy-independent perception of every connected agent in a scene.
#[derive(Debug, Clone)]
pub struct SceneSensing {
    pub scene: String,
    /// Per frame, keyed by agent id.
    pub frames: Vec<BTreeMap<ObjectId, AgentSensing>>,
    key: SensingKey,
}

fn confidence(hits: usize) -> f64 {
    1.0 - (-(hits as f64) / 2.0).exp()
}

/// Ray-cast, rasterize and compute stabilized blind zones for every
/// connected agent and frame.
pub fn sense_scene(scene: &Scene, config: &SimConfig) -> Result<SceneSensing> {
    scene.validate()?;
    config.validate()?;
    let key = SensingKey::of(scene, config);
    let s = &config.sensor;
    let mut agents = scene.connected.clone();
    agents.sort_unstable();
    agents.dedup();

    let mut history: BTreeMap<ObjectId, Vec<(BlindZoneMask, Pose2D)>> = BTreeMap::new();
    let mut last_seen: BTreeMap<ObjectId, BTreeMap<ObjectId, (ObjectState, usize)>> = BTreeMap::new();
    let mut frames = Vec::with_capacity(key.frames);
    for f in 0..key.frames {
        let objects = scene.objects_at(f);
        let mut views = BTreeMap::new();
        for &id in &agents {
            let state = objects.iter().find(|o| o.id == id).expect("validated").clone();
            let pose = Pose2D::new(state.position, 0.0);
            let ret = raycast_hits(scene, id, f, &s.fov, s.rays, s.range_jitter, config.seed)?;
            let field = build_occupancy(&ret.points, &pose, &s.grid, s.kernel_radius)?;
            let raw = occlusion_map(&field, &s.fov, &s.raycast, config.tau_occ)?;
            let past = history.entry(id).or_default();
            past.push((raw, pose));
            if past.len() > config.k_t {
                past.remove(0);
            }
            let stable = stabilize_blind_zone(past, &pose, config.tau_t)?;

            let observed: Vec<Observation> = ret
                .hits
                .iter()
                .filter(|(_, &n)| n >= s.min_hits)
                .filter_map(|(oid, &n)| {
                    let object = objects.iter().find(|o| o.id == *oid)?.clone();
                    Some(Observation {
                        object,
                        confidence: confidence(n),
                    })
                })
                .collect();
            // a detected object's whole footprint counts as covered
            let mut occluded = stable.occluded().to_vec();
            for o in &observed {
                for c in o.object.in_frame(&pose).footprint_cells(&s.grid) {
                    occluded[c] = false;
                }
            }
            let blind = BlindZoneMask::from_parts(s.grid, occluded, stable.occ_prob().to_vec())?;
            let tracks = last_seen.entry(id).or_default();
            for o in &observed {
                tracks.insert(o.object.id, (o.object.clone(), f));
            }
            tracks.retain(|_, (_, seen)| f - *seen <= LOST_TRACK_FRAMES);
            let lost = tracks
                .values()
                .filter(|(_, seen)| *seen < f)
                .map(|(o, seen)| {
                    let dt = (f - seen) as f64 * scene.dt;
                    ObjectState {
                        position: [o.position[0] + o.velocity[0] * dt, o.position[1] + o.velocity[1] * dt],
                        ..o.clone()
                    }
                })
                .collect();
            let beacon = CoverageBeacon {
                sender: id,
                frame: f as u32,
                position: state.position,
                velocity: state.velocity,
                blind: blind.occluded().to_vec(),
            }
            .encode();
            views.insert(
                id,
                AgentSensing {
                    id,
                    state,
                    hits: ret.hits,
                    observed,
                    lost,
                    blind,
                    beacon,
                },
            );
        }
        frames.push(views);
    }
    Ok(SceneSensing {
        scene: scene.name.clone(),
        frames,
        key,
    })
}

/// Prior risk over the agent's blind cells: the larger of a positional
/// term (near the agent or an intersection) and the risk of extrapolated
/// lost tracks. Zero on visible cells and on currently observed objects.
pub fn risk_prior(agent: &AgentSensing, intersections: &[Vec2], weights: &RiskWeights) -> RiskMap {
    let grid = *agent.blind.grid();
    let pose = agent.pose();
    let mut values: Vec<f64> = (0..grid.len())
        .map(|i| {
            if !agent.blind.is_occluded(i) {
                return 0.0;
            }
            let local = grid.cell_center(i);
            let world = pose.to_world(local);
            let near = (-weights.lambda_d * local[0].hypot(local[1])).exp();
            let junction = intersections
                .iter()
                .map(|q| (world[0] - q[0]).hypot(world[1] - q[1]))
                .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |m| m.min(d))))
                .map_or(0.0, |d| (-weights.lambda_n * d).exp());
            (weights.alpha_d * near + weights.alpha_n * junction).clamp(0.0, 1.0)
        })
        .collect();

    let known: Vec<ObjectState> = agent
        .observed
        .iter()
        .map(|o| o.object.clone())
        .chain(agent.lost.iter().cloned())
        .collect();
    let ctx = RiskContext {
        scene_objects: &known,
        intersections,
    };
    for track in &agent.lost {
        let r = object_risk(track, &agent.state, ctx, weights);
        for c in track.in_frame(&pose).footprint_cells(&grid) {
            if agent.blind.is_occluded(c) {
                values[c] = values[c].max(r);
            }
        }
    }
    for o in &agent.observed {
        for c in o.object.in_frame(&pose).footprint_cells(&grid) {
            values[c] = 0.0;
        }
    }
    RiskMap::from_values(grid, values).expect("values are clamped")
}

/// Reference object of a scene, risk-labelled relative to an agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: ObjectId,
    pub center: Vec2,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
    pub risk: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseLog {
    pub from: ObjectId,
    pub cells: usize,
    pub bytes: u64,
}

/// What one agent sent, received and detected in one frame. Boxes are in
/// world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLog {
    pub scene: String,
    pub frame: usize,
    pub agent: ObjectId,
    pub ego: bool,
    pub policy: String,
    pub budget_bytes: u64,
    pub bytes_beacon: u64,
    pub bytes_payload: u64,
    pub bytes_request: u64,
    pub triggered: bool,
    pub requests: Vec<ObjectId>,
    pub responses: Vec<ResponseLog>,
    pub detections: Vec<DetectionBox>,
    pub ground_truth: Vec<GroundTruth>,
}

fn ground_truth(scene: &Scene, frame: usize, agent: &AgentSensing, weights: &RiskWeights) -> Vec<GroundTruth> {
    let objects = scene.objects_at(frame);
    let ctx = RiskContext {
        scene_objects: &objects,
        intersections: &scene.intersections,
    };
    let grid = agent.blind.grid();
    objects
        .iter()
        .filter(|o| o.id != agent.id)
        .filter(|o| {
            let c = o.position;
            let p = agent.state.position;
            grid.cell_of([c[0] - p[0], c[1] - p[1]]).is_some()
        })
        .map(|o| GroundTruth {
            id: o.id,
            center: o.position,
            length: o.length,
            width: o.width,
            yaw: o.yaw,
            risk: object_risk(o, &agent.state, ctx, weights),
        })
        .collect()
}

/// Uniform draw of `k` cells across neighbours holding `counts` candidate
/// cells each; returns how many each neighbour contributes.
fn pooled_quotas(counts: &[usize], k: usize, seed: u64) -> Vec<usize> {
    use rand::seq::index::sample;
    use rand::SeedableRng;
    let total: usize = counts.iter().sum();
    let mut quotas = vec![0; counts.len()];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for pick in sample(&mut rng, total, k.min(total)) {
        let mut rest = pick;
        for (q, &n) in quotas.iter_mut().zip(counts) {
            if rest < n {
                *q += 1;
                break;
            }
            rest -= n;
        }
    }
    quotas
}

struct Inbound {
    from: ObjectId,
    bytes: Vec<u8>,
    cells: usize,
}

/// Run the configured policy over a scene whose sensing was computed with
/// the same config.
pub fn run_scene(scene: &Scene, sensing: &SceneSensing, config: &SimConfig) -> Result<Vec<FrameLog>> {
    config.validate()?;
    if sensing.key != SensingKey::of(scene, config) || sensing.scene != scene.name {
        return Err(Error::invalid(format!(
            "sensing for '{}' was computed with a different configuration",
            sensing.scene
        )));
    }
    let grid = config.sensor.grid;
    let budget = config.budget;
    let policy = config.policy;
    let policy_seed = match policy {
        CommPolicy::RandomCell { seed } => seed,
        _ => 0,
    };
    let mut logs = Vec::new();
    for (f, views) in sensing.frames.iter().enumerate() {
        let beacons: BTreeMap<ObjectId, CoverageBeacon> = views
            .iter()
            .map(|(&id, v)| CoverageBeacon::decode(&v.beacon, &grid).map(|b| (id, b)))
            .collect::<Result<_>>()?;
        let responder = |id: ObjectId| {
            let v = &views[&id];
            ResponderView {
                id,
                body: &v.state,
                observed: &v.observed,
                occ_prob: v.blind.occ_prob(),
                grid: &grid,
                intersections: &scene.intersections,
                weights: &config.risk,
                channels: budget.channels as usize,
            }
        };

        for (&id, me) in views {
            let position = me.state.position;
            let neighbours: Vec<ObjectId> = views
                .iter()
                .filter(|(&j, v)| {
                    j != id && {
                        let p = v.state.position;
                        (p[0] - position[0]).hypot(p[1] - position[1]) <= config.comm_radius
                    }
                })
                .map(|(&j, _)| j)
                .collect();
            let push_info = RequesterInfo {
                id,
                frame: f as u32,
                position,
                velocity: beacons[&id].velocity,
                blind: None,
            };
            let seed_for = |j: ObjectId| link_seed(config.seed ^ policy_seed, f, id, j);
            let mut inbound: Vec<Inbound> = Vec::new();
            let mut requests = Vec::new();
            let mut bytes_request = 0u64;
            let mut triggered = false;

            match policy {
                CommPolicy::LowerBound => {}
                CommPolicy::Sracp { .. } => {
                    let prior = risk_prior(me, &scene.intersections, &config.risk);
                    let (need, risky) = needs_cooperation(&me.blind, &prior, config.tau_r);
                    triggered = need;
                    if need {
                        let heard: Vec<CoverageBeacon> = neighbours.iter().map(|j| beacons[j].clone()).collect();
                        if let Some(j) = select_partner(&risky, &grid, position, &heard) {
                            let req = CPRequest::new(id, j, f as u32, position, &grid, me.blind.occluded(), prior.values())?;
                            let wire = req.encode();
                            bytes_request += wire.len() as u64;
                            let received = CPRequest::decode(&wire, &grid)?;
                            let resp = super::handle_request(
                                &responder(j),
                                &received,
                                beacons[&id].velocity,
                                &budget,
                                &policy,
                                seed_for(j),
                            )?;
                            requests.push(j);
                            inbound.push(Inbound {
                                from: j,
                                cells: resp.cells,
                                bytes: resp.payload,
                            });
                        }
                    }
                }
                CommPolicy::UpperBound => {
                    for &j in &neighbours {
                        let resp = respond(&responder(j), &push_info, &policy, &budget, seed_for(j))?;
                        inbound.push(Inbound {
                            from: j,
                            cells: resp.cells,
                            bytes: resp.payload,
                        });
                    }
                }
                CommPolicy::FixedNeighborEqual => {
                    if !neighbours.is_empty() {
                        let link = budget.with_bytes(budget.b_bytes / neighbours.len() as u64);
                        for &j in &neighbours {
                            let resp = respond(&responder(j), &push_info, &policy, &link, seed_for(j))?;
                            inbound.push(Inbound {
                                from: j,
                                cells: resp.cells,
                                bytes: resp.payload,
                            });
                        }
                    }
                }
                CommPolicy::RandomCell { .. } => {
                    let m = neighbours.len() as u64;
                    if m > 0 {
                        let headers = m * budget.h_hdr;
                        let k = budget.b_bytes.saturating_sub(headers) / budget.b_cell();
                        let counts: Vec<usize> = neighbours
                            .iter()
                            .map(|&j| responder(j).features_for(&push_info).map(|f| super::nonzero_cells(&f).len()))
                            .collect::<Result<_>>()?;
                        let quotas = pooled_quotas(&counts, k as usize, seed_for(0));
                        for (&j, q) in neighbours.iter().zip(quotas) {
                            let link = budget.with_bytes(budget.h_hdr + q as u64 * budget.b_cell());
                            let resp = respond(&responder(j), &push_info, &policy, &link, seed_for(j))?;
                            inbound.push(Inbound {
                                from: j,
                                cells: resp.cells,
                                bytes: resp.payload,
                            });
                        }
                    }
                }
            }

            let own: SurrogateFeatures = observation_features(
                &grid,
                position,
                &me.observed,
                None,
                &me.state,
                &scene.intersections,
                &config.risk,
                me.blind.occ_prob().to_vec(),
                budget.channels as usize,
            )?;
            let unbudgeted = BudgetSpec {
                b_bytes: u64::MAX,
                ..budget
            };
            let mut partners = Vec::with_capacity(inbound.len());
            for msg in &inbound {
                let check = if policy == CommPolicy::UpperBound { &unbudgeted } else { &budget };
                let payload = deserialize_payload(&msg.bytes, &grid, check)?;
                let mask = SelectionMask::from_cells(grid, payload.indices().iter().map(|&i| i as usize))?;
                partners.push((payload, mask));
            }
            let fused = fuse(&own, &partners)?;
            let detections = decode_detections(&fused, config.decode.occupancy_threshold, config.decode.min_cells)
                .into_iter()
                .map(|d| d.translated(position))
                .collect();

            logs.push(FrameLog {
                scene: scene.name.clone(),
                frame: f,
                agent: id,
                ego: id == scene.ego,
                policy: policy.to_string(),
                budget_bytes: budget.b_bytes,
                bytes_beacon: me.beacon.len() as u64,
                bytes_payload: inbound.iter().map(|m| m.bytes.len() as u64).sum(),
                bytes_request,
                triggered,
                requests,
                responses: inbound
                    .iter()
                    .map(|m| ResponseLog {
                        from: m.from,
                        cells: m.cells,
                        bytes: m.bytes.len() as u64,
                    })
                    .collect(),
                detections,
                ground_truth: ground_truth(scene, f, me, &config.risk),
            });
        }
    }
    debug_assert!(policy == CommPolicy::UpperBound
        || logs
            .iter()
            .flat_map(|l| &l.responses)
            .all(|r| r.cells <= capacity_cells(&budget)));
    Ok(logs)
}
