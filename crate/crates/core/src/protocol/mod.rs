//! The cooperative perception protocol: coverage beacons, the risk-gated
//! trigger, partner choice, budgeted responses and the baseline
//! communication policies.

mod messages;
mod sim;

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{BlindZoneMask, FovSpec, RaycastParams};
use crate::error::{Error, Result};
use crate::fusion::SurrogateFeatures;
use crate::grid::{CellIndex, GridSpec, Pose2D, Vec2};
use crate::payload::{encode_payload, serialize_payload, PayloadHeader};
use crate::risk::{object_risk, ObjectId, ObjectState, RiskContext, RiskMap, RiskWeights};
use crate::selection::{capacity_cells, compute_gain, select_cells, BudgetSpec, GateMode, SelectionMask};

pub use messages::{beacon_bytes, CPRequest, CoverageBeacon, BEACON_HEADER_LEN, REQUEST_HEADER_LEN};
pub use sim::{
    risk_prior, run_scene, sense_scene, AgentSensing, FrameLog, GroundTruth, Observation, ResponseLog,
    SceneSensing,
};

/// How agents share features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CommPolicy {
    /// Risk-triggered requests answered with gain-ranked cells.
    Sracp { gate: GateMode, alpha: f64 },
    /// Every neighbour sends every non-empty cell, unbudgeted.
    UpperBound,
    /// No feature exchange.
    LowerBound,
    /// The budget split evenly across neighbours, cells drawn uniformly.
    FixedNeighborEqual,
    /// Exactly the affordable number of cells drawn uniformly across neighbours.
    RandomCell { seed: u64 },
}

impl Default for CommPolicy {
    fn default() -> Self {
        CommPolicy::Sracp {
            gate: GateMode::Union,
            alpha: 0.5,
        }
    }
}

impl fmt::Display for CommPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CommPolicy::Sracp { gate, alpha } => write!(f, "sracp-{gate}-a{alpha}"),
            CommPolicy::UpperBound => f.write_str("upper-bound"),
            CommPolicy::LowerBound => f.write_str("lower-bound"),
            CommPolicy::FixedNeighborEqual => f.write_str("fixed-neighbor-equal"),
            CommPolicy::RandomCell { seed: 0 } => f.write_str("random-cell"),
            CommPolicy::RandomCell { seed } => write!(f, "random-cell-s{seed}"),
        }
    }
}

impl FromStr for CommPolicy {
    type Err = Error;

    /// Accepts the display form plus the shorthands `sracp`, `sracp-<gate>`
    /// and `random-cell`.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        let bad = || {
            Error::invalid(format!(
                "unknown policy '{s}' (expected sracp[-<s|r|union>[-a<alpha>]], upper-bound, lower-bound, \
                 fixed-neighbor-equal or random-cell[-s<seed>])"
            ))
        };
        match key.as_str() {
            "upper-bound" | "upperbound" => return Ok(CommPolicy::UpperBound),
            "lower-bound" | "lowerbound" => return Ok(CommPolicy::LowerBound),
            "fixed-neighbor-equal" | "fixed-neighbor" | "fixedneighborequal" => {
                return Ok(CommPolicy::FixedNeighborEqual)
            }
            "random-cell" | "randomcell" => return Ok(CommPolicy::RandomCell { seed: 0 }),
            _ => {}
        }
        if let Some(seed) = key.strip_prefix("random-cell-s") {
            return seed.parse().map(|seed| CommPolicy::RandomCell { seed }).map_err(|_| bad());
        }
        let rest = key.strip_prefix("sracp").ok_or_else(bad)?;
        let mut gate = GateMode::Union;
        let mut alpha = 0.5;
        let mut parts = rest.split('-').filter(|p| !p.is_empty()).peekable();
        if let Some(p) = parts.peek() {
            if !p.starts_with('a') || p.len() == 1 {
                gate = p.parse().map_err(|_| bad())?;
                parts.next();
            }
        }
        if let Some(p) = parts.next() {
            alpha = p.strip_prefix('a').and_then(|a| a.parse().ok()).ok_or_else(bad)?;
        }
        if parts.next().is_some() || !(0.0..=1.0).contains(&alpha) {
            return Err(bad());
        }
        Ok(CommPolicy::Sracp { gate, alpha })
    }
}

impl TryFrom<String> for CommPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CommPolicy> for String {
    fn from(p: CommPolicy) -> String {
        p.to_string()
    }
}

/// Sensor model and raster shared by every agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub grid: GridSpec,
    pub fov: FovSpec,
    pub rays: usize,
    pub range_jitter: f64,
    pub kernel_radius: usize,
    pub raycast: RaycastParams,
    /// Ray hits needed before an object counts as observed.
    pub min_hits: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        let grid = GridSpec::centered(38.4, 0.4, (0.0, 4.0)).expect("default grid is valid");
        SensorConfig {
            grid,
            fov: FovSpec::default(),
            rays: 720,
            range_jitter: 0.05,
            kernel_radius: 1,
            raycast: RaycastParams::default_for(&grid),
            min_hits: 2,
        }
    }
}

/// Detection decoding thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub occupancy_threshold: f64,
    pub min_cells: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            occupancy_threshold: 0.3,
            min_cells: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Communication radius in meters.
    pub comm_radius: f64,
    pub tau_r: f64,
    pub tau_occ: f64,
    pub tau_t: f64,
    pub k_t: usize,
    pub budget: BudgetSpec,
    pub policy: CommPolicy,
    pub seed: u64,
    /// Frames to simulate; the whole scene when absent.
    pub frames: Option<usize>,
    pub sensor: SensorConfig,
    pub risk: RiskWeights,
    pub decode: DecodeConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            comm_radius: 50.0,
            tau_r: 0.2,
            tau_occ: 0.5,
            tau_t: 0.5,
            k_t: 3,
            budget: BudgetSpec::default(),
            policy: CommPolicy::default(),
            seed: 0,
            frames: None,
            sensor: SensorConfig::default(),
            risk: RiskWeights::default(),
            decode: DecodeConfig::default(),
        }
    }
}

fn unit_open(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")))
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let named = |key: &str, e: Error| Error::Config(format!("{key}: {e}"));
        if !(self.comm_radius > 0.0 && self.comm_radius.is_finite()) {
            return Err(Error::Config(format!("comm_radius must be positive, got {}", self.comm_radius)));
        }
        unit_open("tau_r", self.tau_r)?;
        unit_open("tau_occ", self.tau_occ)?;
        unit_open("tau_t", self.tau_t)?;
        if self.k_t == 0 {
            return Err(Error::Config("k_t must be at least 1".into()));
        }
        if self.frames == Some(0) {
            return Err(Error::Config("frames must be at least 1".into()));
        }
        self.budget.validate().map_err(|e| named("budget", e))?;
        if self.budget.b_idx != 4 || self.budget.b_feat != 1 || self.budget.h_hdr < 20 {
            return Err(Error::Config(
                "budget: the wire format needs b_idx = 4, b_feat = 1 and h_hdr >= 20".into(),
            ));
        }
        if self.budget.channels < 3 {
            return Err(Error::Config("budget.channels must be at least 3".into()));
        }
        if let CommPolicy::Sracp { alpha, .. } = self.policy {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Config(format!("policy alpha must lie in [0, 1], got {alpha}")));
            }
        }
        let s = &self.sensor;
        s.fov.validate().map_err(|e| named("sensor.fov", e))?;
        s.raycast
            .validate_for(&s.grid)
            .map_err(|e| named("sensor.raycast", e))?;
        if s.rays == 0 {
            return Err(Error::Config("sensor.rays must be at least 1".into()));
        }
        if !(0.0..=s.grid.cell_size()).contains(&s.range_jitter) {
            return Err(Error::Config("sensor.range_jitter must lie in [0, cell_size]".into()));
        }
        if s.min_hits == 0 {
            return Err(Error::Config("sensor.min_hits must be at least 1".into()));
        }
        self.risk.validate().map_err(|e| named("risk", e))?;
        unit_open("decode.occupancy_threshold", self.decode.occupancy_threshold)?;
        if self.decode.min_cells == 0 {
            return Err(Error::Config("decode.min_cells must be at least 1".into()));
        }
        Ok(())
    }
}

/// Whether any blind cell is riskier than `tau_r`, and which ones are.
pub fn needs_cooperation(blind: &BlindZoneMask, risk: &RiskMap, tau_r: f64) -> (bool, Vec<CellIndex>) {
    let cells: Vec<CellIndex> = blind
        .occluded()
        .iter()
        .zip(risk.values())
        .enumerate()
        .filter(|(_, (b, r))| **b && **r > tau_r)
        .map(|(i, _)| i)
        .collect();
    (!cells.is_empty(), cells)
}

/// How many of the requester's `cells` a beacon sender can see.
pub fn coverage_count(cells: &[CellIndex], grid: &GridSpec, requester: Vec2, beacon: &CoverageBeacon) -> usize {
    cells
        .iter()
        .filter(|&&c| {
            let center = grid.cell_center(c);
            let local = [
                center[0] + requester[0] - beacon.position[0],
                center[1] + requester[1] - beacon.position[1],
            ];
            grid.cell_of(local).is_some_and(|s| beacon.covers(s))
        })
        .count()
}

/// The beacon sender covering most risky cells; ties go to the smaller id.
pub fn select_partner(
    risky: &[CellIndex],
    grid: &GridSpec,
    requester: Vec2,
    beacons: &[CoverageBeacon],
) -> Option<ObjectId> {
    beacons
        .iter()
        .map(|b| (coverage_count(risky, grid, requester, b), b.sender))
        .filter(|(n, _)| *n > 0)
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|(_, id)| id)
}

/// What a responder knows about the agent it serves.
#[derive(Debug, Clone, PartialEq)]
pub struct RequesterInfo {
    pub id: ObjectId,
    pub frame: u32,
    pub position: Vec2,
    pub velocity: Vec2,
    /// Requester blind zone, present for explicit requests.
    pub blind: Option<Vec<bool>>,
}

impl RequesterInfo {
    pub fn from_request(req: &CPRequest, velocity: Vec2) -> Self {
        RequesterInfo {
            id: req.requester,
            frame: req.frame,
            position: req.position,
            velocity,
            blind: Some(req.blind.clone()),
        }
    }

    fn as_object(&self) -> ObjectState {
        ObjectState {
            id: self.id,
            position: self.position,
            velocity: self.velocity,
            length: 4.5,
            width: 1.8,
            height: 1.6,
            yaw: 0.0,
            is_connected: true,
        }
    }
}

/// Local knowledge of a responding agent.
#[derive(Debug, Clone, Copy)]
pub struct ResponderView<'a> {
    pub id: ObjectId,
    /// The responder's own state; its body is known without sensing.
    pub body: &'a ObjectState,
    pub observed: &'a [Observation],
    /// Stabilized occlusion probability in the responder's own frame.
    pub occ_prob: &'a [f64],
    pub grid: &'a GridSpec,
    pub intersections: &'a [Vec2],
    pub weights: &'a RiskWeights,
    pub channels: usize,
}

/// Surrogate features of `observed` objects rendered in the frame centred
/// at `origin`, with risk taken relative to `reference`.
#[allow(clippy::too_many_arguments)]
pub fn observation_features(
    grid: &GridSpec,
    origin: Vec2,
    observed: &[Observation],
    exclude: Option<ObjectId>,
    reference: &ObjectState,
    intersections: &[Vec2],
    weights: &RiskWeights,
    occ_prob: Vec<f64>,
    channels: usize,
) -> Result<SurrogateFeatures> {
    let pose = Pose2D::new(origin, 0.0);
    let known: Vec<ObjectState> = observed.iter().map(|o| o.object.clone()).collect();
    let ctx = RiskContext {
        scene_objects: &known,
        intersections,
    };
    let mut occupancy = vec![0.0; grid.len()];
    let mut risk = vec![0.0; grid.len()];
    for obs in observed.iter().filter(|o| Some(o.object.id) != exclude) {
        let r = object_risk(&obs.object, reference, ctx, weights);
        for c in obs.object.in_frame(&pose).footprint_cells(grid) {
            occupancy[c] = f64::max(occupancy[c], obs.confidence);
            risk[c] = f64::max(risk[c], r);
        }
    }
    SurrogateFeatures::new(*grid, channels, occupancy, risk, occ_prob)
}

impl ResponderView<'_> {
    /// Features of this responder rendered in the requester's frame.
    pub fn features_for(&self, requester: &RequesterInfo) -> Result<SurrogateFeatures> {
        let here = Pose2D::new(self.body.position, 0.0);
        let there = Pose2D::new(requester.position, 0.0);
        let occ = crate::bev::warp_plane(self.occ_prob, self.grid, &here, self.grid, &there, 1.0);
        let mut known = self.observed.to_vec();
        known.push(Observation {
            object: self.body.clone(),
            confidence: 1.0,
        });
        observation_features(
            self.grid,
            requester.position,
            &known,
            Some(requester.id),
            &requester.as_object(),
            self.intersections,
            self.weights,
            occ,
            self.channels,
        )
    }
}

/// Cells with non-zero object evidence.
pub fn nonzero_cells(features: &SurrogateFeatures) -> Vec<CellIndex> {
    (0..features.occupancy().len())
        .filter(|&i| features.occupancy()[i] > 0.0)
        .collect()
}

/// Cells a responder transmits under `policy` within `link_budget`.
pub fn choose_cells(
    features: &SurrogateFeatures,
    blind: Option<&[bool]>,
    policy: &CommPolicy,
    link_budget: &BudgetSpec,
    rng_seed: u64,
) -> Result<SelectionMask> {
    let grid = *crate::fusion::FeatureSource::grid(features);
    let k = capacity_cells(link_budget);
    match *policy {
        CommPolicy::Sracp { gate, alpha } => {
            let blind = blind.ok_or_else(|| Error::protocol("risk-aware selection needs the requester blind zone"))?;
            let probs = blind.iter().map(|&b| f64::from(u8::from(b))).collect();
            let mask = BlindZoneMask::from_parts(grid, blind.to_vec(), probs)?;
            let gain = compute_gain(features.occupancy(), features.risk(), &mask, alpha)?;
            Ok(select_cells(&gain, k, gate))
        }
        CommPolicy::UpperBound => SelectionMask::from_cells(grid, nonzero_cells(features)),
        CommPolicy::LowerBound => Err(Error::protocol("the lower-bound policy never transmits")),
        CommPolicy::FixedNeighborEqual | CommPolicy::RandomCell { .. } => {
            let candidates = nonzero_cells(features);
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let k = k.min(candidates.len());
            let picked = sample(&mut rng, candidates.len(), k).into_iter().map(|i| candidates[i]);
            SelectionMask::from_cells(grid, picked)
        }
    }
}

/// A serialized feature payload from `responder` to `requester`.
#[derive(Debug, Clone, PartialEq)]
pub struct CPResponse {
    pub responder: ObjectId,
    pub requester: ObjectId,
    pub cells: usize,
    pub payload: Vec<u8>,
}

/// Serve one requester: render features in its frame, select cells under
/// the policy and serialize them (within the link budget unless the policy
/// is unbudgeted).
pub fn respond(
    responder: &ResponderView<'_>,
    requester: &RequesterInfo,
    policy: &CommPolicy,
    link_budget: &BudgetSpec,
    rng_seed: u64,
) -> Result<CPResponse> {
    let features = responder.features_for(requester)?;
    let mask = choose_cells(&features, requester.blind.as_deref(), policy, link_budget, rng_seed)?;
    let header = PayloadHeader {
        sender: responder.id,
        frame: requester.frame,
        grid_hash: responder.grid.hash(),
    };
    let payload = match policy {
        CommPolicy::UpperBound => encode_payload(&features, &mask, link_budget, header)?,
        _ => serialize_payload(&features, &mask, link_budget, header)?,
    };
    Ok(CPResponse {
        responder: responder.id,
        requester: requester.id,
        cells: mask.len(),
        payload,
    })
}

/// Answer an explicit request.
pub fn handle_request(
    responder: &ResponderView<'_>,
    request: &CPRequest,
    requester_velocity: Vec2,
    budget: &BudgetSpec,
    policy: &CommPolicy,
    rng_seed: u64,
) -> Result<CPResponse> {
    if request.grid_hash != responder.grid.hash() {
        return Err(Error::protocol("request grid does not match responder grid"));
    }
    if request.target != responder.id {
        return Err(Error::protocol(format!(
            "request for agent {} delivered to {}",
            request.target, responder.id
        )));
    }
    let info = RequesterInfo::from_request(request, requester_velocity);
    respond(responder, &info, policy, budget, rng_seed)
}

/// Deterministic per-link seed.
pub fn link_seed(seed: u64, frame: usize, requester: ObjectId, responder: ObjectId) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [frame as u64, u64::from(requester), u64::from(responder)] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}
