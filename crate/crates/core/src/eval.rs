//! Detection metrics, byte summaries and the two evaluation protocols:
//! a budget sweep, and the least budget reaching a Risk-AP target.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::DetectionBox;
use crate::grid::Vec2;
use crate::protocol::{run_scene, sense_scene, CommPolicy, FrameLog, GroundTruth, SceneSensing, SimConfig};
use crate::scenario::Scene;

/// Budget search step and ceiling.
pub const P2_STEP_BYTES: u64 = 64;
pub const P2_MAX_BYTES: u64 = 64 * 1024;

impl GroundTruth {
    pub fn to_box(&self) -> DetectionBox {
        DetectionBox {
            center: self.center,
            length: self.length,
            width: self.width,
            yaw: self.yaw,
            score: 1.0,
            risk: self.risk,
        }
    }
}

fn corners(b: &DetectionBox) -> Vec<Vec2> {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.length / 2.0, b.width / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        .iter()
        .map(|&(u, v)| [b.center[0] + c * u - s * v, b.center[1] + s * u + c * v])
        .collect()
}

fn cross(o: Vec2, a: Vec2, b: Vec2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Sutherland–Hodgman clip of `subject` by the counter-clockwise convex `clip`.
fn clip_convex(subject: &[Vec2], clip: &[Vec2]) -> Vec<Vec2> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Bird's-eye IoU of two oriented boxes.
pub fn box_iou(a: &DetectionBox, b: &DetectionBox) -> f64 {
    let (pa, pb) = (corners(a), corners(b));
    let (aa, ab) = (area(&pa), area(&pb));
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let inter = area(&clip_convex(&pa, &pb));
    let union = aa + ab - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Ranked detection outcomes pooled over frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ApAccumulator {
    entries: Vec<(f64, bool)>,
    positives: usize,
}

impl ApAccumulator {
    /// Match one frame's detections greedily in descending score order,
    /// each to the unmatched ground truth of highest IoU above `theta`.
    ///
    /// With `tau`, only ground truth riskier than `tau` counts; detections
    /// matched to the rest are dropped.
    pub fn add_frame(&mut self, detections: &[DetectionBox], truth: &[GroundTruth], theta: f64, tau: Option<f64>) {
        let counted: Vec<bool> = truth.iter().map(|g| tau.map_or(true, |t| g.risk > t)).collect();
        self.positives += counted.iter().filter(|c| **c).count();
        let boxes: Vec<DetectionBox> = truth.iter().map(GroundTruth::to_box).collect();
        let mut order: Vec<usize> = (0..detections.len()).collect();
        order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
        let mut taken = vec![false; truth.len()];
        for i in order {
            let d = &detections[i];
            let best = boxes
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, g)| (j, box_iou(d, g)))
                .filter(|(_, iou)| *iou > theta)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    if counted[j] {
                        self.entries.push((d.score, true));
                    }
                }
                None => self.entries.push((d.score, false)),
            }
        }
    }

    pub fn merge(&mut self, other: &ApAccumulator) {
        self.entries.extend_from_slice(&other.entries);
        self.positives += other.positives;
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    /// All-point interpolated AP; `None` without positives.
    pub fn ap(&self) -> Option<f64> {
        if self.positives == 0 {
            return None;
        }
        let mut ranked = self.entries.clone();
        // stable: equal scores keep insertion order
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut tp = 0usize;
        let mut points = Vec::with_capacity(ranked.len());
        for (k, (_, hit)) in ranked.iter().enumerate() {
            tp += usize::from(*hit);
            points.push((tp as f64 / self.positives as f64, tp as f64 / (k + 1) as f64));
        }
        let mut ap = 0.0;
        let mut best = 0.0f64;
        let mut prev_recall = points.last().map_or(0.0, |p| p.0);
        for &(recall, precision) in points.iter().rev() {
            ap += (prev_recall - recall) * best;
            best = best.max(precision);
            prev_recall = recall;
        }
        ap += prev_recall * best;
        Some(ap.clamp(0.0, 1.0))
    }
}

/// AP over one set of detections; zero when there is no ground truth.
pub fn average_precision(detections: &[DetectionBox], truth: &[GroundTruth], theta: f64) -> f64 {
    let mut acc = ApAccumulator::default();
    acc.add_frame(detections, truth, theta, None);
    acc.ap().unwrap_or(0.0)
}

/// AP over ground truth riskier than `tau`; `None` when none is.
pub fn risk_ap(detections: &[DetectionBox], truth: &[GroundTruth], theta: f64, tau: f64) -> Option<f64> {
    let mut acc = ApAccumulator::default();
    acc.add_frame(detections, truth, theta, Some(tau));
    acc.ap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    pub iou_thresholds: Vec<f64>,
    pub risk_thresholds: Vec<f64>,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            iou_thresholds: vec![0.3, 0.5, 0.7],
            risk_thresholds: vec![0.2, 0.3, 0.4],
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::Config("eval.iou_thresholds must not be empty".into()));
        }
        if let Some(t) = self.iou_thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::Config(format!("eval.iou_thresholds: {t} is outside (0, 1]")));
        }
        if let Some(t) = self.risk_thresholds.iter().find(|t| !(**t >= 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("eval.risk_thresholds: {t} is outside [0, 1)")));
        }
        Ok(())
    }

    /// Plain AP first, then each risk threshold.
    fn taus(&self) -> impl Iterator<Item = Option<f64>> + '_ {
        std::iter::once(None).chain(self.risk_thresholds.iter().map(|t| Some(*t)))
    }
}

/// One metric cell. `tau = None` is plain AP; `ap = None` means no ground
/// truth qualified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub policy: String,
    pub budget_bytes: u64,
    pub theta: f64,
    pub tau: Option<f64>,
    pub ap: Option<f64>,
    pub bytes_per_frame: f64,
    pub frames: usize,
    /// Risk-AP gained over the no-sharing baseline per extra kilobyte.
    pub bpk: Option<f64>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    policy: &'a str,
    budget_bytes: u64,
    theta: f64,
    tau: Option<f64>,
    ap: Option<f64>,
    bytes_per_frame: f64,
    bpk: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn get(&self, policy: &str, budget: u64, theta: f64, tau: Option<f64>) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.policy == policy && r.budget_bytes == budget && r.theta == theta && r.tau == tau)
    }

    /// The metric, or `None` when the row is missing or empty.
    pub fn ap(&self, policy: &str, budget: u64, theta: f64, tau: Option<f64>) -> Option<f64> {
        self.get(policy, budget, theta, tau).and_then(|r| r.ap)
    }

    /// Columns: policy, budget_bytes, theta, tau, ap, bytes_per_frame, bpk.
    /// Empty `tau` is plain AP; empty `ap`/`bpk` are undefined values.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                policy: &r.policy,
                budget_bytes: r.budget_bytes,
                theta: r.theta,
                tau: r.tau,
                ap: r.ap,
                bytes_per_frame: r.bytes_per_frame,
                bpk: r.bpk,
            })
            .map_err(|e| Error::invalid(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Write `<stem>.csv` and `<stem>.json` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, self.to_json()?).map_err(|e| Error::io(&json_path, e))
    }
}

/// Mean beacon plus received payload bytes per frame.
pub fn bytes_per_frame(logs: &[&FrameLog]) -> f64 {
    if logs.is_empty() {
        return 0.0;
    }
    logs.iter().map(|l| (l.bytes_beacon + l.bytes_payload) as f64).sum::<f64>() / logs.len() as f64
}

/// Pooled AP over frames.
pub fn pooled_ap(logs: &[&FrameLog], theta: f64, tau: Option<f64>) -> Option<f64> {
    let mut acc = ApAccumulator::default();
    for l in logs {
        acc.add_frame(&l.detections, &l.ground_truth, theta, tau);
    }
    acc.ap()
}

fn group_rows(policy: &str, budget: u64, logs: &[&FrameLog], m: &MatchConfig) -> Vec<EvalRow> {
    let bpf = bytes_per_frame(logs);
    let mut rows = Vec::new();
    for &theta in &m.iou_thresholds {
        for tau in m.taus() {
            rows.push(EvalRow {
                policy: policy.to_string(),
                budget_bytes: budget,
                theta,
                tau,
                ap: pooled_ap(logs, theta, tau),
                bytes_per_frame: bpf,
                frames: logs.len(),
                bpk: None,
            });
        }
    }
    rows
}

fn fill_bpk(rows: &mut [EvalRow]) {
    let lower = CommPolicy::LowerBound.to_string();
    let base: Vec<(f64, Option<f64>, Option<f64>, f64)> = rows
        .iter()
        .filter(|r| r.policy == lower)
        .map(|r| (r.theta, r.tau, r.ap, r.bytes_per_frame))
        .collect();
    for r in rows.iter_mut().filter(|r| r.policy != lower) {
        let Some(&(_, _, base_ap, base_bytes)) = base.iter().find(|b| b.0 == r.theta && b.1 == r.tau) else {
            continue;
        };
        let extra_kb = (r.bytes_per_frame - base_bytes) / 1024.0;
        r.bpk = match (r.ap, base_ap) {
            (Some(a), Some(b)) if extra_kb > 0.0 => Some((a - b) / extra_kb),
            _ => None,
        };
    }
}

/// Score ego frames grouped by (policy, budget) in first-seen order.
pub fn evaluate_logs(logs: &[FrameLog], m: &MatchConfig) -> Result<EvalReport> {
    m.validate()?;
    let mut groups: Vec<((String, u64), Vec<&FrameLog>)> = Vec::new();
    for l in logs.iter().filter(|l| l.ego) {
        let key = (l.policy.clone(), l.budget_bytes);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(l),
            None => groups.push((key, vec![l])),
        }
    }
    if groups.is_empty() {
        return Err(Error::NoData("no ego frame logs to evaluate".into()));
    }
    let mut rows: Vec<EvalRow> = groups
        .iter()
        .flat_map(|((p, b), v)| group_rows(p, *b, v, m))
        .collect();
    fill_bpk(&mut rows);
    Ok(EvalReport { rows })
}

/// Perception of every scene, computed in parallel, in scene order.
pub fn sense_suite(scenes: &[Scene], config: &SimConfig) -> Result<Vec<SceneSensing>> {
    scenes.par_iter().map(|s| sense_scene(s, config)).collect()
}

/// Run one config over a sensed suite, returning every agent's logs in
/// scene order.
pub fn run_suite(scenes: &[Scene], sensing: &[SceneSensing], config: &SimConfig) -> Result<Vec<FrameLog>> {
    if scenes.len() != sensing.len() {
        return Err(Error::invalid("one sensing record per scene is required"));
    }
    let per_scene: Vec<Vec<FrameLog>> = scenes
        .par_iter()
        .zip(sensing)
        .map(|(s, p)| run_scene(s, p, config))
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

fn budget_free(p: &CommPolicy) -> bool {
    matches!(p, CommPolicy::LowerBound | CommPolicy::UpperBound)
}

fn check_sweep(policies: &[CommPolicy], budgets: &[u64]) -> Result<()> {
    if budgets.is_empty() || budgets.contains(&0) {
        return Err(Error::invalid("sweep budgets must be positive and non-empty"));
    }
    if policies.is_empty() {
        return Err(Error::invalid("sweep needs at least one policy"));
    }
    Ok(())
}

/// Every agent's frame logs for every policy at every budget, scene by
/// scene. Policies that ignore the budget run once, at the first budget.
pub fn sweep_logs(scenes: &[Scene], base: &SimConfig, policies: &[CommPolicy], budgets: &[u64]) -> Result<Vec<FrameLog>> {
    check_sweep(policies, budgets)?;
    let per_scene: Vec<Vec<FrameLog>> = scenes
        .par_iter()
        .map(|scene| {
            let sensing = sense_scene(scene, base)?;
            let mut out = Vec::new();
            for policy in policies {
                let runs = if budget_free(policy) { &budgets[..1] } else { budgets };
                for &b in runs {
                    let cfg = SimConfig {
                        policy: *policy,
                        budget: base.budget.with_bytes(b),
                        ..*base
                    };
                    out.extend(run_scene(scene, &sensing, &cfg)?);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// Score sweep logs; budget-free policies are reported at every budget.
pub fn sweep_report(logs: &[FrameLog], policies: &[CommPolicy], budgets: &[u64], m: &MatchConfig) -> Result<EvalReport> {
    check_sweep(policies, budgets)?;
    m.validate()?;
    let mut rows = Vec::new();
    for policy in policies {
        let label = policy.to_string();
        for &b in budgets {
            let group: Vec<&FrameLog> = logs
                .iter()
                .filter(|l| l.ego && l.policy == label && (budget_free(policy) || l.budget_bytes == b))
                .collect();
            if group.is_empty() {
                return Err(Error::NoData(format!("no ego logs for {label} at {b} bytes")));
            }
            rows.extend(group_rows(&label, b, &group, m));
        }
    }
    fill_bpk(&mut rows);
    Ok(EvalReport { rows })
}

/// Every policy at every budget over the suite.
pub fn sweep_p1(
    scenes: &[Scene],
    base: &SimConfig,
    policies: &[CommPolicy],
    budgets: &[u64],
    m: &MatchConfig,
) -> Result<EvalReport> {
    m.validate()?;
    let logs = sweep_logs(scenes, base, policies, budgets)?;
    sweep_report(&logs, policies, budgets, m)
}

/// A Risk-AP level to reach.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct P2Target {
    pub theta: f64,
    pub tau: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLatency {
    pub scene: String,
    /// First frame whose own Risk-AP meets the target.
    pub frames_to_target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P2Report {
    pub policy: String,
    pub target: P2Target,
    /// Least budget on the search lattice meeting the target.
    pub min_bytes: Option<u64>,
    pub risk_ap: Option<f64>,
    pub latency: Vec<SceneLatency>,
}

/// Least budget (multiple of 64 bytes, at most 64 KB) whose pooled ego
/// Risk-AP meets the target, found by bisection. The result `B` always
/// satisfies `ap(B) >= target` and, when `B > 0`, `ap(B - 64) < target`.
pub fn min_bytes_p2(scenes: &[Scene], base: &SimConfig, target: P2Target) -> Result<P2Report> {
    if !(target.ap > 0.0 && target.ap <= 1.0) {
        return Err(Error::invalid(format!("target AP must lie in (0, 1], got {}", target.ap)));
    }
    MatchConfig {
        iou_thresholds: vec![target.theta],
        risk_thresholds: vec![target.tau],
    }
    .validate()?;
    let sensing = sense_suite(scenes, base)?;
    let run = |b: u64| -> Result<Vec<FrameLog>> {
        let cfg = SimConfig {
            budget: base.budget.with_bytes(b),
            ..*base
        };
        Ok(run_suite(scenes, &sensing, &cfg)?.into_iter().filter(|l| l.ego).collect())
    };
    let score = |logs: &[FrameLog]| {
        let refs: Vec<&FrameLog> = logs.iter().collect();
        pooled_ap(&refs, target.theta, Some(target.tau))
    };
    let meets = |ap: Option<f64>| ap.is_some_and(|a| a >= target.ap);

    let mut found: Option<(u64, Vec<FrameLog>)> = None;
    let floor = run(0)?;
    if meets(score(&floor)) {
        found = Some((0, floor));
    } else {
        let top = run(P2_MAX_BYTES)?;
        if meets(score(&top)) {
            let (mut lo, mut hi) = (0u64, P2_MAX_BYTES / P2_STEP_BYTES);
            let mut hi_logs = top;
            while hi - lo > 1 {
                let mid = lo + (hi - lo) / 2;
                let logs = run(mid * P2_STEP_BYTES)?;
                if meets(score(&logs)) {
                    hi = mid;
                    hi_logs = logs;
                } else {
                    lo = mid;
                }
            }
            found = Some((hi * P2_STEP_BYTES, hi_logs));
        }
    }

    let (min_bytes, risk_ap, latency) = match &found {
        None => (None, None, Vec::new()),
        Some((b, logs)) => {
            let latency = scenes
                .iter()
                .map(|s| SceneLatency {
                    scene: s.name.clone(),
                    frames_to_target: logs
                        .iter()
                        .filter(|l| l.scene == s.name)
                        .find(|l| meets(risk_ap(&l.detections, &l.ground_truth, target.theta, target.tau)))
                        .map(|l| l.frame),
                })
                .collect();
            (Some(*b), score(logs), latency)
        }
    };
    Ok(P2Report {
        policy: base.policy.to_string(),
        target,
        min_bytes,
        risk_ap,
        latency,
    })
}

/// Frame logs grouped per scene, sorted by scene name then frame.
pub fn logs_by_scene(logs: &[FrameLog]) -> BTreeMap<&str, Vec<&FrameLog>> {
    let mut out: BTreeMap<&str, Vec<&FrameLog>> = BTreeMap::new();
    for l in logs {
        out.entry(l.scene.as_str()).or_default().push(l);
    }
    for v in out.values_mut() {
        v.sort_by_key(|l| (l.frame, l.agent));
    }
    out
}
