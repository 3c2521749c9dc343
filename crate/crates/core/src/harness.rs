//! Run configuration and the file-level commands behind the CLI.
//!
//! A run is described by one TOML file:
//!
//! ```toml
//! output_dir = "out"
//!
//! [scenarios]
//! kinds = ["unprotected-left-turn", "head-on"]
//! seeds = [0, 1, 2]
//! frames = 8
//!
//! [sim]
//! tau_r = 0.2
//! policy = "sracp-union-a0.5"
//!
//! [sim.budget]
//! b_bytes = 1024
//!
//! [eval]
//! iou_thresholds = [0.3, 0.5, 0.7]
//!
//! [sweep]
//! budgets = [512, 1024]
//! ```
//!
//! Every section and key is optional; unknown keys are rejected. Relative
//! paths resolve against the config file's directory.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_logs, min_bytes_p2, run_suite, sense_suite, sweep_p1, EvalReport, MatchConfig, P2Report, P2Target};
use crate::protocol::{CommPolicy, FrameLog, SimConfig};
use crate::scenario::{generate_scene, ScenarioKind, ScenarioParams, Scene};
use crate::selection::GateMode;

pub const FRAMES_FILE: &str = "frames.ndjson";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_STEM: &str = "report";
pub const SWEEP_STEM: &str = "sweep_p1";
pub const P2_FILE: &str = "min_bytes_p2.json";

/// Which scenes a run covers: generated kinds × seeds, plus scene files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSet {
    pub kinds: Vec<ScenarioKind>,
    pub seeds: Vec<u64>,
    pub frames: usize,
    pub dt: f64,
    pub position_jitter: f64,
    pub speed_jitter: f64,
    /// Scene JSON files loaded after the generated scenes.
    pub files: Vec<PathBuf>,
}

impl Default for ScenarioSet {
    fn default() -> Self {
        let p = ScenarioParams::default();
        ScenarioSet {
            kinds: ScenarioKind::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            frames: p.frames,
            dt: p.dt,
            position_jitter: p.position_jitter,
            speed_jitter: p.speed_jitter,
            files: Vec::new(),
        }
    }
}

impl ScenarioSet {
    pub fn params(&self) -> ScenarioParams {
        ScenarioParams {
            frames: self.frames,
            dt: self.dt,
            position_jitter: self.position_jitter,
            speed_jitter: self.speed_jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub policies: Vec<CommPolicy>,
    pub budgets: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            policies: vec![
                CommPolicy::default(),
                CommPolicy::UpperBound,
                CommPolicy::LowerBound,
                CommPolicy::FixedNeighborEqual,
                CommPolicy::RandomCell { seed: 0 },
            ],
            budgets: vec![512, 717, 1024, 2048, 3072, 5120, 10240],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct P2Config {
    pub theta: f64,
    pub tau: f64,
    pub target_ap: f64,
}

impl Default for P2Config {
    fn default() -> Self {
        P2Config {
            theta: 0.5,
            tau: 0.3,
            target_ap: 0.9,
        }
    }
}

impl P2Config {
    pub fn target(&self) -> P2Target {
        P2Target {
            theta: self.theta,
            tau: self.tau,
            ap: self.target_ap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub scenarios: ScenarioSet,
    pub sim: SimConfig,
    pub eval: MatchConfig,
    pub sweep: SweepConfig,
    pub p2: P2Config,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("out"),
            scenarios: ScenarioSet::default(),
            sim: SimConfig::default(),
            eval: MatchConfig::default(),
            sweep: SweepConfig::default(),
            p2: P2Config::default(),
        }
    }
}

impl RunConfig {
    /// Parse and validate; parse errors carry the line and column.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.output_dir = base.join(&cfg.output_dir);
        for f in &mut cfg.scenarios.files {
            *f = base.join(&*f);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenarios;
        if s.kinds.is_empty() != s.seeds.is_empty() {
            return Err(Error::Config("scenarios.kinds and scenarios.seeds must both be set or both be empty".into()));
        }
        if s.kinds.is_empty() && s.files.is_empty() {
            return Err(Error::Config("scenarios: no scenes configured".into()));
        }
        s.params()
            .validate()
            .map_err(|e| Error::Config(format!("scenarios: {e}")))?;
        self.sim.validate().map_err(|e| Error::Config(format!("sim.{}", strip_config(e))))?;
        self.eval.validate()?;
        if self.sweep.policies.is_empty() {
            return Err(Error::Config("sweep.policies must not be empty".into()));
        }
        if self.sweep.budgets.is_empty() || self.sweep.budgets.contains(&0) {
            return Err(Error::Config("sweep.budgets must be positive and non-empty".into()));
        }
        for p in &self.sweep.policies {
            SimConfig { policy: *p, ..self.sim }
                .validate()
                .map_err(|e| Error::Config(format!("sweep.policies: {}", strip_config(e))))?;
        }
        let p2 = &self.p2;
        if !(p2.target_ap > 0.0 && p2.target_ap <= 1.0) {
            return Err(Error::Config(format!("p2.target_ap must lie in (0, 1], got {}", p2.target_ap)));
        }
        MatchConfig {
            iou_thresholds: vec![p2.theta],
            risk_thresholds: vec![p2.tau],
        }
        .validate()
        .map_err(|e| Error::Config(format!("p2: {}", strip_config(e))))?;
        Ok(())
    }

    /// Generated scenes in (kind, seed) order, then the listed files.
    pub fn scenes(&self) -> Result<Vec<Scene>> {
        let params = self.scenarios.params();
        let mut out = Vec::new();
        for &kind in &self.scenarios.kinds {
            for &seed in &self.scenarios.seeds {
                out.push(generate_scene(kind, seed, &params)?);
            }
        }
        for f in &self.scenarios.files {
            out.push(Scene::load(f)?);
        }
        Ok(out)
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

/// Command-line overrides layered over a loaded config.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub policy: Option<CommPolicy>,
    pub budget_bytes: Option<u64>,
    pub gate: Option<GateMode>,
}

impl Overrides {
    /// `policy` replaces the simulated policy and narrows the sweep to it;
    /// `gate` rewrites every SRACP policy; `budget_bytes` sets the
    /// simulated budget and narrows the sweep to it.
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.sim.seed = seed;
        }
        if let Some(p) = self.policy {
            cfg.sim.policy = p;
            cfg.sweep.policies = vec![p];
        }
        if let Some(b) = self.budget_bytes {
            cfg.sim.budget.b_bytes = b;
            cfg.sweep.budgets = vec![b];
        }
        if let Some(g) = self.gate {
            if !matches!(cfg.sim.policy, CommPolicy::Sracp { .. }) {
                return Err(Error::Config(format!("--gate needs an sracp policy, not {}", cfg.sim.policy)));
            }
            let regate = |p: &mut CommPolicy| {
                if let CommPolicy::Sracp { gate, .. } = p {
                    *gate = g;
                }
            };
            regate(&mut cfg.sim.policy);
            cfg.sweep.policies.iter_mut().for_each(regate);
        }
        cfg.validate()
    }
}

/// Generate one scene and write it as JSON.
pub fn cmd_scene_gen(kind: ScenarioKind, seed: u64, params: &ScenarioParams, out: &Path) -> Result<Scene> {
    let scene = generate_scene(kind, seed, params)?;
    scene.save(out)?;
    Ok(scene)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub policy: String,
    pub budget_bytes: u64,
    pub scenes: usize,
    pub ego_frames: usize,
    /// Mean beacon plus payload bytes per ego frame.
    pub ego_bytes_per_frame: f64,
    /// Payload bytes received by every agent over the run.
    pub payload_bytes: u64,
    pub beacon_bytes: u64,
    pub request_bytes: u64,
    pub triggered_frames: usize,
    /// Largest payload received over one link in one frame.
    pub max_link_payload_bytes: u64,
}

impl SimSummary {
    pub fn of(config: &SimConfig, scenes: usize, logs: &[FrameLog]) -> SimSummary {
        let ego: Vec<&FrameLog> = logs.iter().filter(|l| l.ego).collect();
        SimSummary {
            policy: config.policy.to_string(),
            budget_bytes: config.budget.b_bytes,
            scenes,
            ego_frames: ego.len(),
            ego_bytes_per_frame: crate::eval::bytes_per_frame(&ego),
            payload_bytes: logs.iter().map(|l| l.bytes_payload).sum(),
            beacon_bytes: logs.iter().map(|l| l.bytes_beacon).sum(),
            request_bytes: logs.iter().map(|l| l.bytes_request).sum(),
            triggered_frames: logs.iter().filter(|l| l.triggered).count(),
            max_link_payload_bytes: logs
                .iter()
                .flat_map(|l| l.responses.iter().map(|r| r.bytes))
                .max()
                .unwrap_or(0),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write logs as one JSON object per line.
pub fn write_ndjson(path: &Path, logs: &[FrameLog]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in logs {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a log file; blank lines are skipped.
pub fn read_ndjson(path: &Path) -> Result<Vec<FrameLog>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let log = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{}:{}: corrupt frame log: {e}", path.display(), n + 1)))?;
        out.push(log);
    }
    Ok(out)
}

/// Simulate the configured policy over every scene; writes the frame logs
/// and a summary under the output directory.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimSummary> {
    let scenes = cfg.scenes()?;
    let sensing = sense_suite(&scenes, &cfg.sim)?;
    let logs = run_suite(&scenes, &sensing, &cfg.sim)?;
    let summary = SimSummary::of(&cfg.sim, scenes.len(), &logs);
    create_dir(&cfg.output_dir)?;
    write_ndjson(&cfg.output_dir.join(FRAMES_FILE), &logs)?;
    write_json(&cfg.output_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Score every `*.ndjson` file in `logs_dir` (in name order) and write
/// `report.csv` and `report.json` to `out_dir`.
pub fn cmd_eval(logs_dir: &Path, m: &MatchConfig, out_dir: &Path) -> Result<EvalReport> {
    let mut files: Vec<PathBuf> = fs::read_dir(logs_dir)
        .map_err(|e| Error::io(logs_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ndjson"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::NoData(format!("no .ndjson logs in {}", logs_dir.display())));
    }
    let mut logs = Vec::new();
    for f in &files {
        logs.extend(read_ndjson(f)?);
    }
    let report = evaluate_logs(&logs, m)?;
    report.write(out_dir, REPORT_STEM)?;
    Ok(report)
}

/// Fixed-budget sweep; writes `sweep_p1.csv` and `sweep_p1.json`.
pub fn cmd_sweep_p1(cfg: &RunConfig) -> Result<EvalReport> {
    let scenes = cfg.scenes()?;
    let report = sweep_p1(&scenes, &cfg.sim, &cfg.sweep.policies, &cfg.sweep.budgets, &cfg.eval)?;
    report.write(&cfg.output_dir, SWEEP_STEM)?;
    Ok(report)
}

/// Least budget reaching the configured target with the simulated policy.
pub fn cmd_min_bytes_p2(cfg: &RunConfig) -> Result<P2Report> {
    let scenes = cfg.scenes()?;
    let report = min_bytes_p2(&scenes, &cfg.sim, cfg.p2.target())?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(P2_FILE), &report)?;
    Ok(report)
}
