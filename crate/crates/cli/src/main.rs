use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use sracp_core::eval::MatchConfig;
use sracp_core::harness::{self, Overrides, RunConfig};
use sracp_core::protocol::CommPolicy;
use sracp_core::scenario::{ScenarioKind, ScenarioParams};
use sracp_core::selection::GateMode;

/// Risk-aware cooperative perception simulator.
#[derive(Parser)]
#[command(name = "sracp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one scripted scene as JSON.
    SceneGen {
        /// unprotected-left-turn, intersection, merge, head-on, overtake,
        /// straight-baseline or multi-agent
        #[arg(long)]
        kind: ScenarioKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run one policy over the configured scenes; writes frames.ndjson and
    /// summary.json.
    Simulate(RunArgs),
    /// Score frame logs; writes report.csv and report.json.
    Eval {
        /// Directory holding *.ndjson frame logs.
        #[arg(long)]
        logs: PathBuf,
        /// Takes the [eval] section from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report directory; defaults to the logs directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        iou: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        tau: Option<Vec<f64>>,
    },
    /// Fixed-budget sweep of every configured policy and budget.
    SweepP1(RunArgs),
    /// Least budget for the simulated policy to reach a Risk-AP target.
    MinBytesP2 {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        target_ap: Option<f64>,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; built-in defaults when absent.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Simulation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// e.g. sracp-union-a0.5, upper-bound, lower-bound,
    /// fixed-neighbor-equal, random-cell
    #[arg(long)]
    policy: Option<CommPolicy>,
    /// Per-link byte budget.
    #[arg(long)]
    budget_bytes: Option<u64>,
    /// Gate of the sracp policy: s, r or union.
    #[arg(long)]
    gate: Option<GateMode>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        Overrides {
            seed: self.seed,
            policy: self.policy,
            budget_bytes: self.budget_bytes,
            gate: self.gate,
        }
        .apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SceneGen {
            kind,
            seed,
            frames,
            dt,
            out,
        } => {
            let defaults = ScenarioParams::default();
            let params = ScenarioParams {
                frames: frames.unwrap_or(defaults.frames),
                dt: dt.unwrap_or(defaults.dt),
                ..defaults
            };
            let scene = harness::cmd_scene_gen(kind, seed, &params, &out)?;
            println!("wrote {} ({} objects, {} frames) to {}", scene.name, scene.objects.len(), scene.frames, out.display());
        }
        Command::Simulate(args) => {
            let cfg = args.load()?;
            let s = harness::cmd_simulate(&cfg)?;
            println!(
                "{} at {} B: {} scenes, {} ego frames, {:.1} B/frame, {} triggered frames; logs in {}",
                s.policy,
                s.budget_bytes,
                s.scenes,
                s.ego_frames,
                s.ego_bytes_per_frame,
                s.triggered_frames,
                cfg.output_dir.display()
            );
        }
        Command::Eval {
            logs,
            config,
            out,
            iou,
            tau,
        } => {
            let mut m = match &config {
                Some(path) => RunConfig::load(path)?.eval,
                None => MatchConfig::default(),
            };
            if let Some(iou) = iou {
                m.iou_thresholds = iou;
            }
            if let Some(tau) = tau {
                m.risk_thresholds = tau;
            }
            let out = out.unwrap_or_else(|| logs.clone());
            let report = harness::cmd_eval(&logs, &m, &out)?;
            print!("{}", report.to_csv()?);
        }
        Command::SweepP1(args) => {
            let cfg = args.load()?;
            let report = harness::cmd_sweep_p1(&cfg)?;
            print!("{}", report.to_csv()?);
        }
        Command::MinBytesP2 {
            run,
            target_ap,
            theta,
            tau,
        } => {
            let mut cfg = run.load()?;
            cfg.p2.target_ap = target_ap.unwrap_or(cfg.p2.target_ap);
            cfg.p2.theta = theta.unwrap_or(cfg.p2.theta);
            cfg.p2.tau = tau.unwrap_or(cfg.p2.tau);
            cfg.validate()?;
            let r = harness::cmd_min_bytes_p2(&cfg)?;
            match r.min_bytes {
                Some(b) => println!("{} reaches Risk-AP {} (theta {}, tau {}) at {b} B", r.policy, r.target.ap, r.target.theta, r.target.tau),
                None => println!("{} cannot reach Risk-AP {} within the search ceiling", r.policy, r.target.ap),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()).context("sracp failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
