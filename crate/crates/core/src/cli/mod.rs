//! Run configuration and the command implementations behind the binary.

pub mod bench;
pub mod serve;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::control::{run_replay, run_sim, ControllerKind, FlyConfig, PiController, SetpointSchedule};
use crate::error::{Error, Result};
use crate::events::{load_events, load_poses, SensorGeometry};
use crate::evolve::{evolve, scenarios, terminal_errors, EvolutionConfig, LinearController};
use crate::homography::CameraModel;
use crate::io::write_atomic;
use crate::snn::checkpoint::load_checkpoint;
use crate::snn::network::{NetworkConfig, NetworkWeights};
use crate::train::{evaluate_clips, evaluate_recording, recording_clips, run_training, synthetic_clips, TrainConfig, Trainer};

pub use bench::{run_bench, BenchConfig, BenchReport};
pub use serve::{serve, ClientMessage, ServeConfig, ServeSession, TelemetryMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    TrainVision,
    EvalVision,
    Evolve,
    Fly,
    Bench,
    Serve,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::TrainVision,
        Command::EvalVision,
        Command::Evolve,
        Command::Fly,
        Command::Bench,
        Command::Serve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::TrainVision => "train-vision",
            Command::EvalVision => "eval-vision",
            Command::Evolve => "evolve",
            Command::Fly => "fly",
            Command::Bench => "bench",
            Command::Serve => "serve",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub events: Option<PathBuf>,
    pub poses: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub controller: Option<PathBuf>,
    /// Output directory when `--out` is not given.
    pub logs: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlyMode {
    #[default]
    Sim,
    Replay,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerChoice {
    #[default]
    Evolved,
    Pi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleEntry {
    pub t: f64,
    pub nu: [f64; 3],
    #[serde(default)]
    pub omega_z: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlySection {
    pub mode: FlyMode,
    pub controller: ControllerChoice,
    /// Empty means hover.
    pub schedule: Vec<ScheduleEntry>,
    pub sim: FlyConfig,
}

impl FlySection {
    pub fn schedule(&self) -> SetpointSchedule {
        if self.schedule.is_empty() {
            return SetpointSchedule::constant([0.0; 3], 0.0);
        }
        SetpointSchedule {
            segments: self.schedule.iter().map(|e| (e.t, e.nu, e.omega_z)).collect(),
        }
    }
}

/// Everything a run reads from its TOML file. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub train: TrainConfig,
    pub evolve: EvolutionConfig,
    pub fly: FlySection,
    pub bench: BenchConfig,
    pub serve: ServeConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.evolve.validate()?;
        self.fly.sim.coeffs.validate()?;
        self.fly.sim.quad.validate()?;
        if !(self.fly.sim.duration_s > 0.0) {
            return Err(Error::Config("fly.sim.duration_s must be positive".into()));
        }
        if self.fly.schedule.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(Error::Config("fly.schedule must be sorted by t".into()));
        }
        self.bench.validate()?;
        self.serve.validate()
    }
}

fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::MissingAsset(format!("paths.{what} is required")))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

/// Weights for commands that can run without a checkpoint.
fn weights_or_random(cfg: &RunConfig, network: &NetworkConfig, seed: u64) -> Result<(NetworkWeights, bool)> {
    match &cfg.paths.checkpoint {
        Some(p) => Ok((load_checkpoint(p)?.0, true)),
        None => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            Ok((NetworkWeights::random(network, &mut rng)?, false))
        }
    }
}

/// Run one command. Outputs go to `out`; a JSON report is returned and
/// also written as `report.json`.
pub fn execute(cmd: Command, cfg: &RunConfig, seed: u64, out: &Path) -> Result<serde_json::Value> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    log::info!("{} seed {} -> {}", cmd.name(), seed, out.display());
    let report = match cmd {
        Command::TrainVision => train_vision(cfg, seed, out)?,
        Command::EvalVision => eval_vision(cfg, seed, out)?,
        Command::Evolve => evolve_cmd(cfg, seed, out)?,
        Command::Fly => fly(cfg, seed, out)?,
        Command::Bench => {
            let (w, trained) = weights_or_random(cfg, &NetworkConfig::default(), seed)?;
            let r = run_bench(&w, &cfg.bench, seed)?;
            let mut v = serde_json::to_value(&r).map_err(|e| Error::Format(e.to_string()))?;
            v["trained_checkpoint"] = json!(trained);
            v
        }
        Command::Serve => {
            let evolved = cfg.paths.controller.as_deref().map(LinearController::load).transpose()?;
            let s = serve::serve_forever(&cfg.serve, &cfg.fly.sim, evolved, seed, out)?;
            json!({ "sessions": s })
        }
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

fn train_vision(cfg: &RunConfig, seed: u64, out: &Path) -> Result<serde_json::Value> {
    let started = Instant::now();
    let tc = &cfg.train;
    let (train, val) = match &cfg.paths.events {
        Some(ev) => {
            let events = load_events(ev)?;
            let poses = cfg.paths.poses.as_deref().map(load_poses).transpose()?;
            let clips = recording_clips(
                &events,
                poses.as_deref(),
                &SensorGeometry::default(),
                &CameraModel::default(),
                tc.clip_windows,
            )?;
            if clips.is_empty() {
                return Err(Error::MissingAsset("the recording is shorter than one clip".into()));
            }
            let labelled = |c: &crate::train::Clip| c.flows.iter().flatten().flatten().all(|v| v.is_finite());
            let n_val = if poses.is_some() { (clips.len() / 8).max(1).min(clips.len() - 1) } else { 0 };
            let (tr, va) = clips.split_at(clips.len() - n_val);
            (tr.to_vec(), va.iter().filter(|c| labelled(c)).cloned().collect::<Vec<_>>())
        }
        None => (
            synthetic_clips(tc.train_clips, tc.clip_windows, tc.max_flow, seed ^ 0x7472_6169_6e00)?,
            synthetic_clips(tc.val_clips, tc.clip_windows, tc.max_flow, seed ^ 0x0076_616c_0000)?,
        ),
    };
    let mut trainer = match &cfg.paths.checkpoint {
        Some(p) if p.exists() => {
            let (w, snap) = load_checkpoint(p)?;
            Trainer::resume(tc.clone(), &w, snap.as_ref(), seed)?
        }
        _ => Trainer::new(tc.clone(), seed)?,
    };
    let start_step = trainer.step_count();
    let o = run_training(&mut trainer, &train, &val, Some(out), started)?;
    Ok(json!({
        "command": "train-vision",
        "start_step": start_step,
        "steps": o.steps,
        "seconds": o.seconds,
        "final_epe": o.final_epe,
        "best_epe": o.best_epe,
        "train_clips": train.len(),
        "val_clips": val.len(),
    }))
}

fn eval_vision(cfg: &RunConfig, seed: u64, out: &Path) -> Result<serde_json::Value> {
    let (weights, _) = load_checkpoint(require(&cfg.paths.checkpoint, "checkpoint")?)?;
    let warmup = cfg.train.warmup_windows;
    let report = match &cfg.paths.events {
        Some(ev) => {
            let poses = load_poses(require(&cfg.paths.poses, "poses")?)?;
            let events = load_events(ev)?;
            evaluate_recording(&weights, &events, &poses, &CameraModel::default(), &SensorGeometry::default(), warmup)?
        }
        None => {
            let tc = &cfg.train;
            let clips = synthetic_clips(tc.val_clips, tc.clip_windows, tc.max_flow, seed ^ 0x0076_616c_0000)?;
            evaluate_clips(&weights, &clips, warmup)?
        }
    };
    report.trace.write(&out.join("eval_trace.csv"))?;
    Ok(json!({
        "command": "eval-vision",
        "epe_mean_px_per_window": report.mean,
        "epe_per_corner": report.per_corner,
        "scored_windows": report.count,
        "windows": report.trace.rows(),
    }))
}

fn evolve_cmd(cfg: &RunConfig, seed: u64, out: &Path) -> Result<serde_json::Value> {
    let cam = CameraModel::default();
    let started = Instant::now();
    let ec = &cfg.evolve;
    let every = (ec.generations / 20).max(1);
    let o = evolve(ec, seed, &cam, |g, b, m| {
        if g % every == 0 {
            log::info!("generation {g} best {b:.4} median {m:.4}");
        }
    })?;
    o.log.write(&out.join("evolution_log.csv"))?;
    o.best.save(&out.join("controller.json"), Some(o.best_fitness))?;
    let held_out = scenarios(ec, seed.wrapping_add(1));
    let errs = terminal_errors(&o.best, &held_out, ec, &cam, 50)?;
    let per_setpoint: Vec<_> = held_out
        .iter()
        .zip(&errs)
        .map(|(s, e)| json!({ "setpoint": s.setpoint, "terminal_abs_error": e }))
        .collect();
    Ok(json!({
        "command": "evolve",
        "best_fitness": o.best_fitness,
        "generations": ec.generations,
        "seconds": started.elapsed().as_secs_f64(),
        "held_out": per_setpoint,
    }))
}

fn fly(cfg: &RunConfig, seed: u64, out: &Path) -> Result<serde_json::Value> {
    let f = &cfg.fly;
    let schedule = f.schedule();
    match f.mode {
        FlyMode::Sim => {
            let kind = match f.controller {
                ControllerChoice::Evolved => {
                    ControllerKind::Evolved(LinearController::load(require(&cfg.paths.controller, "controller")?)?)
                }
                ControllerChoice::Pi => ControllerKind::Pi(PiController::default()),
            };
            let run = run_sim(&f.sim, kind, &schedule, seed)?;
            run.telemetry.write(&out.join("fly_telemetry.csv"))?;
            let last = run.ticks.last().map(|k| k.state.p);
            Ok(json!({
                "command": "fly",
                "mode": "sim",
                "ticks": run.ticks.len(),
                "status": run.status,
                "final_position": last.map(|p| [p[0], p[1], p[2]]),
            }))
        }
        FlyMode::Replay => {
            if f.controller != ControllerChoice::Evolved {
                return Err(Error::Config("replay mode runs the merged evolved controller".into()));
            }
            let (weights, _) = load_checkpoint(require(&cfg.paths.checkpoint, "checkpoint")?)?;
            let controller = LinearController::load(require(&cfg.paths.controller, "controller")?)?;
            let events = load_events(require(&cfg.paths.events, "events")?)?;
            let poses = cfg.paths.poses.as_deref().map(load_poses).transpose()?.unwrap_or_default();
            let run = run_replay(
                &weights,
                &controller,
                &events,
                &poses,
                &SensorGeometry::default(),
                &schedule,
                &f.sim.coeffs,
            )?;
            run.telemetry.write(&out.join("replay_telemetry.csv"))?;
            Ok(json!({
                "command": "fly",
                "mode": "replay",
                "windows": run.windows,
                "max_merge_error": run.max_merge_error,
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_valid() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.evolve, EvolutionConfig::desk());
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_toml("[train]\nstepz = 3\n").unwrap_err().to_string();
        assert!(e.contains("stepz"), "{e}");
        let e = RunConfig::from_toml("bogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
    }

    #[test]
    fn sections_parse() {
        let text = r#"
seed = 5
[paths]
controller = "c.json"
[train]
steps = 10
[evolve]
population = 4
generations = 2
[fly]
mode = "sim"
controller = "pi"
schedule = [{ t = 0.0, nu = [0.0, 0.0, 0.0] }, { t = 2.0, nu = [0.2, 0.0, 0.0], omega_z = 0.1 }]
[fly.sim]
duration_s = 3.0
frisbee = true
[bench]
windows = 10
[serve]
bind = "127.0.0.1:0"
"#;
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.seed, Some(5));
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.evolve.population, 4);
        assert_eq!(c.fly.controller, ControllerChoice::Pi);
        assert_eq!(c.fly.schedule().at(3.0), ([0.2, 0.0, 0.0], 0.1));
        assert!(c.fly.sim.frisbee);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nbatch = 0\n").is_err());
        assert!(RunConfig::from_toml("[fly.sim]\nduration_s = -1.0\n").is_err());
        let unsorted = "[fly]\nschedule = [{ t = 2.0, nu = [0.0, 0.0, 0.0] }, { t = 1.0, nu = [0.0, 0.0, 0.0] }]\n";
        assert!(RunConfig::from_toml(unsorted).is_err());
    }

    #[test]
    fn missing_assets_are_explicit() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let e = execute(Command::EvalVision, &cfg, 1, dir.path()).unwrap_err();
        assert!(matches!(e, Error::MissingAsset(_)), "{e}");
        let e = execute(Command::Fly, &cfg, 1, dir.path()).unwrap_err();
        assert!(matches!(e, Error::MissingAsset(_)), "{e}");
    }
}
