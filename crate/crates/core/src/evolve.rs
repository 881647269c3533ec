//! Mutation-only (mu + lambda) evolution of the linear controller.
//!
//! The evaluation scenarios (initial states, attitude biases and noise
//! streams) are drawn once per run and shared by every individual and every
//! generation, so a parent's fitness never changes and best fitness is
//! monotone.

use nalgebra::{Quaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homography::CameraModel;
use crate::io::{write_atomic, CsvTable};
use crate::quadsim::{ControlCommand, Observation, QuadParams, QuadState, Simulator, Status};

pub const INPUT_NAMES: [&str; 9] = [
    "nu_x_hat", "nu_y_hat", "nu_z_hat", "omega_z_hat", "abs_roll", "abs_pitch", "nu_x_sp", "nu_y_sp", "nu_z_sp",
];
pub const OUTPUT_NAMES: [&str; 4] = ["f0", "phi", "theta", "omega_z"];

/// `c = clamp(M x, -1, 1)` with `x` ordered as [`INPUT_NAMES`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearController {
    pub m: [[f64; 9]; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControllerFile {
    inputs: Vec<String>,
    outputs: Vec<String>,
    /// Row-major 4 x 9.
    matrix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fitness: Option<f64>,
}

impl LinearController {
    pub fn zeros() -> Self {
        Self { m: [[0.0; 9]; 4] }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> Self {
        let mut m = [[0.0; 9]; 4];
        m.iter_mut().flatten().for_each(|v| *v = rng.random_range(-bound..bound));
        Self { m }
    }

    pub fn raw(&self, x: &[f64; 9]) -> [f64; 4] {
        self.m.map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
    }

    pub fn output(&self, x: &[f64; 9]) -> ControlCommand {
        ControlCommand::from_array(self.raw(x))
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }

    pub fn mutate<R: Rng + ?Sized>(&self, rng: &mut R, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        let mut m = self.m;
        m.iter_mut().flatten().for_each(|v| *v += n.sample(rng));
        Self { m }
    }

    pub fn to_json(&self, fitness: Option<f64>) -> Result<String> {
        let f = ControllerFile {
            inputs: INPUT_NAMES.iter().map(|s| s.to_string()).collect(),
            outputs: OUTPUT_NAMES.iter().map(|s| s.to_string()).collect(),
            matrix: self.m.iter().map(|r| r.to_vec()).collect(),
            fitness,
        };
        serde_json::to_string_pretty(&f).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ControllerFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if f.inputs != INPUT_NAMES || f.outputs != OUTPUT_NAMES {
            return Err(Error::Format("controller input/output order does not match".into()));
        }
        if f.matrix.len() != 4 || f.matrix.iter().any(|r| r.len() != 9) {
            return Err(Error::Dimension {
                expected: 36,
                got: f.matrix.iter().map(Vec::len).sum(),
            });
        }
        let mut c = Self::zeros();
        for (r, row) in f.matrix.iter().enumerate() {
            c.m[r].copy_from_slice(row);
        }
        if !c.is_finite() {
            return Err(Error::NonFinite("controller matrix".into()));
        }
        Ok(c)
    }

    pub fn save(&self, path: &std::path::Path, fitness: Option<f64>) -> Result<()> {
        write_atomic(path, self.to_json(fitness)?.as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Controller input vector.
pub fn controller_inputs(est: &[f64; 4], abs_roll: f64, abs_pitch: f64, sp: &[f64; 3]) -> [f64; 9] {
    [est[0], est[1], est[2], est[3], abs_roll, abs_pitch, sp[0], sp[1], sp[2]]
}

/// Hover, three descents and twelve horizontal setpoints.
pub fn setpoint_suite() -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]];
    for m in [0.2, 0.5, 1.0] {
        out.push([0.0, 0.0, -m]);
    }
    for axis in 0..2 {
        for m in [0.2, 0.5, 1.0] {
            for s in [1.0, -1.0] {
                let mut sp = [0.0; 3];
                sp[axis] = s * m;
                out.push(sp);
            }
        }
    }
    out
}

/// Hover and the +-0.2, +-0.5 subset (descents only downward).
pub fn desk_setpoints() -> Vec<[f64; 3]> {
    setpoint_suite().into_iter().filter(|sp| sp.iter().all(|v| v.abs() < 0.75)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub population: usize,
    pub generations: usize,
    pub sigma: f64,
    pub init_bound: f64,
    pub setpoints: Vec<[f64; 3]>,
    pub repeats: usize,
    pub steps: usize,
    /// Vertical weight when the setpoint has no vertical component.
    pub level_z_weight: f64,
    pub attitude_bias: f64,
    pub position_spread: f64,
    pub start_height: f64,
    pub level_height: f64,
    pub state_spread: f64,
    pub quad: QuadParams,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EvolutionConfig {
    /// Population, budget and setpoints of the full-scale run.
    pub fn full() -> Self {
        Self {
            population: 100,
            generations: 25_000,
            sigma: 0.001,
            init_bound: 0.1,
            setpoints: setpoint_suite(),
            repeats: 10,
            steps: 1000,
            level_z_weight: 10.0,
            attitude_bias: 0.001,
            position_spread: 1.0,
            start_height: 2.0,
            level_height: 1.5,
            state_spread: 0.02,
            quad: QuadParams::default(),
        }
    }

    /// Single-core budget.
    pub fn desk() -> Self {
        Self {
            population: 20,
            generations: 200,
            sigma: 0.02,
            setpoints: desk_setpoints(),
            repeats: 1,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population == 0 || self.repeats == 0 || self.steps == 0 || self.setpoints.is_empty() {
            return Err(Error::Config("population, repeats, steps and setpoints must be non-empty".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config("sigma must be non-negative".into()));
        }
        self.quad.validate()
    }
}

/// Initial conditions and disturbances of one evaluation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub setpoint: [f64; 3],
    pub state: QuadState,
    /// Added to |roll| and |pitch| before the controller.
    pub bias: [f64; 2],
    pub noise_seed: u64,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Every (setpoint, repeat) episode of a run; biases are shared per repeat.
pub fn scenarios(cfg: &EvolutionConfig, seed: u64) -> Vec<Scenario> {
    let mut out = Vec::new();
    for r in 0..cfg.repeats {
        let mut brng = ChaCha8Rng::seed_from_u64(mix(seed, 0xB1A5 + r as u64));
        let b = cfg.attitude_bias;
        let bias = if b > 0.0 {
            [brng.random_range(-b..b), brng.random_range(-b..b)]
        } else {
            [0.0; 2]
        };
        for (k, sp) in cfg.setpoints.iter().enumerate() {
            let key = mix(mix(seed, r as u64 + 1), k as u64 + 1);
            let mut rng = ChaCha8Rng::seed_from_u64(key);
            let u = |rng: &mut ChaCha8Rng, a: f64| if a > 0.0 { rng.random_range(-a..a) } else { 0.0 };
            let ps = cfg.position_spread;
            let mut p = Vector3::new(u(&mut rng, ps), u(&mut rng, ps), cfg.start_height + u(&mut rng, ps));
            if sp[2] == 0.0 {
                p[2] = cfg.level_height;
            }
            let s = cfg.state_spread;
            let q = Quaternion::new(1.0 + u(&mut rng, s), u(&mut rng, s), u(&mut rng, s), u(&mut rng, s)).normalize();
            let v = Vector3::new(u(&mut rng, s), u(&mut rng, s), u(&mut rng, s));
            let omega = Vector3::new(u(&mut rng, s), u(&mut rng, s), u(&mut rng, s));
            out.push(Scenario {
                setpoint: *sp,
                state: QuadState {
                    p,
                    q,
                    v,
                    omega,
                    motors: Vector4::repeat(cfg.quad.hover_speed()),
                },
                bias,
                noise_seed: mix(key, 0x5EED),
            });
        }
    }
    out
}

/// Per-step record of an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeStep {
    pub t: f64,
    pub state: QuadState,
    pub obs: Observation,
    pub cmd: ControlCommand,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub fitness: f64,
    pub status: Status,
    pub steps: Vec<EpisodeStep>,
}

/// Something that maps the current observation to a command.
pub trait Policy {
    fn command(&mut self, inputs: &[f64; 9], obs: &Observation) -> ControlCommand;
}

impl Policy for LinearController {
    fn command(&mut self, inputs: &[f64; 9], _obs: &Observation) -> ControlCommand {
        self.output(inputs)
    }
}

/// Per-step fitness term.
pub fn step_error(sp: &[f64; 3], obs: &Observation, level_z_weight: f64) -> f64 {
    let wz = if sp[2] == 0.0 { level_z_weight } else { 1.0 };
    let e = obs.estimate.nu;
    (sp[0] - e[0]).powi(2) + (sp[1] - e[1]).powi(2) + wz * (sp[2] - obs.nu_z_world).powi(2) + obs.estimate.omega_z.powi(2)
}

/// Fly one scenario. Termination on crash or out-of-bounds keeps the error
/// accumulated so far.
pub fn run_episode(
    policy: &mut dyn Policy,
    sc: &Scenario,
    cfg: &EvolutionConfig,
    camera: &CameraModel,
    record: bool,
) -> Result<Episode> {
    let mut sim = Simulator::new(cfg.quad.clone(), camera.clone(), sc.state)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.noise_seed);
    let mut fitness = 0.0;
    let mut status = sim.status();
    let mut steps = Vec::with_capacity(if record { cfg.steps } else { 0 });
    for _ in 0..cfg.steps {
        if status != Status::Flying {
            break;
        }
        let obs = sim.observe(Some(&mut rng))?;
        fitness += step_error(&sc.setpoint, &obs, cfg.level_z_weight);
        let (roll, pitch, _) = sim.state.euler();
        let x = controller_inputs(&obs.estimate.as_array(), roll.abs() + sc.bias[0], pitch.abs() + sc.bias[1], &sc.setpoint);
        let cmd = policy.command(&x, &obs);
        if record {
            steps.push(EpisodeStep {
                t: sim.t,
                state: sim.state,
                obs,
                cmd,
            });
        }
        status = match sim.step(&cmd) {
            Ok(s) => s,
            Err(Error::NonFinite(_)) => Status::Crashed,
            Err(e) => return Err(e),
        };
    }
    Ok(Episode { fitness, status, steps })
}

/// Mean episode fitness over the scenarios.
pub fn evaluate_fitness(
    policy_factory: &(dyn Fn() -> Box<dyn Policy> + Sync),
    scenarios: &[Scenario],
    cfg: &EvolutionConfig,
    camera: &CameraModel,
) -> Result<f64> {
    let total = scenarios
        .iter()
        .map(|sc| run_episode(&mut *policy_factory(), sc, cfg, camera, false).map(|e| e.fitness))
        .collect::<Result<Vec<_>>>()?;
    Ok(total.iter().sum::<f64>() / scenarios.len() as f64)
}

fn controller_fitness(c: &LinearController, scenarios: &[Scenario], cfg: &EvolutionConfig, camera: &CameraModel) -> Result<f64> {
    let mut sum = 0.0;
    for sc in scenarios {
        let mut p = c.clone();
        sum += run_episode(&mut p, sc, cfg, camera, false)?.fitness;
    }
    let f = sum / scenarios.len() as f64;
    Ok(if f.is_finite() { f } else { f64::INFINITY })
}

pub const EVOLUTION_LOG_HEADER: [&str; 3] = ["generation", "best_F", "median_F"];

#[derive(Debug, Clone)]
pub struct EvolutionOutcome {
    pub best: LinearController,
    pub best_fitness: f64,
    /// `(best, median)` per generation; entry 0 is the initial population.
    pub history: Vec<(f64, f64)>,
    pub log: CsvTable,
    pub scenarios: Vec<Scenario>,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Run the genetic algorithm. `progress` is called after every generation.
pub fn evolve(
    cfg: &EvolutionConfig,
    seed: u64,
    camera: &CameraModel,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<EvolutionOutcome> {
    cfg.validate()?;
    let scen = scenarios(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x6A));
    let init: Vec<LinearController> = (0..cfg.population)
        .map(|_| LinearController::random(&mut rng, cfg.init_bound))
        .collect();
    let eval = |cs: &[LinearController]| -> Result<Vec<f64>> {
        cs.par_iter().map(|c| controller_fitness(c, &scen, cfg, camera)).collect()
    };
    let fit = eval(&init)?;
    let mut pop: Vec<(LinearController, f64)> = init.into_iter().zip(fit).collect();
    let sort = |p: &mut Vec<(LinearController, f64)>| p.sort_by(|a, b| a.1.total_cmp(&b.1));
    sort(&mut pop);
    let mut log = CsvTable::new(&EVOLUTION_LOG_HEADER);
    let mut history = Vec::with_capacity(cfg.generations + 1);
    let record = |g: usize, pop: &[(LinearController, f64)], log: &mut CsvTable, h: &mut Vec<(f64, f64)>| {
        let fs: Vec<f64> = pop.iter().map(|p| p.1).collect();
        let (b, m) = (fs[0], median(&fs));
        log.push_row(&[g as f64, b, m]);
        h.push((b, m));
        (b, m)
    };
    let (b, m) = record(0, &pop, &mut log, &mut history);
    progress(0, b, m);
    for g in 1..=cfg.generations {
        let kids: Vec<LinearController> = pop.iter().map(|(c, _)| c.mutate(&mut rng, cfg.sigma)).collect();
        let fit = eval(&kids)?;
        pop.extend(kids.into_iter().zip(fit));
        // stable sort keeps parents ahead of equally fit offspring
        sort(&mut pop);
        pop.truncate(cfg.population);
        let (b, m) = record(g, &pop, &mut log, &mut history);
        progress(g, b, m);
    }
    Ok(EvolutionOutcome {
        best: pop[0].0.clone(),
        best_fitness: pop[0].1,
        history,
        log,
        scenarios: scen,
    })
}

/// Mean absolute tracking error per axis over the final `tail` control
/// steps of each scenario, from noise-free ground truth (`nu_body` x/y and
/// world vertical). Descents end at the altitude floor and fast horizontal
/// flight at the arena edge; those are scored over their last steps (all of
/// them when shorter than `tail`). Any other early end scores infinity.
pub fn terminal_errors(
    c: &LinearController,
    scenarios: &[Scenario],
    cfg: &EvolutionConfig,
    camera: &CameraModel,
    tail: usize,
) -> Result<Vec<[f64; 3]>> {
    scenarios
        .par_iter()
        .map(|sc| {
            let mut p = c.clone();
            let ep = run_episode(&mut p, sc, cfg, camera, true)?;
            let landed = sc.setpoint[2] < 0.0 && ep.status == Status::Crashed;
            let left = sc.setpoint[2] == 0.0 && ep.status == Status::OutOfBounds;
            if ep.steps.is_empty() || !(ep.status == Status::Flying || landed || left) {
                return Ok([f64::INFINITY; 3]);
            }
            let last = &ep.steps[ep.steps.len() - tail.min(ep.steps.len())..];
            let mut e = [0.0; 3];
            for s in last {
                let gt = [s.obs.nu_body[0], s.obs.nu_body[1], s.obs.nu_z_world];
                for k in 0..3 {
                    e[k] += (gt[k] - sc.setpoint[k]).abs();
                }
            }
            Ok(e.map(|v| v / last.len() as f64))
        })
        .collect()
}

/// Heights of a landing episode after `transient_s`, and whether they
/// never increase.
pub fn landing_is_monotone(
    c: &LinearController,
    sc: &Scenario,
    cfg: &EvolutionConfig,
    camera: &CameraModel,
    transient_s: f64,
) -> Result<(bool, Vec<f64>)> {
    let ep = run_episode(&mut c.clone(), sc, cfg, camera, true)?;
    let z: Vec<f64> = ep.steps.iter().filter(|s| s.t >= transient_s).map(|s| s.state.p[2]).collect();
    Ok((z.len() > 1 && z.windows(2).all(|w| w[1] <= w[0]), z))
}
