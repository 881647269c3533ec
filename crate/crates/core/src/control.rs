//! Runtime closed loop: observable smoothing, the merged spike-to-command
//! decoder, a PI baseline, frisbee setpoint rotation and the two run modes.

use std::sync::Arc;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{encode_input_spikes, preprocess_stream, window_and_route_until, Event, PoseSample, SensorGeometry, WINDOW_US};
use crate::evolve::{controller_inputs, LinearController};
use crate::homography::{CameraModel, FlowUnit, ObservableModel, UnitContext};
use crate::io::CsvTable;
use crate::quadsim::{ControlCommand, Observation, QuadParams, QuadState, Simulator, Status};
use crate::snn::network::{CompiledNetwork, NetworkWeights, VisionNetwork};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeCoeffs {
    pub alpha: [f64; 4],
    pub beta: [f64; 4],
    /// Scale from controller output to the autopilot's units.
    pub command_gain: f64,
    /// PI gains, per output channel (thrust, roll, pitch, yaw).
    pub p: [f64; 4],
    pub i: [f64; 4],
    pub yaw_dt: f64,
}

impl Default for RuntimeCoeffs {
    fn default() -> Self {
        Self {
            alpha: [0.90, 0.90, 0.95, 0.90],
            beta: [0.9, 0.9, 1.0, 1.0],
            command_gain: 0.3,
            p: [0.10, 0.06, 0.06, 4.0],
            i: [0.0001, 0.0003, 0.0003, 0.0],
            yaw_dt: 0.005,
        }
    }
}

impl RuntimeCoeffs {
    pub fn validate(&self) -> Result<()> {
        if self.alpha.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::Config("smoothing alpha must lie in (0, 1]".into()));
        }
        let all = self.beta.iter().chain(&self.p).chain(&self.i).chain([&self.command_gain, &self.yaw_dt]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("runtime coefficients must be finite".into()));
        }
        Ok(())
    }
}

/// `y <- alpha*y + (1 - alpha)*beta*x`, per component.
pub fn smooth_scale(raw: &[f64; 4], prev: &[f64; 4], alpha: &[f64; 4], beta: &[f64; 4]) -> [f64; 4] {
    std::array::from_fn(|k| alpha[k] * prev[k] + (1.0 - alpha[k]) * beta[k] * raw[k])
}

/// Rotate the horizontal setpoint by `-psi`.
pub fn frisbee_setpoint(sp: &[f64; 3], psi: f64) -> [f64; 3] {
    let (s, c) = psi.sin_cos();
    [c * sp[0] + s * sp[1], -s * sp[0] + c * sp[1], sp[2]]
}

/// Observable errors `sp - est` to the output channel order. Pitch moves
/// the body along +x, roll along -y, thrust along +z.
pub fn channel_errors(nu_err: &[f64; 3], omega_err: f64) -> [f64; 4] {
    [nu_err[2], -nu_err[1], nu_err[0], omega_err]
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PiController {
    pub integrator: [f64; 4],
}

impl PiController {
    /// `e` in channel order. A saturated channel does not integrate.
    pub fn step(&mut self, e: &[f64; 4], p: &[f64; 4], i: &[f64; 4]) -> ControlCommand {
        let mut c = [0.0; 4];
        for k in 0..4 {
            let trial = p[k] * e[k] + i[k] * (self.integrator[k] + e[k]);
            if trial.abs() < 1.0 {
                self.integrator[k] += e[k];
            }
            c[k] = p[k] * e[k] + i[k] * self.integrator[k];
        }
        ControlCommand::from_array(c)
    }

    pub fn reset(&mut self) {
        self.integrator = [0.0; 4];
    }
}

/// Turns the yaw-rate command into a yaw-angle command.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct YawIntegrator {
    pub psi: f64,
}

impl YawIntegrator {
    pub fn step(&mut self, omega_c: f64, dt: f64) -> f64 {
        self.psi += dt * omega_c;
        self.psi
    }
}

type Mat = Vec<Vec<f64>>;

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect())
        .collect()
}

fn matvec(a: &Mat, x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// Spikes to command as one matrix.
///
/// With `D` the block-diagonal corner decode (8 x 4P), `U` the unit change
/// to normalized flow, `L` the 4 x 8 least squares, `B` camera to body and
/// `S = diag((1 - alpha) beta)`, the smoothed observables follow
/// `y_t = alpha y_{t-1} + G s_t` with `G = S B L U D`, and the command is
/// `W s_t + M_obs alpha y_{t-1} + M_rest r_t` with `W = M_obs G`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedDecoder {
    /// 4 x 4P.
    pub merged: Mat,
    /// 4 x 4P observable map `G`.
    pub observable: Mat,
    pub decode: Mat,
    pub least_squares: Mat,
    pub to_body: Mat,
    pub controller: LinearController,
    pub alpha: [f64; 4],
    pub beta: [f64; 4],
    pub pooling: usize,
    /// Smoothed observables `y`.
    pub state: [f64; 4],
}

impl MergedDecoder {
    pub fn new(weights: &NetworkWeights, model: &ObservableModel, cam: &CameraModel, controller: &LinearController, alpha: [f64; 4], beta: [f64; 4]) -> Result<Self> {
        let p = weights.decode.cols;
        if weights.decode.data.len() != 2 * p {
            return Err(Error::Dimension {
                expected: 2 * p,
                got: weights.decode.data.len(),
            });
        }
        let f = UnitContext::default().factor(FlowUnit::PxPerMs, FlowUnit::NormalizedPerSecond);
        let mut decode = vec![vec![0.0; 4 * p]; 8];
        for c in 0..4 {
            for r in 0..2 {
                for j in 0..p {
                    decode[2 * c + r][c * p + j] = f[r] * weights.decode.get(r, j);
                }
            }
        }
        let least_squares: Mat = model.inverse.iter().map(|r| r.to_vec()).collect();
        let rt = cam.r_cb.transpose();
        let mut to_body = vec![vec![0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                to_body[i][j] = rt[(i, j)];
            }
        }
        to_body[3][3] = rt[(2, 2)];
        let s: Mat = (0..4)
            .map(|i| (0..4).map(|j| if i == j { (1.0 - alpha[i]) * beta[i] } else { 0.0 }).collect())
            .collect();
        let observable = matmul(&matmul(&matmul(&s, &to_body), &least_squares), &decode);
        let m_obs: Mat = controller.m.iter().map(|r| r[..4].to_vec()).collect();
        let merged = matmul(&m_obs, &observable);
        Ok(Self {
            merged,
            observable,
            decode,
            least_squares,
            to_body,
            controller: controller.clone(),
            alpha,
            beta,
            pooling: p,
            state: [0.0; 4],
        })
    }

    pub fn reset(&mut self) {
        self.state = [0.0; 4];
    }

    fn concat(&self, spikes: &[Vec<u8>; 4]) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(4 * self.pooling);
        for s in spikes {
            if s.len() != self.pooling {
                return Err(Error::Dimension {
                    expected: self.pooling,
                    got: s.len(),
                });
            }
            x.extend(s.iter().map(|&b| b as f64));
        }
        Ok(x)
    }

    /// Affine term: recursive smoothing part plus attitude and setpoint.
    pub fn bias(&self, rest: &[f64; 5]) -> [f64; 4] {
        std::array::from_fn(|r| {
            let m = &self.controller.m[r];
            (0..4).map(|k| m[k] * self.alpha[k] * self.state[k]).sum::<f64>() + (0..5).map(|k| m[4 + k] * rest[k]).sum::<f64>()
        })
    }

    /// One tick; `rest = [|phi|, |theta|, sp_x, sp_y, sp_z]`. Returns the
    /// unclamped command.
    pub fn step(&mut self, spikes: &[Vec<u8>; 4], rest: &[f64; 5]) -> Result<[f64; 4]> {
        let x = self.concat(spikes)?;
        let b = self.bias(rest);
        let w = matvec(&self.merged, &x);
        let g = matvec(&self.observable, &x);
        for k in 0..4 {
            self.state[k] = self.alpha[k] * self.state[k] + g[k];
        }
        Ok(std::array::from_fn(|k| w[k] + b[k]))
    }

    /// The same tick computed stage by stage, from `prev` smoothed
    /// observables. Returns `(raw command, smoothed observables)`.
    pub fn sequential(&self, spikes: &[Vec<u8>; 4], prev: &[f64; 4], rest: &[f64; 5]) -> Result<([f64; 4], [f64; 4])> {
        let x = self.concat(spikes)?;
        let flows = matvec(&self.decode, &x);
        let cam_obs = matvec(&self.least_squares, &flows);
        let body = matvec(&self.to_body, &cam_obs);
        let y = smooth_scale(&[body[0], body[1], body[2], body[3]], prev, &self.alpha, &self.beta);
        let input = [y[0], y[1], y[2], y[3], rest[0], rest[1], rest[2], rest[3], rest[4]];
        Ok((self.controller.raw(&input), y))
    }
}

/// Piecewise-constant setpoints: `(t_start, nu, omega_z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointSchedule {
    pub segments: Vec<(f64, [f64; 3], f64)>,
}

impl SetpointSchedule {
    pub fn constant(nu: [f64; 3], omega_z: f64) -> Self {
        Self {
            segments: vec![(0.0, nu, omega_z)],
        }
    }

    pub fn at(&self, t: f64) -> ([f64; 3], f64) {
        self.segments
            .iter()
            .rev()
            .find(|s| s.0 <= t)
            .or(self.segments.first())
            .map_or(([0.0; 3], 0.0), |s| (s.1, s.2))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControllerKind {
    Evolved(LinearController),
    Pi(PiController),
}

impl ControllerKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerKind::Evolved(_) => "evolved",
            ControllerKind::Pi(_) => "pi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlyConfig {
    pub duration_s: f64,
    /// Smooth and scale the observables before the controller.
    pub smooth: bool,
    pub frisbee: bool,
    pub initial_height: f64,
    pub noise: bool,
    pub coeffs: RuntimeCoeffs,
    pub quad: QuadParams,
}

impl Default for FlyConfig {
    fn default() -> Self {
        Self {
            duration_s: 20.0,
            smooth: false,
            frisbee: false,
            initial_height: 1.5,
            noise: true,
            coeffs: RuntimeCoeffs::default(),
            quad: QuadParams::default(),
        }
    }
}

pub const FLY_HEADER: [&str; 32] = [
    "mode", "t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz", "nu_x_hat",
    "nu_y_hat", "nu_z_hat", "omega_z_hat", "cmd_f0", "cmd_phi", "cmd_theta", "cmd_omega_z", "sp_x", "sp_y",
    "sp_z", "sp_omega_z", "nu_x_gt", "nu_y_gt", "nu_z_gt", "yaw", "status",
];

/// One 50 Hz tick of the simulated loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tick {
    pub t: f64,
    pub state: QuadState,
    pub obs: Observation,
    /// Observables the controller saw (smoothed if enabled).
    pub used: [f64; 4],
    /// Setpoint after frisbee rotation.
    pub setpoint: [f64; 3],
    pub omega_sp: f64,
    pub cmd: ControlCommand,
    pub status: Status,
}

/// Simulated-observables closed loop. Also driven by the serve endpoint.
#[derive(Debug, Clone)]
pub struct SimSession {
    pub config: FlyConfig,
    pub controller: ControllerKind,
    pub sim: Simulator,
    pub setpoint: [f64; 3],
    pub omega_sp: f64,
    smoothed: [f64; 4],
    rng: ChaCha8Rng,
    seed: u64,
    camera: CameraModel,
}

impl SimSession {
    pub fn new(config: FlyConfig, controller: ControllerKind, camera: CameraModel, seed: u64) -> Result<Self> {
        config.coeffs.validate()?;
        let state = QuadState::hover(&config.quad, Vector3::new(0.0, 0.0, config.initial_height));
        let sim = Simulator::new(config.quad.clone(), camera.clone(), state)?;
        Ok(Self {
            config,
            controller,
            sim,
            setpoint: [0.0; 3],
            omega_sp: 0.0,
            smoothed: [0.0; 4],
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
            camera,
        })
    }

    pub fn reset(&mut self) -> Result<()> {
        *self = Self::new(self.config.clone(), self.controller.clone(), self.camera.clone(), self.seed)?;
        if let ControllerKind::Pi(p) = &mut self.controller {
            p.reset();
        }
        Ok(())
    }

    pub fn set_controller(&mut self, kind: ControllerKind) {
        self.controller = kind;
        self.smoothed = [0.0; 4];
    }

    pub fn status(&self) -> Status {
        self.sim.status()
    }

    pub fn tick(&mut self) -> Result<Tick> {
        let status = self.sim.status();
        let obs = if status == Status::Flying {
            let rng = if self.config.noise { Some(&mut self.rng) } else { None };
            self.sim.observe(rng)?
        } else {
            Observation::zero()
        };
        let raw = obs.estimate.as_array();
        let c = &self.config.coeffs;
        let used = if self.config.smooth {
            self.smoothed = smooth_scale(&raw, &self.smoothed, &c.alpha, &c.beta);
            self.smoothed
        } else {
            raw
        };
        let (roll, pitch, yaw) = self.sim.state.euler();
        let setpoint = if self.config.frisbee {
            frisbee_setpoint(&self.setpoint, yaw)
        } else {
            self.setpoint
        };
        let cmd = match &mut self.controller {
            ControllerKind::Evolved(m) => m.output(&controller_inputs(&used, roll.abs(), pitch.abs(), &setpoint)),
            ControllerKind::Pi(pi) => {
                let e = [setpoint[0] - used[0], setpoint[1] - used[1], setpoint[2] - used[2]];
                pi.step(&channel_errors(&e, self.omega_sp - used[3]), &c.p, &c.i)
            }
        };
        let t = self.sim.t;
        let state = self.sim.state;
        let status = if status == Status::Flying {
            match self.sim.step(&cmd) {
                Ok(s) => s,
                Err(Error::NonFinite(_)) => Status::Crashed,
                Err(e) => return Err(e),
            }
        } else {
            status
        };
        Ok(Tick {
            t,
            state,
            obs,
            used,
            setpoint,
            omega_sp: self.omega_sp,
            cmd,
            status,
        })
    }

    pub fn record(&self, table: &mut CsvTable, k: &Tick) {
        let s = &k.state;
        let mut row = vec![k.t];
        row.extend(s.p.iter());
        row.extend([s.q.w, s.q.i, s.q.j, s.q.k]);
        row.extend(s.v.iter());
        row.extend(s.omega.iter());
        row.extend(k.used);
        row.extend(k.cmd.as_array());
        row.extend(k.setpoint);
        row.push(k.omega_sp);
        row.extend([k.obs.nu_body[0], k.obs.nu_body[1], k.obs.nu_body[2]]);
        row.push(s.euler().2);
        row.push(match k.status {
            Status::Flying => 0.0,
            Status::Crashed => 1.0,
            Status::OutOfBounds => 2.0,
        });
        table.push_tagged_row(self.controller.name(), &row);
    }
}

#[derive(Debug, Clone)]
pub struct SimRun {
    pub ticks: Vec<Tick>,
    pub telemetry: CsvTable,
    pub status: Status,
}

/// Fly the schedule in simulation at the control rate.
pub fn run_sim(config: &FlyConfig, controller: ControllerKind, schedule: &SetpointSchedule, seed: u64) -> Result<SimRun> {
    let mut session = SimSession::new(config.clone(), controller, CameraModel::default(), seed)?;
    let period = config.quad.control_period();
    let n = (config.duration_s / period).round() as usize;
    let mut ticks = Vec::with_capacity(n);
    let mut telemetry = CsvTable::new(&FLY_HEADER);
    let mut status = Status::Flying;
    for _ in 0..n {
        let (sp, w) = schedule.at(session.sim.t);
        session.setpoint = sp;
        session.omega_sp = w;
        let k = session.tick()?;
        session.record(&mut telemetry, &k);
        ticks.push(k);
        status = k.status;
        if status != Status::Flying {
            break;
        }
    }
    Ok(SimRun { ticks, telemetry, status })
}

pub const REPLAY_HEADER: [&str; 17] = [
    "window", "t", "nu_x", "nu_y", "nu_z", "omega_z", "cmd_f0", "cmd_phi", "cmd_theta", "cmd_omega_z",
    "out_f0", "out_phi", "out_theta", "psi_c", "sp_x", "sp_y", "sp_z",
];

#[derive(Debug, Clone)]
pub struct ReplayRun {
    pub telemetry: CsvTable,
    /// Smoothed observables per window.
    pub observables: Vec<[f64; 4]>,
    pub commands: Vec<ControlCommand>,
    /// Largest relative gap between merged and staged commands.
    pub max_merge_error: f64,
    pub windows: usize,
}

fn attitude_at(poses: &[PoseSample], t_us: u64) -> [f64; 2] {
    if poses.is_empty() {
        return [0.0; 2];
    }
    let k = poses.partition_point(|p| p.t <= t_us).saturating_sub(1);
    let o = poses[k].orientation;
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(o[0], o[1], o[2], o[3]));
    let (r, p, _) = q.euler_angles();
    [r.abs(), p.abs()]
}

/// Open-loop replay of recorded events through the network and the merged
/// decoder, one tick per event window. Attitude inputs come from `poses`
/// when given.
pub fn run_replay(
    weights: &NetworkWeights,
    controller: &LinearController,
    events: &[Event],
    poses: &[PoseSample],
    geometry: &SensorGeometry,
    schedule: &SetpointSchedule,
    coeffs: &RuntimeCoeffs,
) -> Result<ReplayRun> {
    coeffs.validate()?;
    if events.is_empty() {
        return Err(Error::MissingAsset("replay needs a non-empty event recording".into()));
    }
    let cam = CameraModel::default();
    let model = ObservableModel::for_camera(&cam)?;
    let net: Arc<CompiledNetwork> = CompiledNetwork::new(weights.clone())?;
    let mut vision = VisionNetwork::new(net);
    let mut merged = MergedDecoder::new(weights, &model, &cam, controller, coeffs.alpha, coeffs.beta)?;
    let mut yaw = YawIntegrator::default();
    let end = events.last().map_or(0, |e| e.t + 1);
    let t0 = events[0].t;
    let mut telemetry = CsvTable::new(&REPLAY_HEADER);
    let mut observables = Vec::new();
    let mut commands = Vec::new();
    let mut max_err: f64 = 0.0;
    for (k, w) in window_and_route_until(preprocess_stream(geometry, events), end).enumerate() {
        let inputs = std::array::from_fn(|c| encode_input_spikes(&w.patches[c]));
        let out = vision.step(&inputs)?;
        let t = (w.window.t_start.saturating_sub(t0)) as f64 * 1e-6;
        let (sp, _) = schedule.at(t);
        let att = attitude_at(poses, w.window.t_start + WINDOW_US / 2);
        let rest = [att[0], att[1], sp[0], sp[1], sp[2]];
        let prev = merged.state;
        let (staged, y) = merged.sequential(&out.pooling, &prev, &rest)?;
        let raw = merged.step(&out.pooling, &rest)?;
        for r in 0..4 {
            let scale = staged[r].abs().max(1e-12);
            max_err = max_err.max((raw[r] - staged[r]).abs() / scale.max(1.0));
        }
        let cmd = ControlCommand::from_array(raw);
        let psi = yaw.step(cmd.omega_z, coeffs.yaw_dt);
        let c = cmd.as_array();
        let mut row = vec![k as f64, t];
        row.extend(y);
        row.extend(c);
        row.extend([c[0] * coeffs.command_gain, c[1] * coeffs.command_gain, c[2] * coeffs.command_gain, psi]);
        row.extend(sp);
        telemetry.push_row(&row);
        observables.push(y);
        commands.push(cmd);
    }
    Ok(ReplayRun {
        telemetry,
        windows: observables.len(),
        observables,
        commands,
        max_merge_error: max_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::network::NetworkConfig;
    use rand::Rng;

    #[test]
    fn smoothing_examples() {
        let a = [0.9, 0.9, 0.95, 0.9];
        let b = [0.9, 0.9, 1.0, 1.0];
        let y = smooth_scale(&[1.0; 4], &[0.0; 4], &a, &b);
        assert!((y[0] - 0.09).abs() < 1e-15);
        let mut y = [0.0; 4];
        for _ in 0..2000 {
            y = smooth_scale(&[2.0, -1.0, 0.5, 0.3], &y, &a, &b);
        }
        for (k, x) in [2.0, -1.0, 0.5, 0.3].iter().enumerate() {
            assert!((y[k] - b[k] * x).abs() < 1e-12);
        }
        let frozen = smooth_scale(&[5.0; 4], &[0.1, 0.2, 0.3, 0.4], &[1.0; 4], &b);
        assert_eq!(frozen, [0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn frisbee_rotation() {
        let sp = [0.1, -0.3, -0.2];
        assert_eq!(frisbee_setpoint(&sp, 0.0), sp);
        let r = frisbee_setpoint(&[0.0, 0.5, 0.0], std::f64::consts::FRAC_PI_2);
        assert!((r[0] - 0.5).abs() < 1e-15 && r[1].abs() < 1e-15);
        let r = frisbee_setpoint(&sp, 2.0 * std::f64::consts::PI);
        for k in 0..3 {
            assert!((r[k] - sp[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn pi_contract() {
        let c = RuntimeCoeffs::default();
        let mut pi = PiController::default();
        assert_eq!(pi.step(&[0.0; 4], &c.p, &c.i), ControlCommand::default());
        let e = [0.3, -0.2, 0.1, 0.05];
        let out = PiController::default().step(&e, &c.p, &[0.0; 4]).as_array();
        for k in 0..4 {
            assert!((out[k] - c.p[k] * e[k]).abs() < 1e-15);
        }
        // yaw channel saturates (4 * 0.5 = 2) and must not integrate
        let mut pi = PiController::default();
        for _ in 0..100 {
            let cmd = pi.step(&[0.1, 0.1, 0.1, 0.5], &c.p, &[0.001; 4]);
            assert_eq!(cmd.omega_z, 1.0);
        }
        assert_eq!(pi.integrator[3], 0.0);
        assert!((pi.integrator[0] - 10.0).abs() < 1e-9);
    }

    fn setup(seed: u64) -> (NetworkWeights, LinearController, ObservableModel, CameraModel) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = NetworkWeights::random(&NetworkConfig::with_channels(&[2, 2, 2], 6), &mut rng).unwrap();
        let c = LinearController::random(&mut rng, 0.1);
        let cam = CameraModel::default();
        (w, c, ObservableModel::for_camera(&cam).unwrap(), cam)
    }

    fn random_spikes(rng: &mut ChaCha8Rng, p: usize) -> [Vec<u8>; 4] {
        std::array::from_fn(|_| (0..p).map(|_| rng.random_range(0..2u8)).collect())
    }

    #[test]
    fn merged_matches_sequential() {
        let (w, c, model, cam) = setup(3);
        let coeffs = RuntimeCoeffs::default();
        let mut m = MergedDecoder::new(&w, &model, &cam, &c, coeffs.alpha, coeffs.beta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let s = random_spikes(&mut rng, 6);
            let rest = [0.01, 0.02, 0.2, 0.0, -0.1];
            let prev = m.state;
            let (want, y) = m.sequential(&s, &prev, &rest).unwrap();
            let got = m.step(&s, &rest).unwrap();
            for k in 0..4 {
                assert!((got[k] - want[k]).abs() <= 1e-6 * want[k].abs().max(1e-9));
                assert!((m.state[k] - y[k]).abs() < 1e-12);
            }
        }
        // zero spikes from reset: bias only
        m.reset();
        let rest = [0.0, 0.0, 0.5, 0.0, 0.0];
        let got = m.step(&[vec![0; 6], vec![0; 6], vec![0; 6], vec![0; 6]], &rest).unwrap();
        assert_eq!(got, m.controller.raw(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0]));
    }

    #[test]
    fn identity_controller_exposes_observable_map() {
        let (w, _, model, cam) = setup(5);
        let mut c = LinearController::zeros();
        for k in 0..4 {
            c.m[k][k] = 1.0;
        }
        let m = MergedDecoder::new(&w, &model, &cam, &c, [0.5; 4], [1.0; 4]).unwrap();
        assert_eq!(m.merged, m.observable);
    }

    #[test]
    fn schedule_lookup() {
        let s = SetpointSchedule {
            segments: vec![(0.0, [0.0; 3], 0.0), (2.0, [0.5, 0.0, 0.0], 0.0), (4.0, [0.0, 0.0, -0.5], 0.2)],
        };
        assert_eq!(s.at(1.0).0, [0.0; 3]);
        assert_eq!(s.at(2.0).0, [0.5, 0.0, 0.0]);
        assert_eq!(s.at(9.0), ([0.0, 0.0, -0.5], 0.2));
    }

    #[test]
    fn sim_loop_cadence_and_determinism() {
        let cfg = FlyConfig {
            duration_s: 1.0,
            ..FlyConfig::default()
        };
        let sched = SetpointSchedule::constant([0.0; 3], 0.0);
        let a = run_sim(&cfg, ControllerKind::Pi(PiController::default()), &sched, 7).unwrap();
        assert_eq!(a.ticks.len(), 50);
        for w in a.ticks.windows(2) {
            assert!((w[1].t - w[0].t - 0.02).abs() < 1e-12);
        }
        let b = run_sim(&cfg, ControllerKind::Pi(PiController::default()), &sched, 7).unwrap();
        assert_eq!(a.telemetry.as_str(), b.telemetry.as_str());
        assert!(a.ticks.iter().all(|k| k.cmd.as_array().iter().all(|v| v.abs() <= 1.0)));
    }

    #[test]
    fn pi_tracks_forward_setpoint_in_sim() {
        let cfg = FlyConfig {
            duration_s: 12.0,
            smooth: true,
            noise: false,
            ..FlyConfig::default()
        };
        let sched = SetpointSchedule::constant([0.3, 0.0, 0.0], 0.0);
        let run = run_sim(&cfg, ControllerKind::Pi(PiController::default()), &sched, 1).unwrap();
        assert_eq!(run.status, Status::Flying);
        let last = run.ticks.last().unwrap();
        assert!(last.state.v[0] > 0.0, "moves forward");
        assert!((last.obs.nu_body[0] - 0.3).abs() < 0.1, "{:?}", last.obs.nu_body);
    }

    #[test]
    fn frisbee_flies_a_straight_world_track() {
        let cfg = FlyConfig {
            duration_s: 20.0,
            smooth: true,
            frisbee: true,
            noise: false,
            ..FlyConfig::default()
        };
        let sched = SetpointSchedule::constant([0.0, 0.3, 0.0], 0.2);
        let run = run_sim(&cfg, ControllerKind::Pi(PiController::default()), &sched, 1).unwrap();
        assert_eq!(run.status, Status::Flying);
        let last = run.ticks.last().unwrap();
        let yaw_rate = last.state.omega[2];
        assert!(yaw_rate > 0.1, "spins: {yaw_rate}");
        // displacement stays along the initial +y world direction
        let p = last.state.p;
        assert!(p[1] > 1.0, "{p:?}");
        assert!(p[0].abs() < 0.5 * p[1], "{p:?}");
    }
}
