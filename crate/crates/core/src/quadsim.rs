//! Quadrotor rigid-body simulator with motor lag, flat-body drag and
//! cascaded thrust/attitude/rate control.
//!
//! World Z points up, the body Z axis is the thrust axis. Motor speeds use
//! the unit of the thrust map (rpm-like, `[150, 1500]`).

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homography::{
    continuous_homography, corner_flows_from_hdot, CameraModel, CornerFlowSet, FlowUnit, Frame, ObservableModel,
    UnitContext, VisualObservables,
};
use crate::io::CsvTable;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadParams {
    pub mass: f64,
    pub arm: f64,
    pub motor_tau: f64,
    /// `f = a*W^2 + b*W + c` per rotor, N.
    pub thrust_map: [f64; 3],
    pub inertia: [f64; 3],
    /// Rotor yaw torque per newton of thrust, m.
    pub torque_coeff: f64,
    /// Flat-body drag coefficients (mass-specific), 1/s.
    pub drag: [f64; 3],
    pub rate_max: [f64; 3],
    pub motor_min: f64,
    pub motor_max: f64,
    pub min_altitude: f64,
    pub max_altitude: f64,
    pub max_horizontal: f64,
    /// Collective thrust gain in units of g.
    pub thrust_gain: f64,
    pub attitude_gain: f64,
    pub rate_gains: [f64; 3],
    /// Lower clamp of `cos(roll) cos(pitch)` in the thrust compensation.
    pub tilt_floor: f64,
    pub dt: f64,
    /// Integration substeps per control step.
    pub substeps: usize,
    /// Standard deviation of the noise added to normalized corner flows.
    pub flow_noise: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        Self {
            mass: 1.535,
            arm: 0.255,
            motor_tau: 0.025,
            thrust_map: [1.329825e-6, 0.003836, -1.768999],
            inertia: [0.0135, 0.0135, 0.0246],
            torque_coeff: 0.016,
            drag: [0.5, 0.5, 0.0],
            rate_max: [6.0, 6.0, 6.0],
            motor_min: 150.0,
            motor_max: 1500.0,
            min_altitude: 0.2,
            max_altitude: 10.0,
            max_horizontal: 10.0,
            thrust_gain: 6.0,
            attitude_gain: std::f64::consts::FRAC_PI_2,
            rate_gains: [16.6, 16.6, 5.0],
            tilt_floor: 0.5,
            dt: 0.0025,
            substeps: 8,
            flow_noise: 0.025,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) || self.inertia.iter().any(|j| !(*j > 0.0)) {
            return Err(Error::Config("mass and inertia must be positive".into()));
        }
        if !(self.dt > 0.0) || self.substeps == 0 || !(self.motor_tau > 0.0) {
            return Err(Error::Config("dt, substeps and motor_tau must be positive".into()));
        }
        if !(self.motor_min < self.motor_max) {
            return Err(Error::Config("motor_min must be below motor_max".into()));
        }
        Ok(())
    }

    pub fn control_period(&self) -> f64 {
        self.dt * self.substeps as f64
    }

    pub fn rotor_thrust(&self, w: f64) -> f64 {
        let [a, b, c] = self.thrust_map;
        a * w * w + b * w + c
    }

    /// Speed producing thrust `f`, clamped to the motor range.
    pub fn rotor_speed(&self, f: f64) -> f64 {
        let [a, b, c] = self.thrust_map;
        let disc = b * b - 4.0 * a * (c - f);
        let w = if disc <= 0.0 { self.motor_min } else { (-b + disc.sqrt()) / (2.0 * a) };
        w.clamp(self.motor_min, self.motor_max)
    }

    /// Rotor positions (x, y) and spin signs in the X configuration:
    /// front-right, rear-left, front-left, rear-right.
    pub fn rotors(&self) -> [(f64, f64, f64); 4] {
        let d = self.arm / std::f64::consts::SQRT_2;
        [(d, -d, 1.0), (-d, d, 1.0), (d, d, -1.0), (-d, -d, -1.0)]
    }

    /// Map from rotor thrusts to `[collective, tau_x, tau_y, tau_z]`.
    pub fn mixer(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        for (i, (x, y, s)) in self.rotors().into_iter().enumerate() {
            m[(0, i)] = 1.0;
            m[(1, i)] = y;
            m[(2, i)] = -x;
            m[(3, i)] = s * self.torque_coeff;
        }
        m
    }

    pub fn inertia_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::from(self.inertia))
    }

    /// Per-rotor speed that holds level hover.
    pub fn hover_speed(&self) -> f64 {
        self.rotor_speed(self.mass * GRAVITY / 4.0)
    }
}

/// Full simulator state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadState {
    pub p: Vector3<f64>,
    /// World from body, kept as a raw quaternion for the integrator.
    pub q: Quaternion<f64>,
    /// World-frame velocity.
    pub v: Vector3<f64>,
    /// Body rates.
    pub omega: Vector3<f64>,
    pub motors: Vector4<f64>,
}

impl QuadState {
    pub fn hover(params: &QuadParams, p: Vector3<f64>) -> Self {
        Self {
            p,
            q: Quaternion::identity(),
            v: Vector3::zeros(),
            omega: Vector3::zeros(),
            motors: Vector4::repeat(params.hover_speed()),
        }
    }

    pub fn attitude(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(self.q)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.attitude().to_rotation_matrix().into_inner()
    }

    /// Roll, pitch, yaw (ZYX convention).
    pub fn euler(&self) -> (f64, f64, f64) {
        self.attitude().euler_angles()
    }

    pub fn body_velocity(&self) -> Vector3<f64> {
        self.rotation().transpose() * self.v
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(self.v.iter()).chain(self.omega.iter()).chain(self.motors.iter()).all(|x| x.is_finite())
            && self.q.coords.iter().all(|x| x.is_finite())
    }

    fn axpy(&self, h: f64, d: &StateDerivative) -> Self {
        Self {
            p: self.p + d.p * h,
            q: self.q + d.q * h,
            v: self.v + d.v * h,
            omega: self.omega + d.omega * h,
            motors: self.motors + d.motors * h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    pub p: Vector3<f64>,
    pub q: Quaternion<f64>,
    pub v: Vector3<f64>,
    pub omega: Vector3<f64>,
    pub motors: Vector4<f64>,
}

/// High-level command, every component in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlCommand {
    /// Collective thrust offset from hover, mass-normalized.
    pub f0: f64,
    pub phi: f64,
    pub theta: f64,
    pub omega_z: f64,
}

impl ControlCommand {
    pub fn from_array(c: [f64; 4]) -> Self {
        Self {
            f0: c[0],
            phi: c[1],
            theta: c[2],
            omega_z: c[3],
        }
        .clamped()
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.f0, self.phi, self.theta, self.omega_z]
    }

    pub fn clamped(&self) -> Self {
        let c = |x: f64| if x.is_nan() { 0.0 } else { x.clamp(-1.0, 1.0) };
        Self {
            f0: c(self.f0),
            phi: c(self.phi),
            theta: c(self.theta),
            omega_z: c(self.omega_z),
        }
    }
}

/// What drives the rotors during integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotorCommand {
    /// Commanded speeds, tracked through the first-order motor model.
    Speeds(Vector4<f64>),
    /// Rotors produce neither thrust nor torque.
    Off,
}

/// Drag acceleration in the body frame: velocity rotated into the
/// flat-body frame, scaled per axis, rotated back.
pub fn drag_force(v_b: &Vector3<f64>, attitude: &UnitQuaternion<f64>, k: &[f64; 3]) -> Vector3<f64> {
    let (roll, pitch, _) = attitude.euler_angles();
    // body -> flat-body removes roll and pitch
    let r_fb = UnitQuaternion::from_euler_angles(roll, pitch, 0.0).to_rotation_matrix();
    let v_f = r_fb * v_b;
    let scaled = Vector3::new(k[0] * v_f[0], k[1] * v_f[1], k[2] * v_f[2]);
    -(r_fb.transpose() * scaled)
}

/// Time derivative of the state.
pub fn derivative(params: &QuadParams, s: &QuadState, cmd: &MotorCommand) -> StateDerivative {
    let att = UnitQuaternion::from_quaternion(s.q);
    let r = att.to_rotation_matrix();
    let (thrusts, w_dot) = match cmd {
        MotorCommand::Speeds(wc) => (s.motors.map(|w| params.rotor_thrust(w)), (wc - s.motors) / params.motor_tau),
        MotorCommand::Off => (Vector4::zeros(), Vector4::zeros()),
    };
    let wrench = params.mixer() * thrusts;
    let v_b = r.transpose() * s.v;
    let drag = drag_force(&v_b, &att, &params.drag);
    let f_b = Vector3::new(0.0, 0.0, wrench[0] / params.mass) + drag;
    let v_dot = r * f_b + Vector3::new(0.0, 0.0, -GRAVITY);
    let j = params.inertia_matrix();
    let tau = Vector3::new(wrench[1], wrench[2], wrench[3]);
    let omega_dot = j.try_inverse().expect("positive inertia") * (tau - s.omega.cross(&(j * s.omega)));
    let q_dot = s.q * Quaternion::from_imag(s.omega) * 0.5;
    StateDerivative {
        p: s.v,
        q: q_dot,
        v: v_dot,
        omega: omega_dot,
        motors: w_dot,
    }
}

/// One classical Runge-Kutta step; the quaternion is renormalized.
pub fn rk4_step(params: &QuadParams, s: &QuadState, cmd: &MotorCommand, h: f64) -> Result<QuadState> {
    let k1 = derivative(params, s, cmd);
    let k2 = derivative(params, &s.axpy(h / 2.0, &k1), cmd);
    let k3 = derivative(params, &s.axpy(h / 2.0, &k2), cmd);
    let k4 = derivative(params, &s.axpy(h, &k3), cmd);
    let combine = StateDerivative {
        p: (k1.p + k2.p * 2.0 + k3.p * 2.0 + k4.p) / 6.0,
        q: (k1.q + k2.q * 2.0 + k3.q * 2.0 + k4.q) / 6.0,
        v: (k1.v + k2.v * 2.0 + k3.v * 2.0 + k4.v) / 6.0,
        omega: (k1.omega + k2.omega * 2.0 + k3.omega * 2.0 + k4.omega) / 6.0,
        motors: (k1.motors + k2.motors * 2.0 + k3.motors * 2.0 + k4.motors) / 6.0,
    };
    let mut next = s.axpy(h, &combine);
    next.q = next.q.normalize();
    next.motors = next.motors.map(|w| w.clamp(params.motor_min, params.motor_max));
    if !next.is_finite() {
        return Err(Error::NonFinite("simulator state".into()));
    }
    Ok(next)
}

/// Intermediate quantities of the cascaded controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowLevelOutput {
    /// Mass-normalized collective thrust after attitude compensation.
    pub thrust: f64,
    pub rate_cmd: Vector3<f64>,
    pub torque: Vector3<f64>,
    pub speeds: Vector4<f64>,
}

/// Thrust, attitude and rate loops down to commanded rotor speeds.
pub fn low_level_control(params: &QuadParams, cmd: &ControlCommand, s: &QuadState) -> LowLevelOutput {
    let cmd = cmd.clamped();
    let (roll, pitch, _) = s.euler();
    let f_bar = cmd.f0 * params.thrust_gain * GRAVITY + GRAVITY;
    let thrust = f_bar / (roll.cos() * pitch.cos()).max(params.tilt_floor);
    let rm = params.rate_max;
    let rate_cmd = Vector3::new(
        (params.attitude_gain * (cmd.phi - roll)).clamp(-rm[0], rm[0]),
        (params.attitude_gain * (cmd.theta - pitch)).clamp(-rm[1], rm[1]),
        cmd.omega_z.clamp(-rm[2], rm[2]),
    );
    let j = params.inertia_matrix();
    let err = rate_cmd - s.omega;
    let k = params.rate_gains;
    let torque = j * Vector3::new(k[0] * err[0], k[1] * err[1], k[2] * err[2]) + s.omega.cross(&(j * s.omega));
    let wrench = Vector4::new(params.mass * thrust, torque[0], torque[1], torque[2]);
    let f = params.mixer().try_inverse().expect("invertible mixer") * wrench;
    LowLevelOutput {
        thrust,
        rate_cmd,
        torque,
        speeds: f.map(|fi| params.rotor_speed(fi)),
    }
}

/// Ground-truth visual observables and their noisy estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    /// Noisy corner flows, normalized coordinates per second.
    pub flows: CornerFlowSet,
    /// Least-squares estimate from the noisy flows, body frame.
    pub estimate: VisualObservables,
    /// Noise-free body-frame scaled velocity `v_B / p_z`.
    pub nu_body: [f64; 3],
    /// World-frame vertical scaled velocity `v_z / p_z`.
    pub nu_z_world: f64,
    pub omega_z: f64,
}

/// Corner flows from the state, Gaussian noise on the normalized flows,
/// least squares to observables, camera to body.
pub fn observe<R: Rng + ?Sized>(
    params: &QuadParams,
    s: &QuadState,
    cam: &CameraModel,
    model: &ObservableModel,
    rng: Option<&mut R>,
) -> Result<Observation> {
    if s.p[2] < params.min_altitude {
        return Err(Error::BelowGround(s.p[2]));
    }
    let r = s.rotation();
    let v_b = r.transpose() * s.v;
    let p_z = cam.camera_height(s.p[2], &r);
    let hdot = continuous_homography(&s.omega, &v_b, p_z, &r, cam)?;
    let px = corner_flows_from_hdot(&hdot, &cam.corners_homogeneous());
    let mut flows = px.to_unit(FlowUnit::NormalizedPerSecond, &UnitContext::default());
    if let Some(rng) = rng {
        if params.flow_noise > 0.0 {
            let n = Normal::new(0.0, params.flow_noise).expect("finite noise");
            for f in flows.flows.iter_mut().flatten() {
                *f += n.sample(rng);
            }
        }
    }
    let estimate = model.estimate(&flows)?.to_body(cam);
    Ok(Observation {
        flows,
        estimate,
        nu_body: (v_b / s.p[2]).into(),
        nu_z_world: s.v[2] / s.p[2],
        omega_z: s.omega[2],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Flying,
    Crashed,
    OutOfBounds,
}

/// A simulator instance for one episode.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub params: QuadParams,
    pub camera: CameraModel,
    pub model: ObservableModel,
    pub state: QuadState,
    pub t: f64,
}

impl Simulator {
    pub fn new(params: QuadParams, camera: CameraModel, state: QuadState) -> Result<Self> {
        params.validate()?;
        camera.validate()?;
        let model = ObservableModel::for_camera(&camera)?;
        Ok(Self {
            params,
            camera,
            model,
            state,
            t: 0.0,
        })
    }

    pub fn status(&self) -> Status {
        let p = &self.state.p;
        let pr = &self.params;
        if p[2] < pr.min_altitude {
            Status::Crashed
        } else if p[0].abs() > pr.max_horizontal || p[1].abs() > pr.max_horizontal || p[2] > pr.max_altitude {
            Status::OutOfBounds
        } else {
            Status::Flying
        }
    }

    /// Hold `cmd` for one control period; the low-level loops run at every
    /// integration substep.
    pub fn step(&mut self, cmd: &ControlCommand) -> Result<Status> {
        for _ in 0..self.params.substeps {
            let ll = low_level_control(&self.params, cmd, &self.state);
            self.state = rk4_step(&self.params, &self.state, &MotorCommand::Speeds(ll.speeds), self.params.dt)?;
            self.t += self.params.dt;
        }
        Ok(self.status())
    }

    pub fn observe<R: Rng + ?Sized>(&self, rng: Option<&mut R>) -> Result<Observation> {
        observe(&self.params, &self.state, &self.camera, &self.model, rng)
    }
}

pub const TELEMETRY_HEADER: [&str; 22] = [
    "t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz", "nu_x_hat", "nu_y_hat",
    "nu_z_hat", "omega_z_hat", "cmd_f0", "cmd_phi", "cmd_theta", "cmd_omega_z",
];

/// Per-episode telemetry writer.
#[derive(Debug, Clone)]
pub struct Telemetry {
    pub table: CsvTable,
}

impl Default for Telemetry {
    fn default() -> Self {
        Self {
            table: CsvTable::new(&TELEMETRY_HEADER),
        }
    }
}

impl Telemetry {
    pub fn record(&mut self, t: f64, s: &QuadState, est: &VisualObservables, cmd: &ControlCommand) {
        let mut row = vec![t];
        row.extend(s.p.iter());
        row.extend([s.q.w, s.q.i, s.q.j, s.q.k]);
        row.extend(s.v.iter());
        row.extend(s.omega.iter());
        row.extend(est.nu);
        row.push(est.omega_z);
        row.extend(cmd.as_array());
        self.table.push_row(&row);
    }
}

impl Observation {
    pub fn zero() -> Self {
        Self {
            flows: CornerFlowSet::new([[0.0; 2]; 4], FlowUnit::NormalizedPerSecond),
            estimate: VisualObservables::zero(Frame::Body),
            nu_body: [0.0; 3],
            nu_z_world: 0.0,
            omega_z: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn p() -> QuadParams {
        QuadParams::default()
    }

    #[test]
    fn hover_speed_solves_thrust_map() {
        let pr = p();
        let w = pr.hover_speed();
        let [a, b, c] = pr.thrust_map;
        // independent quadratic root
        let target = pr.mass * GRAVITY / 4.0;
        let root = (-b + (b * b - 4.0 * a * (c - target)).sqrt()) / (2.0 * a);
        assert!((w - root).abs() < 1e-9);
        assert!((a * w * w + b * w + c - target).abs() < 1e-9);
        let ll = low_level_control(&pr, &ControlCommand::default(), &QuadState::hover(&pr, Vector3::new(0.0, 0.0, 2.0)));
        for k in 0..4 {
            assert!((ll.speeds[k] - root).abs() < 1e-6);
        }
    }

    #[test]
    fn hover_is_equilibrium() {
        let pr = p();
        let s = QuadState::hover(&pr, Vector3::new(0.0, 0.0, 2.0));
        let d = derivative(&pr, &s, &MotorCommand::Speeds(s.motors));
        assert!(d.v.norm() < 1e-12 && d.omega.norm() < 1e-12 && d.motors.norm() < 1e-12);
        let n = rk4_step(&pr, &s, &MotorCommand::Speeds(s.motors), 0.0025).unwrap();
        assert!((n.p - s.p).norm() < 1e-12);
    }

    #[test]
    fn zero_thrust_falls_at_g() {
        let pr = p();
        let s = QuadState::hover(&pr, Vector3::new(0.0, 0.0, 5.0));
        let d = derivative(&pr, &s, &MotorCommand::Off);
        assert!((d.v - Vector3::new(0.0, 0.0, -GRAVITY)).norm() < 1e-12);
    }

    #[test]
    fn pure_yaw_torque_is_decoupled() {
        let pr = p();
        let mut s = QuadState::hover(&pr, Vector3::new(0.0, 0.0, 2.0));
        // speed up the CCW pair, slow the CW pair by matching thrust
        let w0 = s.motors[0];
        let df = 0.2;
        let up = pr.rotor_speed(pr.rotor_thrust(w0) + df);
        let dn = pr.rotor_speed(pr.rotor_thrust(w0) - df);
        s.motors = Vector4::new(up, up, dn, dn);
        let d = derivative(&pr, &s, &MotorCommand::Speeds(s.motors));
        let tau_z = 4.0 * df * pr.torque_coeff;
        assert!((d.omega[2] - tau_z / pr.inertia[2]).abs() < 1e-9);
        assert!(d.omega[0].abs() < 1e-9 && d.omega[1].abs() < 1e-9);
    }

    #[test]
    fn drag_examples() {
        let level = UnitQuaternion::identity();
        let k = [0.5, 0.5, 0.0];
        assert_eq!(drag_force(&Vector3::zeros(), &level, &k), Vector3::zeros());
        assert!((drag_force(&Vector3::new(2.0, 0.0, 0.0), &level, &k) - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-15);
        assert!(drag_force(&Vector3::new(0.0, 0.0, 3.0), &level, &k).norm() < 1e-15);
        // tilted: drag only opposes the horizontal part of the velocity
        let att = UnitQuaternion::from_euler_angles(0.3, -0.2, 0.7);
        let v_w = Vector3::new(1.0, -2.0, 0.5);
        let v_b = att.inverse() * v_w;
        let d_w = att * drag_force(&v_b, &att, &k);
        assert!((d_w - Vector3::new(-0.5, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn thrust_and_rate_commands() {
        let pr = p();
        let s = QuadState::hover(&pr, Vector3::new(0.0, 0.0, 2.0));
        let ll = low_level_control(&pr, &ControlCommand { f0: 1.0, ..Default::default() }, &s);
        assert!((ll.thrust - 7.0 * GRAVITY).abs() < 1e-12);
        let ll = low_level_control(&pr, &ControlCommand { phi: 0.4, ..Default::default() }, &s);
        assert!((ll.rate_cmd[0] - 0.4 * std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let ll = low_level_control(&pr, &ControlCommand { phi: 1.0, theta: -1.0, omega_z: 1.0, f0: -1.0 }, &s);
        assert!(ll.speeds.iter().all(|w| (150.0..=1500.0).contains(w)));
        assert!(ll.rate_cmd.iter().all(|w| w.abs() <= 6.0));
    }

    #[test]
    fn compensation_floor() {
        let pr = p();
        let mut s = QuadState::hover(&pr, Vector3::new(0.0, 0.0, 2.0));
        s.q = *UnitQuaternion::from_euler_angles(1.4, 0.0, 0.0).quaternion();
        let ll = low_level_control(&pr, &ControlCommand::default(), &s);
        assert!((ll.thrust - GRAVITY / 0.5).abs() < 1e-12);
    }

    #[test]
    fn noiseless_observables() {
        let pr = p();
        let cam = CameraModel {
            t_cb: Vector3::zeros(),
            ..CameraModel::default()
        };
        let model = ObservableModel::for_camera(&cam).unwrap();
        let s = QuadState::hover(&pr, Vector3::new(0.0, 0.0, 2.0));
        let o = observe::<ChaCha8Rng>(&pr, &s, &cam, &model, None).unwrap();
        assert!(o.estimate.as_array().iter().all(|v| v.abs() < 1e-12));
        let mut d = s;
        d.v = Vector3::new(0.0, 0.0, -1.0);
        let o = observe::<ChaCha8Rng>(&pr, &d, &cam, &model, None).unwrap();
        assert!((o.estimate.nu[2] + 0.5).abs() < 1e-12);
        assert!((o.nu_z_world + 0.5).abs() < 1e-15);
        let mut low = s;
        low.p[2] = 0.1;
        assert!(matches!(observe::<ChaCha8Rng>(&pr, &low, &cam, &model, None), Err(Error::BelowGround(_))));
    }

    #[test]
    fn observation_noise_propagates_linearly() {
        let pr = p();
        let cam = CameraModel::default();
        let model = ObservableModel::for_camera(&cam).unwrap();
        let s = QuadState::hover(&pr, Vector3::new(0.0, 0.0, 1.5));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut sq = [0.0; 4];
        let base = observe::<ChaCha8Rng>(&pr, &s, &cam, &model, None).unwrap().estimate.as_array();
        for _ in 0..n {
            let o = observe(&pr, &s, &cam, &model, Some(&mut rng)).unwrap().estimate.as_array();
            for k in 0..4 {
                sq[k] += (o[k] - base[k]).powi(2);
            }
        }
        // sigma * row norm of the least-squares matrix
        for k in 0..4 {
            let expect = pr.flow_noise * model.inverse[k].iter().map(|v| v * v).sum::<f64>().sqrt();
            let got = (sq[k] / n as f64).sqrt();
            assert!((got / expect - 1.0).abs() < 0.01, "axis {k}: {got} vs {expect}");
        }
    }

    #[test]
    fn quaternion_stays_unit_and_motors_clamped() {
        let pr = p();
        let mut sim = Simulator::new(pr.clone(), CameraModel::default(), QuadState::hover(&pr, Vector3::new(0.0, 0.0, 3.0))).unwrap();
        let cmd = ControlCommand { f0: 0.05, phi: 0.3, theta: -0.2, omega_z: 0.5 };
        for _ in 0..100 {
            sim.step(&cmd).unwrap();
            assert!((sim.state.q.norm() - 1.0).abs() < 1e-9);
            assert!(sim.state.motors.iter().all(|w| (150.0..=1500.0).contains(w)));
        }
    }

    #[test]
    fn status_bounds() {
        let pr = p();
        let mut sim = Simulator::new(pr.clone(), CameraModel::default(), QuadState::hover(&pr, Vector3::new(0.0, 0.0, 2.0))).unwrap();
        assert_eq!(sim.status(), Status::Flying);
        sim.state.p[0] = 10.5;
        assert_eq!(sim.status(), Status::OutOfBounds);
        sim.state.p = Vector3::new(0.0, 0.0, 0.1);
        assert_eq!(sim.status(), Status::Crashed);
    }
}
