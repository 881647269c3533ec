//! Synthetic event data: a textured ground plane seen by a moving downward
//! camera, with events emitted on log-intensity threshold crossings.
//!
//! Only sensor pixels that land in one of the four corner windows are
//! simulated, which keeps generation cheap.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::events::{Corner, Event, Polarity, PoseSample, SensorGeometry};
use crate::homography::{
    continuous_homography, convert_flow, corner_flows_from_hdot, CameraModel, CornerFlowSet, FlowUnit, UnitContext,
};

/// Periodic random-dot texture on the world ground plane.
#[derive(Debug, Clone)]
pub struct Texture {
    pub size: usize,
    /// Texel edge length, m.
    pub texel: f64,
    data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureConfig {
    pub size: usize,
    pub texel: f64,
    pub dots: usize,
    /// Gaussian dot radius in texels.
    pub sigma: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            size: 256,
            texel: 0.005,
            dots: 200,
            sigma: 2.0,
        }
    }
}

impl Texture {
    pub fn random<R: Rng + ?Sized>(cfg: &TextureConfig, rng: &mut R) -> Self {
        let n = cfg.size;
        let mut data = vec![0.0f32; n * n];
        let reach = (3.0 * cfg.sigma).ceil() as isize;
        let inv = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
        for _ in 0..cfg.dots {
            let cx = rng.random_range(0.0..n as f64);
            let cy = rng.random_range(0.0..n as f64);
            let amp = rng.random_range(0.5..1.0);
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let px = cx.floor() as isize + dx;
                    let py = cy.floor() as isize + dy;
                    let d2 = (px as f64 - cx).powi(2) + (py as f64 - cy).powi(2);
                    let idx = py.rem_euclid(n as isize) as usize * n + px.rem_euclid(n as isize) as usize;
                    data[idx] += (amp * (-d2 * inv).exp()) as f32;
                }
            }
        }
        Self {
            size: n,
            texel: cfg.texel,
            data,
        }
    }

    /// Bilinear, periodic sample at world coordinates (m).
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let n = self.size as f64;
        let u = (x / self.texel).rem_euclid(n);
        let v = (y / self.texel).rem_euclid(n);
        let i0 = u.floor() as usize % self.size;
        let j0 = v.floor() as usize % self.size;
        let i1 = (i0 + 1) % self.size;
        let j1 = (j0 + 1) % self.size;
        let a = u - u.floor();
        let b = v - v.floor();
        let at = |i: usize, j: usize| self.data[j * self.size + i] as f64;
        (1.0 - b) * ((1.0 - a) * at(i0, j0) + a * at(i1, j0)) + b * ((1.0 - a) * at(i0, j1) + a * at(i1, j1))
    }
}

/// Body pose and motion at an instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyKinematics {
    pub position: Vector3<f64>,
    pub attitude: UnitQuaternion<f64>,
    /// World-frame velocity, m/s.
    pub velocity: Vector3<f64>,
    /// Body rates, rad/s.
    pub omega: Vector3<f64>,
}

pub trait Trajectory: Sync {
    fn at(&self, t: f64) -> BodyKinematics;
}

/// Constant world velocity, fixed roll/pitch, constant yaw rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantMotion {
    pub start: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub yaw_rate: f64,
}

impl ConstantMotion {
    /// Level flight at `height` with a horizontal velocity.
    pub fn level(height: f64, vx: f64, vy: f64) -> Self {
        Self {
            start: Vector3::new(0.0, 0.0, height),
            velocity: Vector3::new(vx, vy, 0.0),
            roll: 0.0,
            pitch: 0.0,
            yaw: 0.0,
            yaw_rate: 0.0,
        }
    }
}

impl Trajectory for ConstantMotion {
    fn at(&self, t: f64) -> BodyKinematics {
        let yaw = self.yaw + self.yaw_rate * t;
        let attitude = UnitQuaternion::from_euler_angles(self.roll, self.pitch, yaw);
        // yaw rate about world z expressed in the body frame
        let omega = attitude.inverse() * Vector3::new(0.0, 0.0, self.yaw_rate);
        BodyKinematics {
            position: self.start + self.velocity * t,
            attitude,
            velocity: self.velocity,
            omega,
        }
    }
}

/// Smoothly varying trajectory: sinusoidal horizontal motion, slow descent
/// and gentle yaw. Used for replay and evaluation data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WavyMotion {
    pub height: f64,
    pub amplitude: f64,
    pub period: f64,
    pub descent: f64,
    pub yaw_rate: f64,
}

impl Default for WavyMotion {
    fn default() -> Self {
        Self {
            height: 1.5,
            amplitude: 0.4,
            period: 2.0,
            descent: 0.1,
            yaw_rate: 0.2,
        }
    }
}

impl Trajectory for WavyMotion {
    fn at(&self, t: f64) -> BodyKinematics {
        let w = std::f64::consts::TAU / self.period;
        let position = Vector3::new(
            self.amplitude * (w * t).sin(),
            0.5 * self.amplitude * (0.5 * w * t).sin(),
            self.height - self.descent * t,
        );
        let velocity = Vector3::new(
            self.amplitude * w * (w * t).cos(),
            0.25 * self.amplitude * w * (0.5 * w * t).cos(),
            -self.descent,
        );
        let attitude = UnitQuaternion::from_euler_angles(0.0, 0.0, self.yaw_rate * t);
        BodyKinematics {
            position,
            attitude,
            velocity,
            omega: Vector3::new(0.0, 0.0, self.yaw_rate),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventSimConfig {
    pub geometry: SensorGeometry,
    pub camera: CameraModel,
    /// Log-intensity change that triggers an event.
    pub threshold: f64,
    pub sample_dt_us: u64,
    /// Additive intensity floor before the logarithm.
    pub floor: f64,
    /// Std of per-pixel threshold mismatch, relative.
    pub threshold_noise: f64,
}

impl Default for EventSimConfig {
    fn default() -> Self {
        Self {
            geometry: SensorGeometry::default(),
            camera: CameraModel::default(),
            threshold: 0.4,
            sample_dt_us: 250,
            floor: 0.8,
            threshold_noise: 0.0,
        }
    }
}

/// Sensor pixels covered by the four corner windows.
pub fn corner_sensor_pixels(geometry: &SensorGeometry) -> Vec<(u16, u16)> {
    let mut px = Vec::new();
    let d = geometry.downsample;
    for corner in Corner::ALL {
        let (ox, oy) = geometry.corner_origin(corner);
        for wy in 0..geometry.patch {
            for wx in 0..geometry.patch {
                for sy in 0..d {
                    for sx in 0..d {
                        px.push((
                            geometry.crop_x + (ox + wx) * d + sx,
                            geometry.crop_y + (oy + wy) * d + sy,
                        ));
                    }
                }
            }
        }
    }
    px
}

fn log_intensity(
    texture: &Texture,
    k: &BodyKinematics,
    cam: &CameraModel,
    k_inv: &Matrix3<f64>,
    px: (f64, f64),
    floor: f64,
) -> Result<f64> {
    let r_wb = k.attitude.to_rotation_matrix();
    let r_wc = r_wb * cam.r_cb.transpose();
    let p_c = k.position + r_wb * cam.t_cb;
    let d = r_wc * (k_inv * Vector3::new(px.0, px.1, 1.0));
    if !(d[2] < 0.0) || !(p_c[2] > 0.0) {
        return Err(Error::BelowGround(p_c[2]));
    }
    let s = -p_c[2] / d[2];
    Ok((texture.sample(p_c[0] + s * d[0], p_c[1] + s * d[1]) + floor).ln())
}

/// Events for `[0, duration_us)` at the corner-window pixels, time ordered.
pub fn simulate_events<R: Rng + ?Sized>(
    texture: &Texture,
    trajectory: &dyn Trajectory,
    cfg: &EventSimConfig,
    duration_us: u64,
    rng: &mut R,
) -> Result<Vec<Event>> {
    let pixels = corner_sensor_pixels(&cfg.geometry);
    let k_inv = cfg.camera.k_inv();
    let noise = Normal::new(1.0, cfg.threshold_noise.max(0.0)).expect("finite std");
    let thresholds: Vec<f64> = pixels
        .iter()
        .map(|_| (cfg.threshold * noise.sample(rng)).max(0.2 * cfg.threshold))
        .collect();
    let cam_px = |(sx, sy): (u16, u16)| ((sx - cfg.geometry.crop_x) as f64, (sy - cfg.geometry.crop_y) as f64);
    let k0 = trajectory.at(0.0);
    let mut reference = Vec::with_capacity(pixels.len());
    let mut last = Vec::with_capacity(pixels.len());
    for &p in &pixels {
        let l = log_intensity(texture, &k0, &cfg.camera, &k_inv, cam_px(p), cfg.floor)?;
        reference.push(l);
        last.push(l);
    }
    let mut events = Vec::new();
    let dt = cfg.sample_dt_us.max(1);
    let mut t_prev = 0u64;
    while t_prev < duration_us {
        let t_now = (t_prev + dt).min(duration_us);
        let k = trajectory.at(t_now as f64 * 1e-6);
        for (i, &p) in pixels.iter().enumerate() {
            let l = log_intensity(texture, &k, &cfg.camera, &k_inv, cam_px(p), cfg.floor)?;
            let c = thresholds[i];
            let l0 = last[i];
            while (l - reference[i]).abs() >= c {
                let up = l > reference[i];
                let target = reference[i] + if up { c } else { -c };
                let frac = if l != l0 { ((target - l0) / (l - l0)).clamp(0.0, 1.0) } else { 1.0 };
                let t = t_prev as f64 + frac * (t_now - t_prev) as f64;
                let t = (t.floor() as u64).min(duration_us - 1);
                events.push(Event::new(t, p.0, p.1, if up { Polarity::Pos } else { Polarity::Neg }));
                reference[i] = target;
            }
            last[i] = l;
        }
        t_prev = t_now;
    }
    events.sort_by_key(|e| e.t);
    Ok(events)
}

/// Pose samples at `rate_hz` over `[0, duration_us]`.
pub fn sample_poses(trajectory: &dyn Trajectory, duration_us: u64, rate_hz: f64) -> Vec<PoseSample> {
    let step = 1e6 / rate_hz;
    let n = (duration_us as f64 / step).floor() as usize;
    (0..=n)
        .map(|i| {
            let t = (i as f64 * step).round() as u64;
            let k = trajectory.at(t as f64 * 1e-6);
            let q = k.attitude.quaternion();
            PoseSample {
                t,
                position: k.position.into(),
                orientation: [q.w, q.i, q.j, q.k],
            }
        })
        .collect()
}

/// Ground-truth corner flows implied by the motion at time `t` (s).
pub fn ground_truth_corner_flows(
    kin: &BodyKinematics,
    cam: &CameraModel,
    geometry: &SensorGeometry,
    unit: FlowUnit,
    units: &UnitContext,
) -> Result<CornerFlowSet> {
    let r_wb = kin.attitude.to_rotation_matrix().into_inner();
    let v_b = r_wb.transpose() * kin.velocity;
    let p_z = cam.camera_height(kin.position[2], &r_wb);
    let hdot = continuous_homography(&kin.omega, &v_b, p_z, &r_wb, cam)?;
    // corners of the working frame expressed in camera pixels
    let d = geometry.downsample as f64;
    let corners = geometry.frame_corners().map(|c| Vector3::new(c[0] * d, c[1] * d, 1.0));
    let flows = corner_flows_from_hdot(&hdot, &corners);
    Ok(CornerFlowSet::new(
        flows.flows.map(|f| convert_flow(f, FlowUnit::CameraPxPerSecond, unit, units)),
        unit,
    ))
}

/// A synthetic recording with the motion that produced it.
#[derive(Debug, Clone)]
pub struct TranslatingSequence {
    pub events: Vec<Event>,
    pub motion: ConstantMotion,
    /// Uniform image flow in working-frame px/ms.
    pub flow_px_ms: [f64; 2],
}

/// Level flight over a fresh texture with a random image flow of at most
/// `max_px_window` working-frame pixels per window.
pub fn translating_sequence<R: Rng + ?Sized>(
    cfg: &EventSimConfig,
    texture_cfg: &TextureConfig,
    max_px_window: f64,
    duration_us: u64,
    rng: &mut R,
) -> Result<TranslatingSequence> {
    let texture = Texture::random(texture_cfg, rng);
    let height = 1.0;
    let units = UnitContext::default();
    let mag = max_px_window * rng.random_range(0.0f64..1.0).sqrt();
    let ang = rng.random_range(0.0..std::f64::consts::TAU);
    let flow_win = [mag * ang.cos(), mag * ang.sin()];
    let flow_ms = convert_flow(flow_win, FlowUnit::PxPerWindow, FlowUnit::PxPerMs, &units);
    // image flow -nu * f for a level camera: nu_c = v_c / h
    let norm = convert_flow(flow_ms, FlowUnit::PxPerMs, FlowUnit::NormalizedPerSecond, &units);
    let v_c = Vector3::new(-norm[0] * height, -norm[1] * height, 0.0);
    let v_b = cfg.camera.r_cb.transpose() * v_c;
    let mut start = Vector3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), height);
    // the camera offset changes the camera height; keep the camera at `height`
    start[2] -= cfg.camera.t_cb[2];
    let motion = ConstantMotion {
        start,
        velocity: v_b,
        roll: 0.0,
        pitch: 0.0,
        yaw: 0.0,
        yaw_rate: 0.0,
    };
    let events = simulate_events(&texture, &motion, cfg, duration_us, rng)?;
    Ok(TranslatingSequence {
        events,
        motion,
        flow_px_ms: flow_ms,
    })
}
