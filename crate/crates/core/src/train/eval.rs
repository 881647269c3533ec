//! Endpoint-error evaluation of a quantized network.

use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::events::{encode_input_spikes, preprocess_stream, window_and_route_until, Event, PoseSample, SensorGeometry, WINDOW_US};
use crate::homography::{convert_flow, CameraModel, CornerFlowSet, FlowUnit, ObservableModel, UnitContext};
use crate::io::CsvTable;
use crate::snn::network::{CompiledNetwork, NetworkWeights, VisionNetwork};
use crate::synth::{ground_truth_corner_flows, BodyKinematics};

use super::Clip;

/// EPE statistics in working-frame px per window.
#[derive(Debug, Clone)]
pub struct EpeReport {
    pub mean: f64,
    pub per_corner: [f64; 4],
    /// Windows that entered the statistics.
    pub count: usize,
    /// One row per window (including warm-up windows, flagged).
    pub trace: CsvTable,
}

pub const TRACE_HEADER: [&str; 29] = [
    "window", "t", "scored", "epe", "pred_tl_x", "pred_tl_y", "pred_tr_x", "pred_tr_y", "pred_br_x", "pred_br_y",
    "pred_bl_x", "pred_bl_y", "gt_tl_x", "gt_tl_y", "gt_tr_x", "gt_tr_y", "gt_br_x", "gt_br_y", "gt_bl_x",
    "gt_bl_y", "nu_x_hat", "nu_y_hat", "nu_z_hat", "omega_z_hat", "nu_x_gt", "nu_y_gt", "nu_z_gt", "omega_z_gt",
    "spikes",
];

struct Accumulator {
    sums: [f64; 4],
    count: usize,
    trace: CsvTable,
    units: UnitContext,
    model: ObservableModel,
}

impl Accumulator {
    fn new(cam: &CameraModel) -> Result<Self> {
        Ok(Self {
            sums: [0.0; 4],
            count: 0,
            trace: CsvTable::new(&TRACE_HEADER),
            units: UnitContext::default(),
            model: ObservableModel::for_camera(cam)?,
        })
    }

    fn observables(&self, flows: &[[f64; 2]; 4]) -> Result<[f64; 4]> {
        let set = CornerFlowSet::new(*flows, FlowUnit::PxPerMs).to_unit(FlowUnit::NormalizedPerSecond, &self.units);
        Ok(self.model.estimate(&set)?.as_array())
    }

    /// Flows in px/ms; errors are scored in px/window.
    fn push(&mut self, window: usize, t: f64, pred: &[[f64; 2]; 4], gt: &[[f64; 2]; 4], scored: bool, spikes: usize) -> Result<()> {
        let to_win = |f: [f64; 2]| convert_flow(f, FlowUnit::PxPerMs, FlowUnit::PxPerWindow, &self.units);
        let mut errs = [0.0; 4];
        for c in 0..4 {
            let (p, g) = (to_win(pred[c]), to_win(gt[c]));
            errs[c] = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
        }
        if scored {
            for c in 0..4 {
                self.sums[c] += errs[c];
            }
            self.count += 1;
        }
        let mut row = vec![window as f64, t, scored as u8 as f64, errs.iter().sum::<f64>() / 4.0];
        row.extend(pred.iter().flat_map(|f| to_win(*f)));
        row.extend(gt.iter().flat_map(|f| to_win(*f)));
        row.extend(self.observables(pred)?);
        if gt.iter().flatten().all(|v| v.is_finite()) {
            row.extend(self.observables(gt)?);
        } else {
            row.extend([f64::NAN; 4]);
        }
        row.push(spikes as f64);
        self.trace.push_row(&row);
        Ok(())
    }

    fn finish(self) -> EpeReport {
        let n = self.count.max(1) as f64;
        let per_corner = self.sums.map(|s| s / n);
        EpeReport {
            mean: if self.count == 0 { f64::NAN } else { per_corner.iter().sum::<f64>() / 4.0 },
            per_corner,
            count: self.count,
            trace: self.trace,
        }
    }
}

fn inputs(w: &crate::events::RoutedWindow) -> [crate::tensor::SpikeTensor; 4] {
    std::array::from_fn(|c| encode_input_spikes(&w.patches[c]))
}

/// EPE over synthetic clips; each clip starts from reset and its first
/// `warmup` windows are not scored.
pub fn evaluate_clips(weights: &NetworkWeights, clips: &[Clip], warmup: usize) -> Result<EpeReport> {
    let net = CompiledNetwork::new(weights.clone())?;
    let mut acc = Accumulator::new(&CameraModel::default())?;
    for clip in clips {
        let mut vision = VisionNetwork::new(Arc::clone(&net));
        for (k, w) in clip.windows.iter().enumerate() {
            let out = vision.step(&inputs(w))?;
            let gt = &clip.flows[k];
            let known = gt.iter().flatten().all(|v| v.is_finite());
            acc.push(k, w.window.t_start as f64 * 1e-6, &out.flows, gt, k >= warmup && known, out.spikes)?;
        }
    }
    Ok(acc.finish())
}

fn interpolate(poses: &[PoseSample], t_us: f64) -> Result<(Vector3<f64>, UnitQuaternion<f64>)> {
    let first = poses.first().ok_or_else(|| Error::Alignment("pose file is empty".into()))?;
    let last = poses.last().unwrap();
    if t_us < first.t as f64 || t_us > last.t as f64 {
        return Err(Error::Alignment(format!(
            "time {:.0} us outside pose range [{}, {}]",
            t_us, first.t, last.t
        )));
    }
    let k = poses.partition_point(|p| (p.t as f64) <= t_us).clamp(1, poses.len() - 1);
    let (a, b) = (&poses[k - 1], &poses[k]);
    let span = (b.t - a.t).max(1) as f64;
    let s = ((t_us - a.t as f64) / span).clamp(0.0, 1.0);
    let pa = Vector3::from(a.position);
    let pb = Vector3::from(b.position);
    let quat = |o: [f64; 4]| UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(o[0], o[1], o[2], o[3]));
    let qa = quat(a.orientation);
    let qb = quat(b.orientation);
    let q = qa.try_slerp(&qb, s, 1e-12).unwrap_or(qa);
    Ok((pa + (pb - pa) * s, q))
}

/// Body kinematics at `t_us` by central differences over `half_us`.
pub fn kinematics_from_poses(poses: &[PoseSample], t_us: f64, half_us: f64) -> Result<BodyKinematics> {
    let (p, q) = interpolate(poses, t_us)?;
    let first = poses.first().map_or(0.0, |p| p.t as f64);
    let last = poses.last().map_or(0.0, |p| p.t as f64);
    let t0 = (t_us - half_us).max(first);
    let t1 = (t_us + half_us).min(last);
    let dt = (t1 - t0) * 1e-6;
    if dt <= 0.0 {
        return Err(Error::Alignment("pose samples too sparse to differentiate".into()));
    }
    let (p0, q0) = interpolate(poses, t0)?;
    let (p1, q1) = interpolate(poses, t1)?;
    let dq = q0.inverse() * q1;
    Ok(BodyKinematics {
        position: p,
        attitude: q,
        velocity: (p1 - p0) / dt,
        omega: dq.scaled_axis() / dt,
    })
}

/// EPE of a network over a recorded event stream with a pose file.
pub fn evaluate_recording(
    weights: &NetworkWeights,
    events: &[Event],
    poses: &[PoseSample],
    cam: &CameraModel,
    geometry: &SensorGeometry,
    warmup: usize,
) -> Result<EpeReport> {
    let first = poses.first().ok_or_else(|| Error::Alignment("pose file is empty".into()))?;
    let last = poses.last().unwrap();
    let end = last.t.min(events.last().map_or(0, |e| e.t + 1));
    let net = CompiledNetwork::new(weights.clone())?;
    let mut vision = VisionNetwork::new(net);
    let mut acc = Accumulator::new(cam)?;
    let units = UnitContext::default();
    for (k, w) in window_and_route_until(preprocess_stream(geometry, events), end).enumerate() {
        if w.window.t_end > end {
            break;
        }
        let out = vision.step(&inputs(&w))?;
        let mid = (w.window.t_start + WINDOW_US / 2) as f64;
        if w.window.t_start < first.t {
            continue;
        }
        let kin = kinematics_from_poses(poses, mid, WINDOW_US as f64 / 2.0)?;
        let gt = ground_truth_corner_flows(&kin, cam, geometry, FlowUnit::PxPerMs, &units)?;
        acc.push(k, w.window.t_start as f64 * 1e-6, &out.flows, &gt.flows, k >= warmup, out.spikes)?;
    }
    if acc.count == 0 {
        return Err(Error::Alignment("no event window overlaps the pose samples".into()));
    }
    Ok(acc.finish())
}
