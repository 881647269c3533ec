//! Contrast-maximization loss on buffered corner flows.
//!
//! Each buffer step holds one event window and the four corner flows the
//! network produced for it (working-frame px/ms). The flows of a step are
//! turned into a homography, the homography gives a dense flow for every
//! event of that step, and the events of the whole buffer are warped to the
//! buffer end (forward) and start (backward). The average-timestamp images
//! are built per corner on a canvas that extends the patch by a margin.

use crate::error::Result;
use crate::events::{CornerPatch, LocalEvent, SensorGeometry, WINDOW_US};
use crate::homography::{solve_from_displacements, FlowUnit, FourPointSolution, UnitContext};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub geometry: SensorGeometry,
    pub window_us: u64,
    /// Canvas margin around each 16x16 patch, pixels.
    pub margin: usize,
    pub eps: f64,
    pub smooth_weight: f64,
    pub charbonnier_eta: f64,
    pub charbonnier_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            geometry: SensorGeometry::default(),
            window_us: WINDOW_US,
            margin: 4,
            eps: 1e-9,
            smooth_weight: 0.1,
            charbonnier_eta: 1e-3,
            charbonnier_alpha: 0.5,
        }
    }
}

impl LossConfig {
    fn units(&self) -> UnitContext {
        UnitContext {
            window_ms: self.window_us as f64 / 1000.0,
            ..UnitContext::default()
        }
    }

    fn canvas_side(&self) -> usize {
        self.geometry.patch as usize + 2 * self.margin
    }
}

/// One event window of the training buffer and the flows estimated for it.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferStep {
    pub t_start: u64,
    pub patches: [CornerPatch; 4],
    /// Corner flows TL TR BR BL in working-frame px/ms.
    pub flows: [[f64; 2]; 4],
}

/// Up to five consecutive steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventFlowBuffer {
    pub steps: Vec<BufferStep>,
}

impl EventFlowBuffer {
    pub fn event_count(&self) -> usize {
        self.steps.iter().flat_map(|s| &s.patches).map(|p| p.events.len()).sum()
    }

    pub fn t_range(&self, window_us: u64) -> (u64, u64) {
        match (self.steps.first(), self.steps.last()) {
            (Some(a), Some(b)) => (a.t_start, b.t_start + window_us),
            _ => (0, 0),
        }
    }
}

/// `x' = x + (t_ref - t) u`, with `u` in px per unit of `t`.
pub fn warp_event(x: [f64; 2], t: f64, t_ref: f64, u: [f64; 2]) -> [f64; 2] {
    let dt = t_ref - t;
    [x[0] + dt * u[0], x[1] + dt * u[1]]
}

/// A warped event ready for accumulation: canvas position, timestamp weight,
/// polarity plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpedEvent {
    pub x: f64,
    pub y: f64,
    pub weight: f64,
    pub plane: usize,
}

/// Average-timestamp images of both polarities plus the bilinear weight sums.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestampImage {
    pub width: usize,
    pub height: usize,
    /// `[neg, pos]` weighted timestamp sums.
    pub num: [Vec<f64>; 2],
    /// `[neg, pos]` bilinear weight sums.
    pub den: [Vec<f64>; 2],
    pub eps: f64,
}

#[inline]
fn taps(v: f64) -> [(isize, f64, f64); 2] {
    // (pixel, kernel value, d kernel / d v)
    let f = v.floor();
    let a = v - f;
    let i = f as isize;
    let s1 = if a > 0.0 { -1.0 } else { 0.0 };
    [(i, 1.0 - a, s1), (i + 1, a, 1.0)]
}

impl TimestampImage {
    pub fn accumulate(events: &[WarpedEvent], width: usize, height: usize, eps: f64) -> Self {
        let n = width * height;
        let mut img = Self {
            width,
            height,
            num: [vec![0.0; n], vec![0.0; n]],
            den: [vec![0.0; n], vec![0.0; n]],
            eps,
        };
        for e in events {
            for (ix, kx, _) in taps(e.x) {
                if kx <= 0.0 || ix < 0 || ix >= width as isize {
                    continue;
                }
                for (iy, ky, _) in taps(e.y) {
                    if ky <= 0.0 || iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let idx = iy as usize * width + ix as usize;
                    let k = kx * ky;
                    img.num[e.plane][idx] += k * e.weight;
                    img.den[e.plane][idx] += k;
                }
            }
        }
        img
    }

    pub fn value(&self, plane: usize, idx: usize) -> f64 {
        self.num[plane][idx] / (self.den[plane][idx] + self.eps)
    }

    /// Pixels reached by at least one warped event of either polarity.
    pub fn occupied(&self) -> usize {
        (0..self.width * self.height)
            .filter(|&i| self.den[0][i] + self.den[1][i] > 0.0)
            .count()
    }

    /// Sum of squared timestamps over the occupied-pixel count.
    pub fn focus(&self) -> f64 {
        let sum: f64 = (0..2)
            .flat_map(|p| (0..self.width * self.height).map(move |i| (p, i)))
            .map(|(p, i)| self.value(p, i).powi(2))
            .sum();
        sum / (self.occupied() as f64 + self.eps)
    }

    /// Gradient of [`focus`](Self::focus) with respect to each event's canvas
    /// position (the occupied count is piecewise constant).
    pub fn focus_grad(&self, events: &[WarpedEvent]) -> Vec<[f64; 2]> {
        let c = self.occupied() as f64 + self.eps;
        events
            .iter()
            .map(|e| {
                let mut g = [0.0; 2];
                for (ix, kx, dkx) in taps(e.x) {
                    if kx <= 0.0 || ix < 0 || ix >= self.width as isize {
                        continue;
                    }
                    for (iy, ky, dky) in taps(e.y) {
                        if ky <= 0.0 || iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let idx = iy as usize * self.width + ix as usize;
                        let t = self.value(e.plane, idx);
                        let dl_dk = 2.0 * t / c * (e.weight - t) / (self.den[e.plane][idx] + self.eps);
                        g[0] += dl_dk * dkx * ky;
                        g[1] += dl_dk * kx * dky;
                    }
                }
                g
            })
            .collect()
    }
}

/// Charbonnier penalty `(z^2 + eta^2)^alpha` on a flow difference.
pub fn charbonnier(d: [f64; 2], eta: f64, alpha: f64) -> f64 {
    (d[0] * d[0] + d[1] * d[1] + eta * eta).powf(alpha)
}

/// Mean Charbonnier penalty over corners and adjacent step pairs.
pub fn smoothness_loss(flows: &[[[f64; 2]; 4]], cfg: &LossConfig) -> f64 {
    smoothness_with_grad(flows, cfg).0
}

fn smoothness_with_grad(flows: &[[[f64; 2]; 4]], cfg: &LossConfig) -> (f64, Vec<[[f64; 2]; 4]>) {
    let mut grad = vec![[[0.0; 2]; 4]; flows.len()];
    if flows.len() < 2 {
        return (0.0, grad);
    }
    let n = (4 * (flows.len() - 1)) as f64;
    let (eta, alpha) = (cfg.charbonnier_eta, cfg.charbonnier_alpha);
    let mut total = 0.0;
    for i in 0..flows.len() - 1 {
        for k in 0..4 {
            let d = [flows[i + 1][k][0] - flows[i][k][0], flows[i + 1][k][1] - flows[i][k][1]];
            let r2 = d[0] * d[0] + d[1] * d[1] + eta * eta;
            total += r2.powf(alpha);
            let s = 2.0 * alpha * r2.powf(alpha - 1.0) / n;
            for c in 0..2 {
                grad[i + 1][k][c] += s * d[c];
                grad[i][k][c] -= s * d[c];
            }
        }
    }
    (total / n, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub contrast: f64,
    pub smooth: f64,
    pub total: f64,
    /// d total / d flow for every step and corner (px/ms).
    pub grad: Vec<[[f64; 2]; 4]>,
}

struct Prepared {
    /// Per corner: events with (step, frame pos, local canvas pos, t norm, dt fw, dt bw, plane).
    corners: [Vec<PreparedEvent>; 4],
    solutions: Vec<FourPointSolution>,
}

#[derive(Clone, Copy)]
struct PreparedEvent {
    step: usize,
    frame: [f64; 2],
    canvas: [f64; 2],
    t_norm: f64,
    dt: [f64; 2],
    plane: usize,
}

fn prepare(buffer: &EventFlowBuffer, cfg: &LossConfig) -> Result<Prepared> {
    let units = cfg.units();
    let per_window = units.factor(FlowUnit::PxPerMs, FlowUnit::PxPerWindow);
    let src = cfg.geometry.frame_corners();
    let solutions = buffer
        .steps
        .iter()
        .map(|s| {
            let disp = s.flows.map(|f| [f[0] * per_window[0], f[1] * per_window[1]]);
            solve_from_displacements(&src, &disp)
        })
        .collect::<Result<Vec<_>>>()?;
    let (t0, t1) = buffer.t_range(cfg.window_us);
    let span = (t1 - t0).max(1) as f64;
    let w = cfg.window_us as f64;
    let m = cfg.margin as f64;
    let mut corners: [Vec<PreparedEvent>; 4] = Default::default();
    for (step, s) in buffer.steps.iter().enumerate() {
        for patch in &s.patches {
            for e in &patch.events {
                let LocalEvent { t, x, y, corner, polarity } = *e;
                corners[corner.index()].push(PreparedEvent {
                    step,
                    frame: cfg.geometry.to_frame(corner, x as f64, y as f64),
                    canvas: [x as f64 + m, y as f64 + m],
                    t_norm: (t.saturating_sub(t0)) as f64 / span,
                    dt: [(t1 as f64 - t as f64) / w, (t0 as f64 - t as f64) / w],
                    plane: polarity.index(),
                });
            }
        }
    }
    Ok(Prepared { corners, solutions })
}

/// Total loss and its gradient with respect to every buffered corner flow.
pub fn loss_and_grad(buffer: &EventFlowBuffer, cfg: &LossConfig) -> Result<LossOutput> {
    evaluate(buffer, cfg, true)
}

/// Total loss without gradients.
pub fn total_loss(buffer: &EventFlowBuffer, cfg: &LossConfig) -> Result<LossOutput> {
    evaluate(buffer, cfg, false)
}

/// Forward plus backward focus terms summed over corners.
pub fn contrast_loss(buffer: &EventFlowBuffer, cfg: &LossConfig) -> Result<f64> {
    Ok(evaluate(buffer, cfg, false)?.contrast)
}

fn evaluate(buffer: &EventFlowBuffer, cfg: &LossConfig, want_grad: bool) -> Result<LossOutput> {
    let flows: Vec<[[f64; 2]; 4]> = buffer.steps.iter().map(|s| s.flows).collect();
    let (smooth, smooth_grad) = smoothness_with_grad(&flows, cfg);
    let mut grad: Vec<[[f64; 2]; 4]> = smooth_grad
        .iter()
        .map(|g| g.map(|c| [c[0] * cfg.smooth_weight, c[1] * cfg.smooth_weight]))
        .collect();
    if buffer.event_count() == 0 {
        log::debug!("contrast loss skipped: buffer has no events");
        return Ok(LossOutput {
            contrast: 0.0,
            smooth,
            total: cfg.smooth_weight * smooth,
            grad,
        });
    }
    let prep = prepare(buffer, cfg)?;
    let side = cfg.canvas_side();
    let mut contrast = 0.0;
    let mut grad_h = vec![[0.0; 8]; buffer.steps.len()];
    for events in &prep.corners {
        if events.is_empty() {
            continue;
        }
        // flow and its h-Jacobian per event, shared by both directions
        let mut jac = Vec::with_capacity(events.len());
        for e in events {
            jac.push(prep.solutions[e.step].homography.flow_jacobian(e.frame[0], e.frame[1])?);
        }
        for dir in 0..2 {
            let warped: Vec<WarpedEvent> = events
                .iter()
                .zip(&jac)
                .map(|(e, (u, _))| {
                    let p = warp_event(e.canvas, 0.0, e.dt[dir], *u);
                    WarpedEvent {
                        x: p[0],
                        y: p[1],
                        weight: if dir == 0 { e.t_norm } else { 1.0 - e.t_norm },
                        plane: e.plane,
                    }
                })
                .collect();
            let img = TimestampImage::accumulate(&warped, side, side, cfg.eps);
            contrast += img.focus();
            if want_grad {
                for ((e, (_, j)), g) in events.iter().zip(&jac).zip(img.focus_grad(&warped)) {
                    let gh = &mut grad_h[e.step];
                    for (i, v) in gh.iter_mut().enumerate() {
                        *v += e.dt[dir] * (g[0] * j[0][i] + g[1] * j[1][i]);
                    }
                }
            }
        }
    }
    if want_grad {
        let per_window = cfg.units().factor(FlowUnit::PxPerMs, FlowUnit::PxPerWindow);
        for (step, sol) in prep.solutions.iter().enumerate() {
            let gd = sol.backward(&grad_h[step]);
            for k in 0..4 {
                for c in 0..2 {
                    grad[step][k][c] += gd[k][c] * per_window[c];
                }
            }
        }
    }
    if !want_grad {
        grad.iter_mut().for_each(|g| *g = [[0.0; 2]; 4]);
    }
    Ok(LossOutput {
        contrast,
        smooth,
        total: contrast + cfg.smooth_weight * smooth,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{Corner, Polarity};
    use approx::assert_abs_diff_eq;

    fn ev(t: u64, x: u8, y: u8, corner: Corner, polarity: Polarity) -> LocalEvent {
        LocalEvent { t, corner, x, y, polarity }
    }

    fn step(t_start: u64, events: Vec<LocalEvent>, flows: [[f64; 2]; 4]) -> BufferStep {
        let mut patches = Corner::ALL.map(CornerPatch::empty);
        for e in events {
            patches[e.corner.index()].events.push(e);
        }
        BufferStep { t_start, patches, flows }
    }

    #[test]
    fn warp_examples() {
        assert_eq!(warp_event([3.0, 4.0], 1.0, 1.0, [7.0, 7.0]), [3.0, 4.0]);
        assert_eq!(warp_event([3.0, 4.0], 0.5, 1.0, [2.0, 0.0]), [4.0, 4.0]);
        let u = [0.3, -1.2];
        let fw = warp_event([5.0, 5.0], 0.2, 1.0, u);
        let bw = warp_event([5.0, 5.0], 0.2, 0.0, u);
        assert_abs_diff_eq!(fw[0] - bw[0], u[0], epsilon = 1e-15);
        assert_abs_diff_eq!(fw[1] - bw[1], u[1], epsilon = 1e-15);
    }

    #[test]
    fn timestamp_image_examples() {
        let one = |x, w| WarpedEvent { x, y: 5.0, weight: w, plane: 1 };
        let img = TimestampImage::accumulate(&[one(5.0, 1.0)], 10, 10, 1e-9);
        assert_abs_diff_eq!(img.value(1, 55), 1.0 / (1.0 + 1e-9), epsilon = 1e-15);
        assert_eq!(img.occupied(), 1);
        let img = TimestampImage::accumulate(&[one(5.5, 1.0)], 10, 10, 1e-9);
        assert_abs_diff_eq!(img.value(1, 55), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(img.value(1, 56), 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(img.den[1][55], 0.5, epsilon = 1e-15);
        let img = TimestampImage::accumulate(&[one(5.0, 0.2), one(5.0, 0.8)], 10, 10, 1e-9);
        assert_abs_diff_eq!(img.value(1, 55), 0.5, epsilon = 1e-8);
        // off-canvas events leave no trace
        let img = TimestampImage::accumulate(&[one(-3.0, 1.0), one(40.0, 1.0)], 10, 10, 1e-9);
        assert_eq!(img.occupied(), 0);
    }

    #[test]
    fn smoothness_examples() {
        let cfg = LossConfig::default();
        let c = vec![[[0.2, 0.1]; 4]; 5];
        assert_abs_diff_eq!(smoothness_loss(&c, &cfg), 1e-3, epsilon = 1e-15);
        assert_eq!(smoothness_loss(&c[..1], &cfg), 0.0);
        let mut one = vec![[[0.0; 2]; 4]; 2];
        one[1] = [[3.0, 4.0], [0.0; 2], [0.0; 2], [0.0; 2]];
        let per_corner = charbonnier([3.0, 4.0], 1e-3, 0.5);
        assert_abs_diff_eq!(per_corner, 5.0, epsilon = 1e-6);
        let small = smoothness_loss(&one, &cfg);
        one[1][0] = [30.0, 40.0];
        assert!(smoothness_loss(&one, &cfg) > small);
    }

    #[test]
    fn empty_buffer_is_zero() {
        let cfg = LossConfig::default();
        let out = loss_and_grad(&EventFlowBuffer::default(), &cfg).unwrap();
        assert_eq!(out.total, 0.0);
        let b = EventFlowBuffer {
            steps: vec![step(0, vec![], [[0.1, 0.0]; 4]), step(5000, vec![], [[0.1, 0.0]; 4])],
        };
        let out = loss_and_grad(&b, &cfg).unwrap();
        assert_eq!(out.contrast, 0.0);
        assert_abs_diff_eq!(out.total, 0.1 * 1e-3, epsilon = 1e-15);
    }

    #[test]
    fn total_is_weighted_sum() {
        let cfg = LossConfig::default();
        let b = EventFlowBuffer {
            steps: vec![
                step(0, vec![ev(100, 3, 3, Corner::TopLeft, Polarity::Pos)], [[0.1, 0.0]; 4]),
                step(5000, vec![ev(6000, 4, 3, Corner::TopLeft, Polarity::Pos)], [[0.2, 0.0]; 4]),
            ],
        };
        let out = total_loss(&b, &cfg).unwrap();
        assert_abs_diff_eq!(out.total, out.contrast + 0.1 * out.smooth, epsilon = 1e-15);
    }

    #[test]
    fn gradient_matches_differences_on_small_buffer() {
        let cfg = LossConfig::default();
        let mut events = Vec::new();
        for (i, &(x, y)) in [(3u8, 4u8), (7, 9), (12, 2), (5, 5)].iter().enumerate() {
            for c in Corner::ALL {
                events.push(ev(1234 + 517 * i as u64, x, y, c, if i % 2 == 0 { Polarity::Pos } else { Polarity::Neg }));
            }
        }
        let mut steps = Vec::new();
        for s in 0..3u64 {
            let evs = events
                .iter()
                .map(|e| LocalEvent { t: e.t + s * 5000, ..*e })
                .collect();
            let f = 0.013 + 0.011 * s as f64;
            steps.push(step(s * 5000, evs, [[f, -0.07], [0.05, f], [-f, 0.031], [0.043, 0.017]]));
        }
        let buf = EventFlowBuffer { steps };
        let out = loss_and_grad(&buf, &cfg).unwrap();
        let h = 1e-6;
        for s in 0..3 {
            for k in 0..4 {
                for c in 0..2 {
                    let mut p = buf.clone();
                    p.steps[s].flows[k][c] += h;
                    let mut m = buf.clone();
                    m.steps[s].flows[k][c] -= h;
                    let fd = (total_loss(&p, &cfg).unwrap().total - total_loss(&m, &cfg).unwrap().total) / (2.0 * h);
                    let g = out.grad[s][k][c];
                    assert!((fd - g).abs() <= 1e-5 * (1.0 + fd.abs()), "step {s} corner {k} comp {c}: fd {fd} vs {g}");
                }
            }
        }
    }
}
