//! Planar homography tools: four-point solve, dense flow, continuous
//! homography ground truth and visual observables.
//!
//! Pixel conventions: the network and the loss work in the 90x90 working
//! frame, the camera model in the 180x180 crop (Table-style intrinsics with
//! principal point (90, 90)). Unit conversions go through [`convert_flow`].

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Condition number above which a four-point system is rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Eight free components `h11 h12 h13 h21 h22 h23 h31 h32`, `h33 = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    pub h: [f64; 8],
}

impl Homography {
    pub const IDENTITY: Homography = Homography {
        h: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
    };

    pub fn matrix(&self) -> Matrix3<f64> {
        let h = &self.h;
        Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0)
    }

    /// Projective denominator at `(x, y)`.
    #[inline]
    pub fn denominator(&self, x: f64, y: f64) -> f64 {
        self.h[6] * x + self.h[7] * y + 1.0
    }

    /// Apply the map including the division by the third component.
    pub fn project(&self, x: f64, y: f64) -> Result<[f64; 2]> {
        let h = &self.h;
        let w = self.denominator(x, y);
        if !(w > 0.0) {
            return Err(Error::Degenerate(format!("projective denominator {w} at ({x}, {y})")));
        }
        Ok([(h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w])
    }

    /// Displacement of pixel `(x, y)`.
    pub fn flow_at(&self, x: f64, y: f64) -> Result<[f64; 2]> {
        let p = self.project(x, y)?;
        Ok([p[0] - x, p[1] - y])
    }

    /// Flow at `(x, y)` and its Jacobian with respect to `h`, rows = (u, v).
    pub fn flow_jacobian(&self, x: f64, y: f64) -> Result<([f64; 2], [[f64; 8]; 2])> {
        let h = &self.h;
        let w = self.denominator(x, y);
        if !(w > 0.0) {
            return Err(Error::Degenerate(format!("projective denominator {w} at ({x}, {y})")));
        }
        let nx = h[0] * x + h[1] * y + h[2];
        let ny = h[3] * x + h[4] * y + h[5];
        let px = nx / w;
        let py = ny / w;
        let iw = 1.0 / w;
        let ju = [x * iw, y * iw, iw, 0.0, 0.0, 0.0, -px * x * iw, -px * y * iw];
        let jv = [0.0, 0.0, 0.0, x * iw, y * iw, iw, -py * x * iw, -py * y * iw];
        Ok(([px - x, py - y], [ju, jv]))
    }
}

/// Result of a four-point solve, kept for differentiation.
#[derive(Debug, Clone)]
pub struct FourPointSolution {
    pub homography: Homography,
    pub src: [[f64; 2]; 4],
    /// Inverse of the stacked system matrix.
    pub a_inv: [[f64; 8]; 8],
    pub condition: f64,
}

fn system(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> ([[f64; 8]; 8], [f64; 8]) {
    let mut a = [[0.0; 8]; 8];
    let mut b = [0.0; 8];
    for k in 0..4 {
        let [x, y] = src[k];
        let [xp, yp] = dst[k];
        a[2 * k] = [x, y, 1.0, 0.0, 0.0, 0.0, -xp * x, -xp * y];
        a[2 * k + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -yp * x, -yp * y];
        b[2 * k] = xp;
        b[2 * k + 1] = yp;
    }
    (a, b)
}

fn norm_inf(a: &[[f64; 8]; 8]) -> f64 {
    a.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Gauss-Jordan inversion with partial pivoting.
fn invert8(a: &[[f64; 8]; 8]) -> Option<[[f64; 8]; 8]> {
    let mut m = *a;
    let mut inv = [[0.0; 8]; 8];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..8 {
        let piv = (col..8).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col] == 0.0 || !m[piv][col].is_finite() {
            return None;
        }
        m.swap(col, piv);
        inv.swap(col, piv);
        let d = 1.0 / m[col][col];
        for k in 0..8 {
            m[col][k] *= d;
            inv[col][k] *= d;
        }
        for r in 0..8 {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for k in 0..8 {
                        m[r][k] -= f * m[col][k];
                        inv[r][k] -= f * inv[col][k];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Solve `A x = b` by Gaussian elimination with partial pivoting.
fn gauss_solve(a: &[[f64; 8]; 8], b: &[f64; 8]) -> Option<[f64; 8]> {
    let mut m = *a;
    let mut r = *b;
    for col in 0..8 {
        let piv = (col..8).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col] == 0.0 {
            return None;
        }
        m.swap(col, piv);
        r.swap(col, piv);
        for row in col + 1..8 {
            let f = m[row][col] / m[col][col];
            if f != 0.0 {
                for k in col..8 {
                    m[row][k] -= f * m[col][k];
                }
                r[row] -= f * r[col];
            }
        }
    }
    let mut x = [0.0; 8];
    for i in (0..8).rev() {
        let s: f64 = (i + 1..8).map(|k| m[i][k] * x[k]).sum();
        x[i] = (r[i] - s) / m[i][i];
    }
    Some(x)
}

/// Homography mapping `src[k]` to `dst[k]` for the four corners.
pub fn solve_four_point(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> Result<FourPointSolution> {
    if src.iter().chain(dst).flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("four-point correspondences".into()));
    }
    let (a, b) = system(src, dst);
    let a_inv = invert8(&a).ok_or_else(|| Error::Degenerate("singular four-point system".into()))?;
    let condition = norm_inf(&a) * norm_inf(&a_inv);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Degenerate(format!("four-point system condition estimate {condition:.3e}")));
    }
    let h = gauss_solve(&a, &b).ok_or_else(|| Error::Degenerate("singular four-point system".into()))?;
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let residual = (0..8)
        .map(|i| ((0..8).map(|k| a[i][k] * h[k]).sum::<f64>() - b[i]).abs())
        .fold(0.0, f64::max);
    if residual >= 1e-9 * scale {
        return Err(Error::Degenerate(format!("four-point residual {residual:.3e}")));
    }
    Ok(FourPointSolution {
        homography: Homography { h },
        src: *src,
        a_inv,
        condition,
    })
}

/// Homography from corner displacements (`dst = src + disp`).
pub fn solve_from_displacements(src: &[[f64; 2]; 4], disp: &[[f64; 2]; 4]) -> Result<FourPointSolution> {
    let dst = std::array::from_fn(|k| [src[k][0] + disp[k][0], src[k][1] + disp[k][1]]);
    solve_four_point(src, &dst)
}

impl FourPointSolution {
    /// Back-propagate a gradient on `h` to the corner displacements.
    ///
    /// With `h = A^-1 b`, `dL/db = A^-T g` and `dL/dA = -(A^-T g) h^T`; only
    /// the destination-dependent entries of `A` and `b` vary.
    pub fn backward(&self, grad_h: &[f64; 8]) -> [[f64; 2]; 4] {
        let mut lambda = [0.0; 8];
        for (i, l) in lambda.iter_mut().enumerate() {
            *l = (0..8).map(|k| self.a_inv[k][i] * grad_h[k]).sum();
        }
        let h = &self.homography.h;
        std::array::from_fn(|k| {
            let [x, y] = self.src[k];
            let w = 1.0 + h[6] * x + h[7] * y;
            [lambda[2 * k] * w, lambda[2 * k + 1] * w]
        })
    }
}

/// Flow of every pixel in `pixels`.
pub fn dense_flow(h: &Homography, pixels: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    pixels.iter().map(|p| h.flow_at(p[0], p[1])).collect()
}

/// Unit of a flow vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowUnit {
    /// Working-frame pixels per millisecond (network output).
    PxPerMs,
    /// Working-frame pixels per event window (homography solving).
    PxPerWindow,
    /// Camera-resolution pixels per second (continuous homography).
    CameraPxPerSecond,
    /// K-normalized image coordinates per second (observables).
    NormalizedPerSecond,
}

/// Scale factors linking the flow units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitContext {
    pub window_ms: f64,
    /// Camera pixels per working-frame pixel.
    pub downsample: f64,
    pub fx: f64,
    pub fy: f64,
}

impl Default for UnitContext {
    fn default() -> Self {
        let cam = CameraModel::default();
        Self {
            window_ms: 5.0,
            downsample: 2.0,
            fx: cam.k[(0, 0)],
            fy: cam.k[(1, 1)],
        }
    }
}

impl UnitContext {
    /// Per-axis factor taking a flow in `unit` to camera px/s.
    fn to_camera_px_s(&self, unit: FlowUnit) -> [f64; 2] {
        match unit {
            FlowUnit::PxPerMs => [1000.0 * self.downsample; 2],
            FlowUnit::PxPerWindow => [1000.0 * self.downsample / self.window_ms; 2],
            FlowUnit::CameraPxPerSecond => [1.0; 2],
            FlowUnit::NormalizedPerSecond => [self.fx, self.fy],
        }
    }

    /// Per-axis multiplicative factor from `from` to `to`.
    pub fn factor(&self, from: FlowUnit, to: FlowUnit) -> [f64; 2] {
        let a = self.to_camera_px_s(from);
        let b = self.to_camera_px_s(to);
        [a[0] / b[0], a[1] / b[1]]
    }
}

/// The single conversion point between flow units.
pub fn convert_flow(flow: [f64; 2], from: FlowUnit, to: FlowUnit, ctx: &UnitContext) -> [f64; 2] {
    let f = ctx.factor(from, to);
    [flow[0] * f[0], flow[1] * f[1]]
}

/// Four corner flows, TL TR BR BL, with their unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerFlowSet {
    pub flows: [[f64; 2]; 4],
    pub unit: FlowUnit,
}

impl CornerFlowSet {
    pub fn new(flows: [[f64; 2]; 4], unit: FlowUnit) -> Self {
        Self { flows, unit }
    }

    pub fn to_unit(&self, unit: FlowUnit, ctx: &UnitContext) -> Self {
        Self {
            flows: self.flows.map(|f| convert_flow(f, self.unit, unit, ctx)),
            unit,
        }
    }

    pub fn as_vector(&self) -> [f64; 8] {
        std::array::from_fn(|i| self.flows[i / 2][i % 2])
    }

    pub fn is_finite(&self) -> bool {
        self.flows.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Camera,
    Body,
}

/// Scaled velocity (1/s) and yaw rate (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisualObservables {
    pub nu: [f64; 3],
    pub omega_z: f64,
    pub frame: Frame,
}

impl VisualObservables {
    pub fn zero(frame: Frame) -> Self {
        Self {
            nu: [0.0; 3],
            omega_z: 0.0,
            frame,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.nu[0], self.nu[1], self.nu[2], self.omega_z]
    }

    /// Camera to body frame for a camera whose rotation is `diag(1, -1, -1)`
    /// relative to the body (and back, the map is an involution).
    pub fn to_body(&self, cam: &CameraModel) -> Self {
        match self.frame {
            Frame::Body => *self,
            Frame::Camera => {
                let r = cam.r_cb.transpose();
                let nu = r * Vector3::from(self.nu);
                let wz = (r * Vector3::new(0.0, 0.0, self.omega_z))[2];
                Self {
                    nu: nu.into(),
                    omega_z: wz,
                    frame: Frame::Body,
                }
            }
        }
    }
}

/// Pinhole camera rigidly attached to the body.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub k: Matrix3<f64>,
    pub r_cb: Matrix3<f64>,
    /// Camera position in the body frame, m.
    pub t_cb: Vector3<f64>,
    /// Field-of-view corners in camera pixels, TL TR BR BL.
    pub corners_px: [[f64; 2]; 4],
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            k: Matrix3::new(188.84, 0.0, 90.0, 0.0, 188.99, 90.0, 0.0, 0.0, 1.0),
            r_cb: Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)),
            t_cb: Vector3::new(-0.005, 0.077, -0.033),
            corners_px: [[0.0, 0.0], [180.0, 0.0], [180.0, 180.0], [0.0, 180.0]],
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let orth = (self.r_cb * self.r_cb.transpose() - Matrix3::identity()).abs().max();
        if orth > 1e-9 {
            return Err(Error::Config("camera rotation is not orthonormal".into()));
        }
        if self.k.determinant().abs() < 1e-12 {
            return Err(Error::Config("camera intrinsics are singular".into()));
        }
        Ok(())
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        self.k.try_inverse().expect("validated intrinsics")
    }

    pub fn corners_homogeneous(&self) -> [Vector3<f64>; 4] {
        self.corners_px.map(|c| Vector3::new(c[0], c[1], 1.0))
    }

    /// Corners in K-normalized coordinates.
    pub fn corners_normalized(&self) -> [[f64; 2]; 4] {
        let ki = self.k_inv();
        self.corners_px.map(|c| {
            let n = ki * Vector3::new(c[0], c[1], 1.0);
            [n[0] / n[2], n[1] / n[2]]
        })
    }

    /// Body rates and velocity expressed at the camera.
    pub fn camera_motion(&self, omega_b: &Vector3<f64>, v_b: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let omega_c = self.r_cb * omega_b;
        let v_c = self.r_cb * (v_b + omega_b.cross(&self.t_cb));
        (omega_c, v_c)
    }

    /// Camera height above the ground plane.
    pub fn camera_height(&self, p_z_wb: f64, r_wb: &Matrix3<f64>) -> f64 {
        p_z_wb + (r_wb * self.t_cb)[2]
    }

    /// World down direction in the camera frame.
    pub fn down_in_camera(&self, r_wb: &Matrix3<f64>) -> Vector3<f64> {
        self.r_cb * r_wb.transpose() * Vector3::new(0.0, 0.0, -1.0)
    }
}

fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

/// Rate matrix of the ground-plane homography for the camera's own motion.
///
/// `omega_b`, `v_b` are body rates and body-frame velocity, `r_wb` the body
/// attitude (needed to express the plane normal in the camera frame).
pub fn continuous_homography(
    omega_b: &Vector3<f64>,
    v_b: &Vector3<f64>,
    p_z_wc: f64,
    r_wb: &Matrix3<f64>,
    cam: &CameraModel,
) -> Result<Matrix3<f64>> {
    if !(p_z_wc > 0.0) {
        return Err(Error::BelowGround(p_z_wc));
    }
    let (omega_c, v_c) = cam.camera_motion(omega_b, v_b);
    let e = cam.down_in_camera(r_wb);
    let inner = skew(&omega_c) + (v_c / p_z_wc) * e.transpose();
    Ok(cam.k * inner * cam.k_inv())
}

/// Corner flows `u_k = -(I - x_k e^T) Hdot x_k`, px/s, third row dropped.
/// `e` is the optical axis: the third homogeneous coordinate of `x_k`
/// stays at 1, which coincides with world down for a level camera.
pub fn corner_flows_from_hdot(hdot: &Matrix3<f64>, corners: &[Vector3<f64>; 4]) -> CornerFlowSet {
    let e = Vector3::z();
    let flows = corners.map(|x| {
        let u = -(Matrix3::identity() - x * e.transpose()) * (hdot * x);
        [u[0], u[1]]
    });
    CornerFlowSet::new(flows, FlowUnit::CameraPxPerSecond)
}

/// Linear corner-flow model in normalized coordinates and its
/// least-squares inverse.
///
/// For corner `(x, y)` and `s = [nu_x, nu_y, nu_z, omega_z]`:
/// `u = (omega_z*y - nu_x + nu_z*x, -omega_z*x - nu_y + nu_z*y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableModel {
    pub corners: [[f64; 2]; 4],
    /// 8 x 4 forward matrix.
    pub forward: [[f64; 4]; 8],
    /// 4 x 8 least-squares inverse `(A^T A)^-1 A^T`.
    pub inverse: [[f64; 8]; 4],
}

/// Explicit inverse of a 4x4 matrix by cofactor expansion.
pub fn invert4(m: &[[f64; 4]; 4]) -> Option<[[f64; 4]; 4]> {
    let a = |r: usize, c: usize| m[r][c];
    let s0 = a(0, 0) * a(1, 1) - a(1, 0) * a(0, 1);
    let s1 = a(0, 0) * a(1, 2) - a(1, 0) * a(0, 2);
    let s2 = a(0, 0) * a(1, 3) - a(1, 0) * a(0, 3);
    let s3 = a(0, 1) * a(1, 2) - a(1, 1) * a(0, 2);
    let s4 = a(0, 1) * a(1, 3) - a(1, 1) * a(0, 3);
    let s5 = a(0, 2) * a(1, 3) - a(1, 2) * a(0, 3);
    let c5 = a(2, 2) * a(3, 3) - a(3, 2) * a(2, 3);
    let c4 = a(2, 1) * a(3, 3) - a(3, 1) * a(2, 3);
    let c3 = a(2, 1) * a(3, 2) - a(3, 1) * a(2, 2);
    let c2 = a(2, 0) * a(3, 3) - a(3, 0) * a(2, 3);
    let c1 = a(2, 0) * a(3, 2) - a(3, 0) * a(2, 2);
    let c0 = a(2, 0) * a(3, 1) - a(3, 0) * a(2, 1);
    let det = s0 * c5 - s1 * c4 + s2 * c3 + s3 * c2 - s4 * c1 + s5 * c0;
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let d = 1.0 / det;
    Some([
        [
            (a(1, 1) * c5 - a(1, 2) * c4 + a(1, 3) * c3) * d,
            (-a(0, 1) * c5 + a(0, 2) * c4 - a(0, 3) * c3) * d,
            (a(3, 1) * s5 - a(3, 2) * s4 + a(3, 3) * s3) * d,
            (-a(2, 1) * s5 + a(2, 2) * s4 - a(2, 3) * s3) * d,
        ],
        [
            (-a(1, 0) * c5 + a(1, 2) * c2 - a(1, 3) * c1) * d,
            (a(0, 0) * c5 - a(0, 2) * c2 + a(0, 3) * c1) * d,
            (-a(3, 0) * s5 + a(3, 2) * s2 - a(3, 3) * s1) * d,
            (a(2, 0) * s5 - a(2, 2) * s2 + a(2, 3) * s1) * d,
        ],
        [
            (a(1, 0) * c4 - a(1, 1) * c2 + a(1, 3) * c0) * d,
            (-a(0, 0) * c4 + a(0, 1) * c2 - a(0, 3) * c0) * d,
            (a(3, 0) * s4 - a(3, 1) * s2 + a(3, 3) * s0) * d,
            (-a(2, 0) * s4 + a(2, 1) * s2 - a(2, 3) * s0) * d,
        ],
        [
            (-a(1, 0) * c3 + a(1, 1) * c1 - a(1, 2) * c0) * d,
            (a(0, 0) * c3 - a(0, 1) * c1 + a(0, 2) * c0) * d,
            (-a(3, 0) * s3 + a(3, 1) * s1 - a(3, 2) * s0) * d,
            (a(2, 0) * s3 - a(2, 1) * s1 + a(2, 2) * s0) * d,
        ],
    ])
}

impl ObservableModel {
    pub fn new(corners: [[f64; 2]; 4]) -> Result<Self> {
        let mut forward = [[0.0; 4]; 8];
        for (k, &[x, y]) in corners.iter().enumerate() {
            forward[2 * k] = [-1.0, 0.0, x, y];
            forward[2 * k + 1] = [0.0, -1.0, y, -x];
        }
        let mut ata = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] = (0..8).map(|r| forward[r][i] * forward[r][j]).sum();
            }
        }
        let inv = invert4(&ata).ok_or_else(|| Error::Degenerate("rank-deficient observable system".into()))?;
        let mut inverse = [[0.0; 8]; 4];
        for i in 0..4 {
            for r in 0..8 {
                inverse[i][r] = (0..4).map(|j| inv[i][j] * forward[r][j]).sum();
            }
        }
        Ok(Self {
            corners,
            forward,
            inverse,
        })
    }

    pub fn for_camera(cam: &CameraModel) -> Result<Self> {
        Self::new(cam.corners_normalized())
    }

    /// Corner flows (normalized, 1/s) predicted by the model.
    pub fn predict(&self, obs: &VisualObservables) -> CornerFlowSet {
        let s = obs.as_array();
        let mut flows = [[0.0; 2]; 4];
        for r in 0..8 {
            flows[r / 2][r % 2] = (0..4).map(|j| self.forward[r][j] * s[j]).sum();
        }
        CornerFlowSet::new(flows, FlowUnit::NormalizedPerSecond)
    }

    /// Least-squares observables in the camera frame.
    pub fn estimate(&self, flows: &CornerFlowSet) -> Result<VisualObservables> {
        if flows.unit != FlowUnit::NormalizedPerSecond {
            return Err(Error::Config(format!("observables need normalized flows, got {:?}", flows.unit)));
        }
        if !flows.is_finite() {
            return Err(Error::NonFinite("corner flows".into()));
        }
        let u = flows.as_vector();
        let s: [f64; 4] = std::array::from_fn(|i| (0..8).map(|r| self.inverse[i][r] * u[r]).sum());
        Ok(VisualObservables {
            nu: [s[0], s[1], s[2]],
            omega_z: s[3],
            frame: Frame::Camera,
        })
    }
}

/// Remove the flow induced by camera roll and pitch rates (normalized
/// coordinates, 1/s).
pub fn derotate(flows: &CornerFlowSet, omega_c: &Vector3<f64>, corners: &[[f64; 2]; 4]) -> Result<CornerFlowSet> {
    if flows.unit != FlowUnit::NormalizedPerSecond {
        return Err(Error::Config("derotation needs normalized flows".into()));
    }
    let w = Vector3::new(omega_c[0], omega_c[1], 0.0);
    let e3 = Vector3::z();
    let mut out = *flows;
    for (k, &[x, y]) in corners.iter().enumerate() {
        let p = Vector3::new(x, y, 1.0);
        let u_rot = -(Matrix3::identity() - p * e3.transpose()) * w.cross(&p);
        out.flows[k][0] -= u_rot[0];
        out.flows[k][1] -= u_rot[1];
    }
    Ok(out)
}

/// Mean Euclidean distance between matching flow vectors.
pub fn epe(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Dimension {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p[0] - g[0]).hypot(p[1] - g[1]))
        .sum();
    Ok(s / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const FRAME: [[f64; 2]; 4] = [[0.0, 0.0], [90.0, 0.0], [90.0, 90.0], [0.0, 90.0]];

    #[test]
    fn zero_displacement_is_identity() {
        let s = solve_from_displacements(&FRAME, &[[0.0; 2]; 4]).unwrap();
        for (a, b) in s.homography.h.iter().zip(Homography::IDENTITY.h) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_displacement_is_translation() {
        let s = solve_from_displacements(&FRAME, &[[1.5, -2.0]; 4]).unwrap();
        let want = [1.0, 0.0, 1.5, 0.0, 1.0, -2.0, 0.0, 0.0];
        for (a, b) in s.homography.h.iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn projective_round_trip() {
        let truth = Homography {
            h: [1.02, 0.01, 0.5, -0.02, 0.98, -0.3, 1e-4, -2e-4],
        };
        let dst = FRAME.map(|p| truth.project(p[0], p[1]).unwrap());
        let s = solve_four_point(&FRAME, &dst).unwrap();
        for (a, b) in s.homography.h.iter().zip(truth.h) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let src = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [0.0, 5.0]];
        assert!(matches!(solve_four_point(&src, &src), Err(Error::Degenerate(_))));
    }

    #[test]
    fn dense_flow_examples() {
        let px = [[0.0, 0.0], [3.0, 7.0], [80.0, 20.0]];
        assert!(dense_flow(&Homography::IDENTITY, &px).unwrap().iter().all(|u| *u == [0.0, 0.0]));
        let t = Homography {
            h: [1.0, 0.0, 1.5, 0.0, 1.0, -2.0, 0.0, 0.0],
        };
        assert!(dense_flow(&t, &px).unwrap().iter().all(|u| *u == [1.5, -2.0]));
        let s = Homography {
            h: [1.1, 0.0, 0.0, 0.0, 1.1, 0.0, 0.0, 0.0],
        };
        for (u, p) in dense_flow(&s, &px).unwrap().iter().zip(px) {
            assert_abs_diff_eq!(u[0], 0.1 * p[0], epsilon = 1e-12);
            assert_abs_diff_eq!(u[1], 0.1 * p[1], epsilon = 1e-12);
        }
        let bad = Homography {
            h: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, -0.1, 0.0],
        };
        assert!(bad.flow_at(20.0, 0.0).is_err());
    }

    #[test]
    fn flow_jacobian_matches_differences() {
        let h = Homography {
            h: [1.01, 0.02, 0.3, -0.01, 0.99, 0.2, 2e-4, -1e-4],
        };
        let (_, jac) = h.flow_jacobian(37.0, 61.0).unwrap();
        for i in 0..8 {
            let step = 1e-7;
            let mut hp = h;
            hp.h[i] += step;
            let mut hm = h;
            hm.h[i] -= step;
            let up = hp.flow_at(37.0, 61.0).unwrap();
            let um = hm.flow_at(37.0, 61.0).unwrap();
            for r in 0..2 {
                let fd = (up[r] - um[r]) / (2.0 * step);
                assert!((fd - jac[r][i]).abs() < 1e-5 * (1.0 + fd.abs()), "{i} {r}");
            }
        }
    }

    #[test]
    fn solve_backward_matches_differences() {
        let disp = [[0.3, -0.2], [0.5, 0.1], [-0.4, 0.6], [0.2, 0.2]];
        let g = [0.3, -1.0, 0.5, 0.2, 2.0, -0.7, 40.0, -25.0];
        let s = solve_from_displacements(&FRAME, &disp).unwrap();
        let grad = s.backward(&g);
        let f = |d: &[[f64; 2]; 4]| -> f64 {
            let h = solve_from_displacements(&FRAME, d).unwrap().homography.h;
            h.iter().zip(g).map(|(a, b)| a * b).sum()
        };
        for k in 0..4 {
            for c in 0..2 {
                let mut p = disp;
                p[k][c] += 1e-6;
                let mut m = disp;
                m[k][c] -= 1e-6;
                let fd = (f(&p) - f(&m)) / 2e-6;
                assert!((fd - grad[k][c]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }

    #[test]
    fn unit_conversions() {
        let ctx = UnitContext::default();
        assert_eq!(convert_flow([1.0, 2.0], FlowUnit::PxPerMs, FlowUnit::PxPerWindow, &ctx), [5.0, 10.0]);
        assert_eq!(
            convert_flow([1.0, 1.0], FlowUnit::PxPerMs, FlowUnit::CameraPxPerSecond, &ctx),
            [2000.0, 2000.0]
        );
        let n = convert_flow([188.84, 188.99], FlowUnit::CameraPxPerSecond, FlowUnit::NormalizedPerSecond, &ctx);
        assert_abs_diff_eq!(n[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(n[1], 1.0, epsilon = 1e-15);
        let back = convert_flow(
            convert_flow([0.3, -0.7], FlowUnit::PxPerWindow, FlowUnit::NormalizedPerSecond, &ctx),
            FlowUnit::NormalizedPerSecond,
            FlowUnit::PxPerWindow,
            &ctx,
        );
        assert_abs_diff_eq!(back[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(back[1], -0.7, epsilon = 1e-15);
    }

    #[test]
    fn observable_examples() {
        let cam = CameraModel::default();
        let m = ObservableModel::for_camera(&cam).unwrap();
        let div = CornerFlowSet::new(m.corners.map(|x| [0.4 * x[0], 0.4 * x[1]]), FlowUnit::NormalizedPerSecond);
        let o = m.estimate(&div).unwrap();
        assert_abs_diff_eq!(o.nu[2], 0.4, epsilon = 1e-14);
        assert_abs_diff_eq!(o.nu[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(o.omega_z, 0.0, epsilon = 1e-14);
        let tr = CornerFlowSet::new([[-0.2, -0.3]; 4], FlowUnit::NormalizedPerSecond);
        let o = m.estimate(&tr).unwrap();
        assert_abs_diff_eq!(o.nu[0], 0.2, epsilon = 1e-14);
        assert_abs_diff_eq!(o.nu[1], 0.3, epsilon = 1e-14);
        assert_abs_diff_eq!(o.nu[2], 0.0, epsilon = 1e-14);
        let px = CornerFlowSet::new([[0.0; 2]; 4], FlowUnit::CameraPxPerSecond);
        assert!(m.estimate(&px).is_err());
    }

    #[test]
    fn hdot_zero_and_linearity() {
        let cam = CameraModel::default();
        let z = corner_flows_from_hdot(&Matrix3::zeros(), &cam.corners_homogeneous());
        assert!(z.flows.iter().flatten().all(|v| *v == 0.0));
        let h = Matrix3::new(0.1, -0.3, 2.0, 0.05, 0.2, -1.0, 1e-3, 2e-3, 0.4);
        let a = corner_flows_from_hdot(&h, &cam.corners_homogeneous());
        let b = corner_flows_from_hdot(&(h * 2.5), &cam.corners_homogeneous());
        for (x, y) in a.flows.iter().flatten().zip(b.flows.iter().flatten()) {
            assert_abs_diff_eq!(2.5 * x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn hdot_vertical_only_term() {
        let mut cam = CameraModel::default();
        cam.t_cb = Vector3::zeros();
        // body velocity pointing down maps to camera +z
        let hd = continuous_homography(&Vector3::zeros(), &Vector3::new(0.0, 0.0, -0.8), 2.0, &Matrix3::identity(), &cam)
            .unwrap();
        let want = cam.k * (Vector3::new(0.0, 0.0, 0.4) * Vector3::z().transpose()) * cam.k_inv();
        assert_abs_diff_eq!((hd - want).abs().max(), 0.0, epsilon = 1e-12);
        assert!(continuous_homography(&Vector3::zeros(), &Vector3::zeros(), 0.0, &Matrix3::identity(), &cam).is_err());
        let z = continuous_homography(&Vector3::zeros(), &Vector3::zeros(), 1.0, &Matrix3::identity(), &cam).unwrap();
        assert_eq!(z, Matrix3::zeros());
    }

    #[test]
    fn descent_flows_expand_from_principal_point() {
        let mut cam = CameraModel::default();
        cam.t_cb = Vector3::zeros();
        let r = Matrix3::identity();
        let hd = continuous_homography(&Vector3::zeros(), &Vector3::new(0.0, 0.0, -1.0), 2.0, &r, &cam).unwrap();
        let flows = corner_flows_from_hdot(&hd, &cam.corners_homogeneous());
        for (u, x) in flows.flows.iter().zip(cam.corners_px) {
            let d = [x[0] - 90.0, x[1] - 90.0];
            assert_abs_diff_eq!(u[0], 0.5 * d[0], epsilon = 1e-9);
            assert_abs_diff_eq!(u[1], 0.5 * d[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn body_transform_flips_y_and_z() {
        let cam = CameraModel::default();
        let o = VisualObservables {
            nu: [0.1, 0.2, 0.3],
            omega_z: 0.4,
            frame: Frame::Camera,
        };
        let b = o.to_body(&cam);
        assert_eq!(b.nu, [0.1, -0.2, -0.3]);
        assert_eq!(b.omega_z, -0.4);
    }

    #[test]
    fn derotation_removes_roll_pitch_field() {
        let cam = CameraModel::default();
        let m = ObservableModel::for_camera(&cam).unwrap();
        let w = Vector3::new(0.3, -0.2, 0.0);
        let hd = skew(&w);
        let k = cam.corners_normalized().map(|c| Vector3::new(c[0], c[1], 1.0));
        let raw = corner_flows_from_hdot(&hd, &k);
        let raw = CornerFlowSet::new(raw.flows, FlowUnit::NormalizedPerSecond);
        let clean = derotate(&raw, &w, &m.corners).unwrap();
        assert!(clean.flows.iter().flatten().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn epe_examples() {
        let a = [[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(epe(&a, &a).unwrap(), 0.0);
        let b = a.map(|p| [p[0] + 3.0, p[1] + 4.0]);
        assert_abs_diff_eq!(epe(&b, &a).unwrap(), 5.0, epsilon = 1e-12);
        assert!(epe(&a[..1], &a).is_err());
    }

    #[test]
    fn invert4_matches_identity() {
        let m = [[4.0, 1.0, 0.5, 0.0], [1.0, 3.0, 0.0, 0.2], [0.5, 0.0, 2.0, 0.1], [0.0, 0.2, 0.1, 1.0]];
        let inv = invert4(&m).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let p: f64 = (0..4).map(|k| m[i][k] * inv[k][j]).sum();
                assert_abs_diff_eq!(p, (i == j) as u8 as f64, epsilon = 1e-14);
            }
        }
    }
}
