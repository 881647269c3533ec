//! Corner flows for a few camera motions, the observables recovered from
//! them, and the four-point homography those flows imply for one window.
//!
//! cargo run --release --example observables

use nalgebra::{Matrix3, Vector3};
use neuroflight::events::SensorGeometry;
use neuroflight::homography::{
    continuous_homography, corner_flows_from_hdot, solve_from_displacements, CameraModel, FlowUnit, ObservableModel,
    UnitContext,
};

fn main() -> neuroflight::Result<()> {
    let cam = CameraModel::default();
    let model = ObservableModel::for_camera(&cam)?;
    let ctx = UnitContext::default();
    let frame = SensorGeometry::default().frame_corners();
    let level = Matrix3::identity();
    let height = 1.5;

    let motions = [
        ("hover", Vector3::zeros(), Vector3::zeros()),
        ("forward 0.3 m/s", Vector3::zeros(), Vector3::new(0.3, 0.0, 0.0)),
        ("descend 0.75 m/s", Vector3::zeros(), Vector3::new(0.0, 0.0, -0.75)),
        ("yaw 0.5 rad/s", Vector3::new(0.0, 0.0, 0.5), Vector3::zeros()),
    ];
    for (name, omega, v) in motions {
        let hdot = continuous_homography(&omega, &v, height, &level, &cam)?;
        let flows = corner_flows_from_hdot(&hdot, &cam.corners_homogeneous());
        let normalized = flows.to_unit(FlowUnit::NormalizedPerSecond, &ctx);
        let obs = model.estimate(&normalized)?.to_body(&cam);
        // what the network would have to output over one 5 ms window
        let disp = flows.to_unit(FlowUnit::PxPerWindow, &ctx).flows;
        let h = solve_from_displacements(&frame, &disp)?;
        let centre = h.homography.flow_at(45.0, 45.0)?;
        println!("{name}");
        println!("  corner flows px/window: {:.3?}", disp);
        println!("  body observables nu = {:.3?}, omega_z = {:.3}", obs.nu, obs.omega_z);
        println!("  centre flow {:.4?} px/window, condition {:.1}", centre, h.condition);
    }
    Ok(())
}
