//! Closed-loop flight on simulated observables: hover, then forward, then a
//! landing descent. Uses the PI loop, or an evolved controller if a JSON
//! file is given.
//!
//! cargo run --release --example fly_sim -- [controller.json] [telemetry.csv]

use neuroflight::control::{run_sim, ControllerKind, FlyConfig, PiController, SetpointSchedule};
use neuroflight::evolve::LinearController;
use neuroflight::quadsim::Status;

fn main() -> neuroflight::Result<()> {
    let mut args = std::env::args().skip(1);
    let controller = match args.next() {
        Some(p) => ControllerKind::Evolved(LinearController::load(p.as_ref())?),
        None => ControllerKind::Pi(PiController::default()),
    };
    let pi = matches!(controller, ControllerKind::Pi(_));
    let cfg = FlyConfig {
        duration_s: 15.0,
        smooth: pi,
        ..FlyConfig::default()
    };
    let schedule = SetpointSchedule {
        segments: vec![
            (0.0, [0.0, 0.0, 0.0], 0.0),
            (4.0, [0.2, 0.0, 0.0], 0.0),
            (8.0, [0.0, 0.0, -0.3], 0.0),
        ],
    };
    let run = run_sim(&cfg, controller, &schedule, 7)?;
    println!("   t      x      y      z   nu_x   nu_z (true)");
    for k in run.ticks.iter().step_by(25) {
        let p = k.state.p;
        println!(
            "{:5.1} {:6.2} {:6.2} {:6.2} {:6.3} {:6.3}",
            k.t, p[0], p[1], p[2], k.obs.nu_body[0], k.obs.nu_z_world
        );
    }
    match run.status {
        Status::Crashed => println!("reached the altitude floor after {} ticks", run.ticks.len()),
        s => println!("ended {s:?} after {} ticks", run.ticks.len()),
    }
    if let Some(path) = args.next() {
        run.telemetry.write(path.as_ref())?;
    }
    Ok(())
}
