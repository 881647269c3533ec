//! Open-loop replay of a synthetic event recording through the vision
//! network and the merged decoder, with the staged pipeline as a check.
//!
//! cargo run --release --example replay -- [checkpoint.json] [controller.json]

use neuroflight::control::{run_replay, RuntimeCoeffs, SetpointSchedule};
use neuroflight::events::WINDOW_US;
use neuroflight::evolve::LinearController;
use neuroflight::snn::{load_checkpoint, NetworkConfig, NetworkWeights};
use neuroflight::synth::{sample_poses, simulate_events, EventSimConfig, Texture, TextureConfig, WavyMotion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> neuroflight::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let weights = match args.next() {
        Some(p) => load_checkpoint(p.as_ref())?.0,
        None => NetworkWeights::random(&NetworkConfig::with_channels(&[8, 16, 32], 64), &mut rng)?,
    };
    let controller = match args.next() {
        Some(p) => LinearController::load(p.as_ref())?,
        None => LinearController::random(&mut rng, 0.3),
    };

    let sim = EventSimConfig::default();
    let texture = Texture::random(&TextureConfig::default(), &mut rng);
    let motion = WavyMotion {
        height: 2.0,
        ..WavyMotion::default()
    };
    let duration = 4_000_000;
    let events = simulate_events(&texture, &motion, &sim, duration, &mut rng)?;
    let poses = sample_poses(&motion, duration, 200.0);
    println!("{} events over {} s", events.len(), duration as f64 * 1e-6);

    let schedule = SetpointSchedule::constant([0.0, 0.0, 0.0], 0.0);
    let run = run_replay(&weights, &controller, &events, &poses, &sim.geometry, &schedule, &RuntimeCoeffs::default())?;
    for (k, (obs, cmd)) in run.observables.iter().zip(&run.commands).enumerate().step_by(100) {
        let t = k as f64 * WINDOW_US as f64 * 1e-6;
        println!("{t:5.2} s  observables {obs:+.3?}  command {:+.3?}", cmd.as_array());
    }
    println!(
        "{} windows, merged vs staged decoder max relative gap {:.2e}",
        run.windows, run.max_merge_error
    );
    Ok(())
}
