//! Desk-scale controller evolution and a held-out terminal tracking check.
//!
//! cargo run --release --example evolve_desk -- [generations] [seed] [controller.json]

use neuroflight::evolve::{evolve, landing_is_monotone, scenarios, terminal_errors, EvolutionConfig};
use neuroflight::homography::CameraModel;

fn main() -> neuroflight::Result<()> {
    let mut args = std::env::args().skip(1);
    let generations = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let cfg = EvolutionConfig {
        generations,
        ..EvolutionConfig::desk()
    };
    let cam = CameraModel::default();
    let t0 = std::time::Instant::now();
    let out = evolve(&cfg, seed, &cam, |g, best, median| {
        if g % 10 == 0 {
            println!("gen {g:4}  best {best:10.3}  median {median:10.3}");
        }
    })?;
    println!("{:.1} s", t0.elapsed().as_secs_f64());
    let held_out = scenarios(&cfg, seed.wrapping_add(1));
    // final 5 s at 50 Hz
    for (sc, e) in held_out.iter().zip(terminal_errors(&out.best, &held_out, &cfg, &cam, 250)?) {
        println!("sp {:?}  terminal |err| {:.3} {:.3} {:.3}", sc.setpoint, e[0], e[1], e[2]);
    }
    if let Some(sc) = held_out.iter().find(|s| s.setpoint == [0.0, 0.0, -0.5]) {
        let (mono, z) = landing_is_monotone(&out.best, sc, &cfg, &cam, 1.0)?;
        println!("landing monotone after 1 s: {mono} ({} samples, {:.2} m -> {:.2} m)", z.len(), z[0], z[z.len() - 1]);
    }
    if let Some(path) = args.next() {
        out.best.save(std::path::Path::new(&path), Some(out.best_fitness))?;
    }
    Ok(())
}
