//! Train a desk-scale corner network on synthetic translating textures.
//!
//! cargo run --release --example train_synthetic -- [steps] [seed] [clips]

use neuroflight::train::{train_synthetic, TrainConfig};

fn main() -> neuroflight::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let clips = args.next().and_then(|s| s.parse().ok()).unwrap_or(256);
    let cfg = TrainConfig {
        steps,
        train_clips: clips,
        log_every: 25,
        ..TrainConfig::desk()
    };
    let out = train_synthetic(&cfg, seed, None)?;
    print!("{}", out.log.as_str());
    println!(
        "steps {} in {:.1} s, best EPE {:.3} px/window",
        out.steps, out.seconds, out.best_epe
    );
    Ok(())
}
