//! Inference throughput of the full-size network at the three event
//! densities.
//!
//! cargo run --release --example bench -- [windows]

use neuroflight::cli::bench::{run_bench, BenchConfig};
use neuroflight::snn::{NetworkConfig, NetworkWeights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> neuroflight::Result<()> {
    let windows = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = NetworkConfig::default();
    let weights = NetworkWeights::random(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let r = run_bench(
        &weights,
        &BenchConfig {
            windows,
            ..BenchConfig::default()
        },
        0,
    )?;
    println!("{} neurons, {} synapses", r.neurons, r.synapses);
    println!("empty input: {:.0} four-corner inferences/s", r.empty_four_corner_inferences_per_s);
    println!("{}", serde_json::to_string_pretty(&r.densities).unwrap_or_default());
    Ok(())
}
