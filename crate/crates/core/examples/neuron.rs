//! Integer neuron dynamics: one neuron driven by a pulse train, then the
//! per-layer activity of a small corner network on a moving edge.
//!
//! cargo run --release --example neuron

use neuroflight::events::{encode_input_spikes, CornerPatch, LocalEvent, Polarity, Corner};
use neuroflight::snn::network::{CompiledNetwork, CornerNetwork, NetworkConfig, NetworkWeights};
use neuroflight::snn::{neuron_step, quantize_weight, NeuronParams, NeuronState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> neuroflight::Result<()> {
    let params = NeuronParams::new(3000, 2048, 400)?;
    let w = quantize_weight(130.0);
    let mut state = NeuronState::default();
    println!("weight 130 quantizes to {w}");
    println!("step  input      i      u  spike");
    for t in 0..16 {
        let ff = if t % 3 == 0 { w as i64 } else { 0 };
        let (next, spike) = neuron_step(state, ff, &params, -64);
        state = next;
        println!("{t:4} {ff:6} {:6} {:6}  {}", state.i, state.u, if spike { "*" } else { "" });
    }

    let cfg = NetworkConfig::with_channels(&[8, 16, 32], 64);
    let weights = NetworkWeights::random(&cfg, &mut ChaCha8Rng::seed_from_u64(2))?;
    let mut net = CornerNetwork::new(CompiledNetwork::new(weights)?);
    println!("\nnetwork: {} neurons, {} synapses", cfg.neuron_count()?, cfg.synapse_count()?);
    for step in 0..8u64 {
        // a vertical ON edge sweeping right one pixel per window
        let patch = CornerPatch {
            corner: Corner::TopLeft,
            events: (0..16)
                .map(|y| LocalEvent {
                    t: step * 5_000,
                    corner: Corner::TopLeft,
                    x: (4 + step) as u8,
                    y,
                    polarity: Polarity::Pos,
                })
                .collect(),
        };
        let out = net.step(&encode_input_spikes(&patch))?;
        let flow = net.decode(&out.pooling)?;
        println!("window {step}: activity {:.3?}  flow {:+.3?} px/ms", out.activity, flow);
    }
    Ok(())
}
