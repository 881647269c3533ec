//! Inference throughput on synthetic event densities.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{INPUT_SHAPE, MAX_EVENTS_PER_CORNER, PATCH_SIZE};
use crate::snn::network::{CompiledNetwork, CornerNetwork, NetworkWeights, VisionNetwork};
use crate::tensor::SpikeTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Events per four-corner inference: slow, medium, fast.
    pub densities: [f64; 3],
    pub windows: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            densities: [28.6, 106.9, 186.6],
            windows: 1000,
            warmup: 50,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows == 0 || self.densities.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::Config("bench needs windows > 0 and non-negative densities".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub name: String,
    pub events_per_inference: f64,
    /// Input spikes actually presented (after de-duplication and capping).
    pub input_spikes_per_inference: f64,
    pub corner_inferences_per_s: f64,
    pub four_corner_inferences_per_s: f64,
    /// Network spikes per four-corner inference, input excluded.
    pub spikes_per_inference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub neurons: usize,
    pub synapses: usize,
    pub empty_four_corner_inferences_per_s: f64,
    pub densities: Vec<DensityReport>,
}

/// Random four-corner inputs with on average `events` events per window,
/// each in a random corner, pixel and polarity, capped per corner.
pub fn synthetic_inputs(events: f64, windows: usize, seed: u64) -> Vec<[SpikeTensor; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..windows)
        .map(|_| {
            let frac = events - events.floor();
            let n = events.floor() as usize + usize::from(rng.random::<f64>() < frac);
            let mut t: [SpikeTensor; 4] = std::array::from_fn(|_| SpikeTensor::zeros(INPUT_SHAPE));
            let mut per = [0usize; 4];
            for _ in 0..n {
                let c = rng.random_range(0..4);
                if per[c] == MAX_EVENTS_PER_CORNER {
                    continue;
                }
                per[c] += 1;
                let p = rng.random_range(0..2);
                t[c].set(p, rng.random_range(0..PATCH_SIZE), rng.random_range(0..PATCH_SIZE), true);
            }
            t
        })
        .collect()
}

fn time_four(net: &Arc<CompiledNetwork>, inputs: &[[SpikeTensor; 4]], warmup: usize) -> Result<(f64, f64)> {
    let mut v = VisionNetwork::new(Arc::clone(net));
    for x in inputs.iter().take(warmup) {
        v.step(x)?;
    }
    let input_spikes: usize = inputs.iter().flat_map(|x| x.iter().map(SpikeTensor::count)).sum();
    let mut spikes = 0usize;
    let t0 = Instant::now();
    for x in inputs {
        spikes += v.step(x)?.spikes;
    }
    let dt = t0.elapsed().as_secs_f64().max(1e-9);
    let n = inputs.len() as f64;
    Ok((n / dt, (spikes - input_spikes) as f64 / n))
}

fn time_corner(net: &Arc<CompiledNetwork>, inputs: &[[SpikeTensor; 4]]) -> Result<f64> {
    let mut c = CornerNetwork::new(Arc::clone(net));
    let t0 = Instant::now();
    for x in inputs {
        for corner in x {
            let out = c.step(corner)?;
            std::hint::black_box(c.decode(&out.pooling)?);
        }
    }
    Ok(4.0 * inputs.len() as f64 / t0.elapsed().as_secs_f64().max(1e-9))
}

pub fn run_bench(weights: &NetworkWeights, cfg: &BenchConfig, seed: u64) -> Result<BenchReport> {
    cfg.validate()?;
    let net = CompiledNetwork::new(weights.clone())?;
    let empty = synthetic_inputs(0.0, cfg.windows, seed);
    let (empty_rate, _) = time_four(&net, &empty, cfg.warmup)?;
    let mut densities = Vec::new();
    for (name, &d) in ["slow", "medium", "fast"].iter().zip(&cfg.densities) {
        let inputs = synthetic_inputs(d, cfg.windows, seed.wrapping_add(densities.len() as u64 + 1));
        let input_spikes = inputs.iter().flat_map(|x| x.iter().map(SpikeTensor::count)).sum::<usize>() as f64;
        let (four, spikes) = time_four(&net, &inputs, cfg.warmup)?;
        let corner = time_corner(&net, &inputs)?;
        densities.push(DensityReport {
            name: name.to_string(),
            events_per_inference: d,
            input_spikes_per_inference: input_spikes / inputs.len() as f64,
            corner_inferences_per_s: corner,
            four_corner_inferences_per_s: four,
            spikes_per_inference: spikes,
        });
    }
    Ok(BenchReport {
        neurons: weights.config.neuron_count()?,
        synapses: weights.config.synapse_count()?,
        empty_four_corner_inferences_per_s: empty_rate,
        densities,
    })
}
