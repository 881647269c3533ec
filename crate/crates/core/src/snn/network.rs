use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::neuron::{decay, quantize_weight, saturate, NeuronParams, DECAY_ONE};
use crate::error::{Error, Result};
use crate::tensor::{Shape, SpikeTensor};

/// Layer sizes of the corner network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input: Shape,
    pub encoder_channels: Vec<usize>,
    pub pooling_neurons: usize,
    #[serde(default = "yes")]
    pub encoder_recurrent: bool,
    #[serde(default)]
    pub pooling_recurrent: bool,
}

fn yes() -> bool {
    true
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input: Shape::new(2, 16, 16),
            encoder_channels: vec![32, 64, 128],
            pooling_neurons: 256,
            encoder_recurrent: true,
            pooling_recurrent: false,
        }
    }
}

impl NetworkConfig {
    pub fn with_channels(encoders: &[usize], pooling: usize) -> Self {
        Self {
            encoder_channels: encoders.to_vec(),
            pooling_neurons: pooling,
            ..Self::default()
        }
    }

    /// Encoders are 3x3 stride-2 convolutions with zero padding 1; the
    /// pooling layer covers the whole remaining spatial extent.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        if self.encoder_channels.is_empty() || self.pooling_neurons == 0 {
            return Err(Error::Config("network needs at least one encoder and a pooling layer".into()));
        }
        let mut specs = Vec::new();
        let mut shape = self.input;
        for (k, &ch) in self.encoder_channels.iter().enumerate() {
            if ch == 0 {
                return Err(Error::Config(format!("encoder {} has zero channels", k + 1)));
            }
            let spec = LayerSpec::conv(format!("encoder{}", k + 1), shape, ch, 3, 2, 1, self.encoder_recurrent)?;
            shape = spec.output;
            specs.push(spec);
        }
        if shape.height != shape.width {
            return Err(Error::Config("pooling input must be square".into()));
        }
        let pool = LayerSpec::conv(
            "pooling".to_string(),
            shape,
            self.pooling_neurons,
            shape.height,
            1,
            0,
            self.pooling_recurrent,
        )?;
        specs.push(pool);
        Ok(specs)
    }

    /// Neurons including the input layer.
    pub fn neuron_count(&self) -> Result<usize> {
        Ok(self.input.len() + self.layer_specs()?.iter().map(|s| s.output.len()).sum::<usize>())
    }

    /// Feedforward synapses (padding taps excluded) plus self-recurrent ones.
    pub fn synapse_count(&self) -> Result<usize> {
        Ok(self.layer_specs()?.iter().map(LayerSpec::synapse_count).sum())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub input: Shape,
    pub output: Shape,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub recurrent: bool,
}

impl LayerSpec {
    pub fn conv(
        name: String,
        input: Shape,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        recurrent: bool,
    ) -> Result<Self> {
        let out = |n: usize| -> Result<usize> {
            let span = n + 2 * padding;
            if span < kernel || stride == 0 {
                return Err(Error::Config(format!("layer {name}: kernel {kernel} larger than input {n}")));
            }
            Ok((span - kernel) / stride + 1)
        };
        let output = Shape::new(out_channels, out(input.height)?, out(input.width)?);
        Ok(Self {
            name,
            input,
            output,
            kernel,
            stride,
            padding,
            recurrent,
        })
    }

    pub fn weight_len(&self) -> usize {
        self.output.channels * self.input.channels * self.kernel * self.kernel
    }

    #[inline]
    pub fn weight_index(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.input.channels + c) * self.kernel + ky) * self.kernel + kx
    }

    /// Input coordinate feeding output `(oy, ox)` through tap `(ky, kx)`,
    /// or `None` for padding taps.
    #[inline]
    pub fn tap(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (iy < self.input.height && ix < self.input.width).then_some((iy, ix))
    }

    pub fn synapse_count(&self) -> usize {
        let mut taps = 0;
        for oy in 0..self.output.height {
            for ox in 0..self.output.width {
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        taps += self.tap(oy, ox, ky, kx).is_some() as usize;
                    }
                }
            }
        }
        let rec = if self.recurrent { self.output.len() } else { 0 };
        taps * self.input.channels * self.output.channels + rec
    }
}

/// Quantized parameters of one spiking layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Feedforward kernel, `(out, in, ky, kx)` row-major.
    pub weights: Vec<i32>,
    /// One self-recurrent weight per neuron; empty when the layer is not recurrent.
    pub recurrent: Vec<i32>,
    pub params: NeuronParams,
}

/// Real-valued `2 x P` map from pooling spikes to a flow vector in px/ms.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeMatrix {
    pub cols: usize,
    /// Row-major, 2 rows.
    pub data: Vec<f64>,
}

impl DecodeMatrix {
    pub fn zeros(cols: usize) -> Self {
        Self {
            cols,
            data: vec![0.0; 2 * cols],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// Linear spike decoding: matrix-vector product, no bias.
pub fn decode_flow(spikes: &[u8], decode: &DecodeMatrix) -> Result<[f64; 2]> {
    if spikes.len() != decode.cols {
        return Err(Error::Dimension {
            expected: decode.cols,
            got: spikes.len(),
        });
    }
    let mut out = [0.0; 2];
    for (j, &s) in spikes.iter().enumerate() {
        if s != 0 {
            out[0] += decode.data[j];
            out[1] += decode.data[decode.cols + j];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub config: NetworkConfig,
    pub layers: Vec<Layer>,
    pub decode: DecodeMatrix,
}

impl NetworkWeights {
    /// Random quantized initialization (He-style scaling on the integer grid).
    pub fn random<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        let specs = config.layer_specs()?;
        let mut layers = Vec::with_capacity(specs.len());
        for (idx, spec) in specs.into_iter().enumerate() {
            let fan_in = (spec.input.channels * spec.kernel * spec.kernel) as f64;
            // input spikes are sparse, so the first layer gets a larger gain
            let gain = if idx == 0 { 3.0 } else { 1.5 };
            let std = gain * (2.0 / fan_in).sqrt() * 256.0;
            let normal = Normal::new(0.0, std).expect("finite std");
            let weights = (0..spec.weight_len()).map(|_| quantize_weight(normal.sample(rng))).collect();
            let recurrent = if spec.recurrent {
                (0..spec.output.len()).map(|_| quantize_weight(rng.random_range(-32.0..32.0))).collect()
            } else {
                Vec::new()
            };
            layers.push(Layer {
                spec,
                weights,
                recurrent,
                params: NeuronParams::new(2048, 2048, 256)?,
            });
        }
        let cols = config.pooling_neurons;
        let scale = 0.05 / (cols as f64).sqrt();
        let normal = Normal::new(0.0, scale).expect("finite std");
        let decode = DecodeMatrix {
            cols,
            data: (0..2 * cols).map(|_| normal.sample(rng)).collect(),
        };
        Ok(Self {
            config: config.clone(),
            layers,
            decode,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let specs = self.config.layer_specs()?;
        if specs.len() != self.layers.len() {
            return Err(Error::Dimension {
                expected: specs.len(),
                got: self.layers.len(),
            });
        }
        for (spec, layer) in specs.iter().zip(&self.layers) {
            if *spec != layer.spec {
                return Err(Error::Config(format!("layer {} does not match the config", spec.name)));
            }
            if layer.weights.len() != spec.weight_len() {
                return Err(Error::Dimension {
                    expected: spec.weight_len(),
                    got: layer.weights.len(),
                });
            }
            let rec_len = if spec.recurrent { spec.output.len() } else { 0 };
            if layer.recurrent.len() != rec_len {
                return Err(Error::Dimension {
                    expected: rec_len,
                    got: layer.recurrent.len(),
                });
            }
            if let Some(w) = layer
                .weights
                .iter()
                .chain(&layer.recurrent)
                .find(|w| !super::neuron::is_quantized_weight(**w))
            {
                return Err(Error::Config(format!("layer {}: weight {w} is off the quantization grid", spec.name)));
            }
            layer.params.validate()?;
        }
        if self.decode.cols != self.config.pooling_neurons || self.decode.data.len() != 2 * self.decode.cols {
            return Err(Error::Dimension {
                expected: 2 * self.config.pooling_neurons,
                got: self.decode.data.len(),
            });
        }
        Ok(())
    }
}

/// Precomputed scatter lists for event-driven accumulation.
#[derive(Debug)]
struct ScatterLayer {
    /// For each input neuron: `(output spatial index, tap index)` pairs.
    fanout: Vec<Vec<(u32, u32)>>,
    /// Weights transposed to `(in, ky, kx, out)` so a tap's output channels
    /// are contiguous.
    weights_t: Vec<i32>,
}

/// Immutable, shareable compiled form of [`NetworkWeights`].
#[derive(Debug)]
pub struct CompiledNetwork {
    weights: NetworkWeights,
    scatter: Vec<ScatterLayer>,
}

impl CompiledNetwork {
    pub fn new(weights: NetworkWeights) -> Result<Arc<Self>> {
        weights.validate()?;
        let scatter = weights.layers.iter().map(|l| compile_layer(&l.spec, &l.weights)).collect();
        Ok(Arc::new(Self { weights, scatter }))
    }

    pub fn weights(&self) -> &NetworkWeights {
        &self.weights
    }
}

fn compile_layer(spec: &LayerSpec, weights: &[i32]) -> ScatterLayer {
    let k = spec.kernel;
    let taps_per_in = k * k;
    let mut fanout = vec![Vec::new(); spec.input.len()];
    for oy in 0..spec.output.height {
        for ox in 0..spec.output.width {
            for ky in 0..k {
                for kx in 0..k {
                    if let Some((iy, ix)) = spec.tap(oy, ox, ky, kx) {
                        for c in 0..spec.input.channels {
                            let j = spec.input.index(c, iy, ix);
                            let tap = c * taps_per_in + ky * k + kx;
                            fanout[j].push(((oy * spec.output.width + ox) as u32, tap as u32));
                        }
                    }
                }
            }
        }
    }
    let out_c = spec.output.channels;
    let mut weights_t = vec![0; weights.len()];
    for o in 0..out_c {
        for c in 0..spec.input.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let tap = c * taps_per_in + ky * k + kx;
                    weights_t[tap * out_c + o] = weights[spec.weight_index(o, c, ky, kx)];
                }
            }
        }
    }
    ScatterLayer { fanout, weights_t }
}

/// Integer state of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerState {
    pub u: Vec<i32>,
    pub i: Vec<i32>,
    pub s: Vec<u8>,
}

impl LayerState {
    pub fn zeros(n: usize) -> Self {
        Self {
            u: vec![0; n],
            i: vec![0; n],
            s: vec![0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub pooling: Vec<u8>,
    /// Fraction of spiking neurons per layer, input layer first.
    pub activity: Vec<f64>,
    pub spikes: usize,
    pub saturated: usize,
}

/// One corner's network instance: shared weights plus private state.
#[derive(Debug, Clone)]
pub struct CornerNetwork {
    net: Arc<CompiledNetwork>,
    states: Vec<LayerState>,
    acc: Vec<i64>,
}

impl CornerNetwork {
    pub fn new(net: Arc<CompiledNetwork>) -> Self {
        let states = net.weights.layers.iter().map(|l| LayerState::zeros(l.spec.output.len())).collect();
        let max = net.weights.layers.iter().map(|l| l.spec.output.len()).max().unwrap_or(0);
        Self {
            net,
            states,
            acc: vec![0; max],
        }
    }

    pub fn compiled(&self) -> &Arc<CompiledNetwork> {
        &self.net
    }

    /// Swap in new weights; states are kept when the architecture matches.
    pub fn set_weights(&mut self, net: Arc<CompiledNetwork>) {
        if net.weights.config != self.net.weights.config {
            *self = Self::new(net);
        } else {
            self.net = net;
        }
    }

    pub fn states(&self) -> &[LayerState] {
        &self.states
    }

    pub fn reset(&mut self) {
        for s in &mut self.states {
            s.u.fill(0);
            s.i.fill(0);
            s.s.fill(0);
        }
    }

    /// One synchronous timestep through every layer.
    pub fn step(&mut self, input: &SpikeTensor) -> Result<StepOutput> {
        let cfg = &self.net.weights.config;
        if input.shape != cfg.input {
            return Err(Error::Dimension {
                expected: cfg.input.len(),
                got: input.shape.len(),
            });
        }
        let mut activity = Vec::with_capacity(self.states.len() + 1);
        let mut active: Vec<u32> = input.active().map(|i| i as u32).collect();
        let mut spikes = active.len();
        let mut saturated = 0;
        activity.push(active.len() as f64 / input.shape.len() as f64);

        for (l, layer) in self.net.weights.layers.iter().enumerate() {
            let scatter = &self.net.scatter[l];
            let state = &mut self.states[l];
            let n = layer.spec.output.len();
            let plane = layer.spec.output.height * layer.spec.output.width;
            let out_c = layer.spec.output.channels;
            let p = layer.params;
            let acc = &mut self.acc[..n];
            for k in 0..n {
                let rec = if layer.spec.recurrent {
                    layer.recurrent[k] as i64 * state.s[k] as i64
                } else {
                    0
                };
                acc[k] = decay(state.i[k], p.tau_i) as i64 + rec;
            }
            for &j in &active {
                for &(pos, tap) in &scatter.fanout[j as usize] {
                    let w = &scatter.weights_t[tap as usize * out_c..(tap as usize + 1) * out_c];
                    let pos = pos as usize;
                    for (o, &wv) in w.iter().enumerate() {
                        acc[o * plane + pos] += wv as i64;
                    }
                }
            }
            active.clear();
            for k in 0..n {
                let (i_new, si) = saturate(acc[k]);
                let keep = 1 - state.s[k] as i64;
                let (u_new, su) = saturate(decay(state.u[k], p.tau_u) as i64 * keep + i_new as i64);
                saturated += si as usize + su as usize;
                let fire = u_new >= p.theta;
                state.i[k] = i_new;
                state.u[k] = u_new;
                state.s[k] = fire as u8;
                if fire {
                    active.push(k as u32);
                }
            }
            spikes += active.len();
            activity.push(active.len() as f64 / n as f64);
        }
        if saturated > 0 {
            log::warn!("{saturated} neuron states saturated at the 24-bit envelope");
        }
        let pooling = self.states.last().map(|s| s.s.clone()).unwrap_or_default();
        Ok(StepOutput {
            pooling,
            activity,
            spikes,
            saturated,
        })
    }

    pub fn decode(&self, pooling: &[u8]) -> Result<[f64; 2]> {
        decode_flow(pooling, &self.net.weights.decode)
    }
}

/// Output of the four corner networks for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionStep {
    /// Corner flows in working-frame px/ms, TL TR BR BL.
    pub flows: [[f64; 2]; 4],
    pub pooling: [Vec<u8>; 4],
    /// Per-layer activity averaged over the corners.
    pub activity: Vec<f64>,
    pub spikes: usize,
}

/// The four weight-sharing corner networks.
#[derive(Debug, Clone)]
pub struct VisionNetwork {
    pub corners: [CornerNetwork; 4],
}

impl VisionNetwork {
    pub fn new(net: Arc<CompiledNetwork>) -> Self {
        Self {
            corners: std::array::from_fn(|_| CornerNetwork::new(net.clone())),
        }
    }

    pub fn compiled(&self) -> &Arc<CompiledNetwork> {
        self.corners[0].compiled()
    }

    pub fn reset(&mut self) {
        self.corners.iter_mut().for_each(CornerNetwork::reset);
    }

    pub fn step(&mut self, inputs: &[SpikeTensor; 4]) -> Result<VisionStep> {
        let mut flows = [[0.0; 2]; 4];
        let mut pooling: [Vec<u8>; 4] = Default::default();
        let mut activity: Vec<f64> = Vec::new();
        let mut spikes = 0;
        for (k, (net, input)) in self.corners.iter_mut().zip(inputs).enumerate() {
            let out = net.step(input)?;
            flows[k] = net.decode(&out.pooling)?;
            if activity.is_empty() {
                activity = vec![0.0; out.activity.len()];
            }
            for (a, b) in activity.iter_mut().zip(&out.activity) {
                *a += b / 4.0;
            }
            spikes += out.spikes;
            pooling[k] = out.pooling;
        }
        Ok(VisionStep {
            flows,
            pooling,
            activity,
            spikes,
        })
    }
}

/// Decay expressed as a fraction, for reporting.
pub fn decay_fraction(tau: i32) -> f64 {
    tau as f64 / DECAY_ONE as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_layer_shapes() {
        let specs = NetworkConfig::default().layer_specs().unwrap();
        let sizes: Vec<_> = specs.iter().map(|s| (s.output.channels, s.output.height)).collect();
        assert_eq!(sizes, vec![(32, 8), (64, 4), (128, 2), (256, 1)]);
        assert_eq!(NetworkConfig::default().neuron_count().unwrap(), 512 + 2048 + 1024 + 512 + 256);
    }

    #[test]
    fn decode_examples() {
        let mut d = DecodeMatrix::zeros(3);
        d.data = vec![1.0, 2.0, 3.0, -1.0, -2.0, -3.0];
        assert_eq!(decode_flow(&[0, 0, 0], &d).unwrap(), [0.0, 0.0]);
        assert_eq!(decode_flow(&[0, 1, 0], &d).unwrap(), [2.0, -2.0]);
        assert_eq!(decode_flow(&[1, 0, 1], &d).unwrap(), [4.0, -4.0]);
        assert!(decode_flow(&[1, 0], &d).is_err());
    }

    fn small_net(seed: u64) -> Arc<CompiledNetwork> {
        let cfg = NetworkConfig::with_channels(&[4, 8, 8], 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CompiledNetwork::new(NetworkWeights::random(&cfg, &mut rng).unwrap()).unwrap()
    }

    #[test]
    fn zero_input_zero_activity() {
        let mut net = CornerNetwork::new(small_net(1));
        let out = net.step(&SpikeTensor::zeros(Shape::new(2, 16, 16))).unwrap();
        assert!(out.activity.iter().all(|&a| a == 0.0));
        assert_eq!(out.spikes, 0);
    }

    #[test]
    fn reset_matches_fresh() {
        let net = small_net(2);
        let mut a = CornerNetwork::new(net.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let bits = (0..512).map(|_| rng.random_bool(0.2) as u8).collect();
            a.step(&SpikeTensor::from_bits(Shape::new(2, 16, 16), bits)).unwrap();
        }
        a.reset();
        let fresh = CornerNetwork::new(net);
        assert_eq!(a.states(), fresh.states());
        a.reset();
        assert_eq!(a.states(), fresh.states());
    }

    #[test]
    fn activity_bounded_and_deterministic() {
        let net = small_net(4);
        let run = || {
            let mut n = CornerNetwork::new(net.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut trains = Vec::new();
            for _ in 0..10 {
                let bits = (0..512).map(|_| rng.random_bool(0.3) as u8).collect();
                let out = n.step(&SpikeTensor::from_bits(Shape::new(2, 16, 16), bits)).unwrap();
                assert!(out.activity.iter().all(|a| (0.0..=1.0).contains(a)));
                trains.push(out.pooling);
            }
            trains
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let mut n = CornerNetwork::new(small_net(5));
        assert!(n.step(&SpikeTensor::zeros(Shape::new(2, 8, 8))).is_err());
    }
}
