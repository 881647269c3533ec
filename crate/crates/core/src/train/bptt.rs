//! Recorded forward pass and backpropagation through time.
//!
//! Parameters are kept in normalized units: weights and thresholds divided
//! by 256, decays divided by 4096. In quantized mode the forward pass runs
//! the exact integer arithmetic of the inference engine (on integer-valued
//! floats) and the backward pass treats every rounding as identity. In
//! relaxed mode spikes are sigmoids, decays are not truncated and the
//! backward pass is the exact derivative, which makes finite-difference
//! checks meaningful.

use crate::error::{Error, Result};
use crate::snn::network::{DecodeMatrix, Layer, LayerSpec, NetworkConfig, NetworkWeights};
use crate::snn::neuron::{quantize_weight, NeuronParams, DECAY_ONE, STATE_LIMIT, THETA_MAX, WEIGHT_MAX, WEIGHT_MIN};

/// Scale from normalized weights, thresholds and states to integers.
pub const VALUE_SCALE: f64 = 256.0;
/// Scale from normalized decays to integers.
pub const DECAY_SCALE: f64 = DECAY_ONE as f64;

/// Derivative of the arctangent spike function used as surrogate.
pub fn surrogate_grad(x: f64, gamma: f64) -> f64 {
    1.0 / (1.0 + gamma * x * x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    /// Integer forward, surrogate backward.
    Quantized { gamma: f64 },
    /// Sigmoid spikes with slope `beta` on normalized membrane units.
    Relaxed { beta: f64 },
}

impl Default for Mode {
    fn default() -> Self {
        Mode::Quantized { gamma: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w: Vec<f64>,
    pub rec: Vec<f64>,
    pub tau_u: f64,
    pub tau_i: f64,
    pub theta: f64,
}

/// Real-valued master copy of every learnable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub config: NetworkConfig,
    pub specs: Vec<LayerSpec>,
    pub layers: Vec<LayerParams>,
    /// Decode matrix, 2 x P row-major, px/ms per spike.
    pub decode: Vec<f64>,
}

impl TrainParams {
    pub fn from_weights(w: &NetworkWeights) -> Self {
        let layers = w
            .layers
            .iter()
            .map(|l| LayerParams {
                w: l.weights.iter().map(|&v| v as f64 / VALUE_SCALE).collect(),
                rec: l.recurrent.iter().map(|&v| v as f64 / VALUE_SCALE).collect(),
                tau_u: l.params.tau_u as f64 / DECAY_SCALE,
                tau_i: l.params.tau_i as f64 / DECAY_SCALE,
                theta: l.params.theta as f64 / VALUE_SCALE,
            })
            .collect();
        Self {
            config: w.config.clone(),
            specs: w.layers.iter().map(|l| l.spec.clone()).collect(),
            layers,
            decode: w.decode.data.clone(),
        }
    }

    /// Quantize to the integer engine's parameters.
    pub fn to_weights(&self) -> Result<NetworkWeights> {
        let layers = self
            .specs
            .iter()
            .zip(&self.layers)
            .map(|(spec, p)| {
                Ok(Layer {
                    spec: spec.clone(),
                    weights: p.w.iter().map(|&v| quantize_weight(v * VALUE_SCALE)).collect(),
                    recurrent: p.rec.iter().map(|&v| quantize_weight(v * VALUE_SCALE)).collect(),
                    params: NeuronParams::new(
                        quantize_decay(p.tau_u),
                        quantize_decay(p.tau_i),
                        quantize_theta(p.theta),
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let w = NetworkWeights {
            config: self.config.clone(),
            layers,
            decode: DecodeMatrix {
                cols: self.config.pooling_neurons,
                data: self.decode.clone(),
            },
        };
        w.validate()?;
        Ok(w)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|v| *v = 0.0);
        z
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.rec.len() + 3).sum::<usize>() + self.decode.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Visit every scalar in a fixed order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(&mut f);
            l.rec.iter_mut().for_each(&mut f);
            f(&mut l.tau_u);
            f(&mut l.tau_i);
            f(&mut l.theta);
        }
        self.decode.iter_mut().for_each(&mut f);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        let mut c = self.clone();
        c.visit_mut(|v| out.push(*v));
        out
    }

    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: values.len(),
            });
        }
        let mut it = values.iter();
        self.visit_mut(|v| *v = *it.next().unwrap());
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &TrainParams, scale: f64) {
        let o = other.flatten();
        let mut it = o.iter();
        self.visit_mut(|v| *v += scale * it.next().unwrap());
    }

    /// Clamp every quantized parameter to its hardware range.
    pub fn clamp(&mut self) {
        let (wmin, wmax) = (WEIGHT_MIN as f64 / VALUE_SCALE, WEIGHT_MAX as f64 / VALUE_SCALE);
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.rec.iter_mut()) {
                *v = v.clamp(wmin, wmax);
            }
            l.tau_u = l.tau_u.clamp(0.0, 1.0);
            l.tau_i = l.tau_i.clamp(0.0, 1.0);
            l.theta = l.theta.clamp(0.0, THETA_MAX as f64 / VALUE_SCALE);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

fn quantize_decay(t: f64) -> i32 {
    (t * DECAY_SCALE).round().clamp(0.0, DECAY_ONE as f64) as i32
}

fn quantize_theta(t: f64) -> i32 {
    (t * VALUE_SCALE).round().clamp(0.0, THETA_MAX as f64) as i32
}

/// Float state of one corner network, raw (integer-scale) units.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    pub i: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
}

/// Everything the backward pass needs from one layer at one timestep,
/// states normalized.
#[derive(Debug, Clone)]
pub struct LayerTape {
    pub x: Vec<f64>,
    pub i_prev: Vec<f64>,
    pub u_prev: Vec<f64>,
    pub s_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct StepTape {
    pub layers: Vec<LayerTape>,
}

struct LayerPlan {
    spec: LayerSpec,
    /// Fan-out of each input neuron: (output position, tap).
    fanout: Vec<Vec<(u32, u32)>>,
    /// Effective weights, raw units, transposed to (tap, out).
    wt: Vec<f64>,
    rec: Vec<f64>,
    tau_u: f64,
    tau_i: f64,
    theta: f64,
}

/// Forward/backward engine for one parameter snapshot.
pub struct TrainNet {
    pub mode: Mode,
    plans: Vec<LayerPlan>,
    decode: Vec<f64>,
    pooling: usize,
}

impl TrainNet {
    pub fn new(params: &TrainParams, mode: Mode) -> Self {
        let quantized = matches!(mode, Mode::Quantized { .. });
        let plans = params
            .specs
            .iter()
            .zip(&params.layers)
            .map(|(spec, p)| {
                let raw_w = |v: f64| if quantized { quantize_weight(v * VALUE_SCALE) as f64 } else { v * VALUE_SCALE };
                let k2 = spec.kernel * spec.kernel;
                let taps = spec.input.channels * k2;
                let out_c = spec.output.channels;
                let mut wt = vec![0.0; taps * out_c];
                for o in 0..out_c {
                    for tap in 0..taps {
                        wt[tap * out_c + o] = raw_w(p.w[o * taps + tap]);
                    }
                }
                let (tau_u, tau_i, theta) = if quantized {
                    (quantize_decay(p.tau_u) as f64, quantize_decay(p.tau_i) as f64, quantize_theta(p.theta) as f64)
                } else {
                    (p.tau_u * DECAY_SCALE, p.tau_i * DECAY_SCALE, p.theta * VALUE_SCALE)
                };
                LayerPlan {
                    spec: spec.clone(),
                    fanout: fanout(spec),
                    wt,
                    rec: p.rec.iter().map(|&v| raw_w(v)).collect(),
                    tau_u,
                    tau_i,
                    theta,
                }
            })
            .collect();
        Self {
            mode,
            plans,
            decode: params.decode.clone(),
            pooling: params.config.pooling_neurons,
        }
    }

    pub fn zero_state(&self) -> NetState {
        let sizes: Vec<usize> = self.plans.iter().map(|p| p.spec.output.len()).collect();
        NetState {
            i: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            u: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            s: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    fn decay(&self, x: f64, tau: f64) -> f64 {
        match self.mode {
            Mode::Quantized { .. } => (x * tau / DECAY_SCALE).trunc(),
            Mode::Relaxed { .. } => x * tau / DECAY_SCALE,
        }
    }

    /// One timestep. Returns the decoded flow (px/ms) and, when requested,
    /// records the tape.
    pub fn step(&self, state: &mut NetState, input: &[f64], record: Option<&mut Vec<StepTape>>) -> [f64; 2] {
        let mut x: Vec<f64> = input.to_vec();
        let mut tapes = record.as_ref().map(|_| Vec::with_capacity(self.plans.len()));
        let limit = STATE_LIMIT as f64;
        for (l, plan) in self.plans.iter().enumerate() {
            let n = plan.spec.output.len();
            let plane = plan.spec.output.height * plan.spec.output.width;
            let out_c = plan.spec.output.channels;
            let mut ff = vec![0.0; n];
            for (j, &xj) in x.iter().enumerate() {
                if xj == 0.0 {
                    continue;
                }
                for &(pos, tap) in &plan.fanout[j] {
                    let w = &plan.wt[tap as usize * out_c..(tap as usize + 1) * out_c];
                    for (o, &wv) in w.iter().enumerate() {
                        ff[o * plane + pos as usize] += xj * wv;
                    }
                }
            }
            let i_prev = std::mem::take(&mut state.i[l]);
            let u_prev = std::mem::take(&mut state.u[l]);
            let s_prev = std::mem::take(&mut state.s[l]);
            let mut i_new = vec![0.0; n];
            let mut u_new = vec![0.0; n];
            let mut s_new = vec![0.0; n];
            for k in 0..n {
                let rec = if plan.rec.is_empty() { 0.0 } else { plan.rec[k] * s_prev[k] };
                let mut i = self.decay(i_prev[k], plan.tau_i) + ff[k] + rec;
                let mut u = self.decay(u_prev[k], plan.tau_u) * (1.0 - s_prev[k]);
                match self.mode {
                    Mode::Quantized { .. } => {
                        i = i.clamp(-limit, limit);
                        u = (u + i).clamp(-limit, limit);
                        s_new[k] = (u >= plan.theta) as u8 as f64;
                    }
                    Mode::Relaxed { beta } => {
                        u += i;
                        s_new[k] = 1.0 / (1.0 + (-beta * (u - plan.theta) / VALUE_SCALE).exp());
                    }
                }
                i_new[k] = i;
                u_new[k] = u;
            }
            if let Some(t) = tapes.as_mut() {
                let norm = |v: &[f64]| v.iter().map(|a| a / VALUE_SCALE).collect::<Vec<_>>();
                t.push(LayerTape {
                    x: x.clone(),
                    i_prev: norm(&i_prev),
                    u_prev: norm(&u_prev),
                    s_prev: s_prev.clone(),
                    i: norm(&i_new),
                    u: norm(&u_new),
                    s: s_new.clone(),
                });
            }
            state.i[l] = i_new;
            state.u[l] = u_new;
            state.s[l] = s_new.clone();
            x = s_new;
        }
        if let (Some(rec), Some(t)) = (record, tapes) {
            rec.push(StepTape { layers: t });
        }
        let p = self.pooling;
        let mut flow = [0.0; 2];
        for (j, &s) in x.iter().enumerate() {
            if s != 0.0 {
                flow[0] += self.decode[j] * s;
                flow[1] += self.decode[p + j] * s;
            }
        }
        flow
    }

    fn spike_grad(&self, u: f64, s: f64, theta: f64) -> f64 {
        match self.mode {
            Mode::Quantized { gamma } => surrogate_grad(u - theta / VALUE_SCALE, gamma),
            Mode::Relaxed { beta } => beta * s * (1.0 - s),
        }
    }

    /// Accumulate parameter gradients for one corner's recorded steps.
    ///
    /// `grad_flow[t]` is dL/d(flow at step t). States entering the first
    /// recorded step are constants (detached). With `through_reset` the
    /// gradient also flows through the hard-reset factor.
    pub fn backward(&self, tapes: &[StepTape], grad_flow: &[[f64; 2]], grads: &mut TrainParams, through_reset: bool) {
        assert_eq!(tapes.len(), grad_flow.len());
        let nl = self.plans.len();
        let p = self.pooling;
        let mut g_i_next: Vec<Vec<f64>> = self.plans.iter().map(|pl| vec![0.0; pl.spec.output.len()]).collect();
        let mut g_u_next = g_i_next.clone();
        // reset path needs u at t and tau_u; kept per layer
        for t in (0..tapes.len()).rev() {
            let tape = &tapes[t];
            let pool = &tape.layers[nl - 1];
            let g = grad_flow[t];
            let mut g_s_ext: Vec<f64> = (0..p)
                .map(|j| g[0] * self.decode[j] + g[1] * self.decode[p + j])
                .collect();
            for j in 0..p {
                grads.decode[j] += g[0] * pool.s[j];
                grads.decode[p + j] += g[1] * pool.s[j];
            }
            for l in (0..nl).rev() {
                let plan = &self.plans[l];
                let lt = &tape.layers[l];
                let gp = &mut grads.layers[l];
                let n = plan.spec.output.len();
                let tau_u = plan.tau_u / DECAY_SCALE;
                let tau_i = plan.tau_i / DECAY_SCALE;
                let mut g_i = vec![0.0; n];
                let mut g_u = vec![0.0; n];
                for k in 0..n {
                    let mut g_s = g_s_ext[k];
                    if !plan.rec.is_empty() {
                        g_s += plan.rec[k] / VALUE_SCALE * g_i_next[l][k];
                    }
                    if through_reset {
                        g_s -= tau_u * lt.u[k] * g_u_next[l][k];
                    }
                    let sg = self.spike_grad(lt.u[k], lt.s[k], plan.theta);
                    gp.theta -= g_s * sg;
                    let gu = g_s * sg + g_u_next[l][k] * tau_u * (1.0 - lt.s[k]);
                    let gi = gu + g_i_next[l][k] * tau_i;
                    gp.tau_u += gu * lt.u_prev[k] * (1.0 - lt.s_prev[k]);
                    gp.tau_i += gi * lt.i_prev[k];
                    if !plan.rec.is_empty() {
                        gp.rec[k] += gi * lt.s_prev[k];
                    }
                    g_u[k] = gu;
                    g_i[k] = gi;
                }
                // feedforward weights and input gradient
                let plane = plan.spec.output.height * plan.spec.output.width;
                let out_c = plan.spec.output.channels;
                let taps = plan.wt.len() / out_c;
                let mut g_x = if l > 0 { vec![0.0; lt.x.len()] } else { Vec::new() };
                for (j, &xj) in lt.x.iter().enumerate() {
                    for &(pos, tap) in &plan.fanout[j] {
                        let (pos, tap) = (pos as usize, tap as usize);
                        if xj != 0.0 {
                            for o in 0..out_c {
                                gp.w[o * taps + tap] += xj * g_i[o * plane + pos];
                            }
                        }
                        if l > 0 {
                            let w = &plan.wt[tap * out_c..(tap + 1) * out_c];
                            let mut acc = 0.0;
                            for (o, &wv) in w.iter().enumerate() {
                                acc += wv * g_i[o * plane + pos];
                            }
                            g_x[j] += acc / VALUE_SCALE;
                        }
                    }
                }
                g_i_next[l] = g_i;
                g_u_next[l] = g_u;
                g_s_ext = g_x;
            }
        }
    }
}

fn fanout(spec: &LayerSpec) -> Vec<Vec<(u32, u32)>> {
    let k = spec.kernel;
    let mut out = vec![Vec::new(); spec.input.len()];
    for oy in 0..spec.output.height {
        for ox in 0..spec.output.width {
            for ky in 0..k {
                for kx in 0..k {
                    if let Some((iy, ix)) = spec.tap(oy, ox, ky, kx) {
                        for c in 0..spec.input.channels {
                            let j = spec.input.index(c, iy, ix);
                            out[j].push(((oy * spec.output.width + ox) as u32, (c * k * k + ky * k + kx) as u32));
                        }
                    }
                }
            }
        }
    }
    out
}
