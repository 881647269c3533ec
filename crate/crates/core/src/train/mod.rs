//! Quantization-aware self-supervised training of the corner network.

pub mod adam;
pub mod bptt;
pub mod eval;

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    encode_input_spikes, preprocess_stream, window_and_route_until, Event, PoseSample, RoutedWindow, SensorGeometry, WINDOW_US,
};
use crate::homography::{CameraModel, FlowUnit, UnitContext};
use crate::io::CsvTable;
use crate::loss::{loss_and_grad, BufferStep, EventFlowBuffer, LossConfig};
use crate::snn::checkpoint::{save_checkpoint, TrainingSnapshot};
use crate::snn::network::{NetworkConfig, NetworkWeights};
use crate::synth::{ground_truth_corner_flows, translating_sequence, EventSimConfig, TextureConfig};

pub use adam::Adam;
pub use bptt::{surrogate_grad, Mode, NetState, StepTape, TrainNet, TrainParams};
pub use eval::{evaluate_clips, evaluate_recording, EpeReport};

/// Header of the training log.
pub const TRAIN_LOG_HEADER: [&str; 5] = ["step", "contrast_loss", "smooth_loss", "total", "epe_val"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    /// Optimizer steps.
    pub steps: usize,
    pub batch: usize,
    /// Windows per loss buffer.
    pub buffer_len: usize,
    /// Windows run before each buffer to bring the states to a running regime.
    pub warmup_windows: usize,
    pub lr: f64,
    /// Learning-rate multiplier of the decode matrix.
    pub decode_lr_scale: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub surrogate_gamma: f64,
    pub smooth_weight: f64,
    pub train_clips: usize,
    pub val_clips: usize,
    pub clip_windows: usize,
    /// Largest synthetic flow, working-frame px per window.
    pub max_flow: f64,
    pub log_every: usize,
    /// Wall-clock budget in seconds; 0 means unlimited.
    pub time_budget_s: f64,
    /// Stop once validation EPE falls below this (px/window); 0 disables.
    pub target_epe: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            steps: 2000,
            batch: 16,
            buffer_len: 5,
            warmup_windows: 2,
            lr: 1e-4,
            decode_lr_scale: 1.0,
            grad_clip: 0.0,
            surrogate_gamma: 10.0,
            smooth_weight: 0.1,
            train_clips: 256,
            val_clips: 32,
            clip_windows: 12,
            max_flow: 1.5,
            log_every: 50,
            time_budget_s: 0.0,
            target_epe: 0.0,
        }
    }
}

impl TrainConfig {
    /// Small network and higher learning rate for a single CPU core.
    pub fn desk() -> Self {
        Self {
            network: NetworkConfig::with_channels(&[8, 16, 32], 64),
            lr: 2e-3,
            grad_clip: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch == 0 || self.buffer_len == 0 {
            return bad("batch and buffer_len must be positive");
        }
        if self.clip_windows < self.warmup_windows + self.buffer_len {
            return bad("clip_windows must cover warmup_windows + buffer_len");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if self.train_clips == 0 {
            return bad("train_clips must be positive");
        }
        self.network.layer_specs()?;
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            smooth_weight: self.smooth_weight,
            ..LossConfig::default()
        }
    }
}

/// A short synthetic recording, windowed and routed, with its ground truth.
#[derive(Debug, Clone)]
pub struct Clip {
    pub windows: Vec<RoutedWindow>,
    /// Ground-truth corner flows per window, px/ms.
    pub flows: Vec<[[f64; 2]; 4]>,
}

impl Clip {
    /// Network input of one corner in one window as a 0/1 vector.
    pub fn input(&self, window: usize, corner: usize) -> Vec<f64> {
        encode_input_spikes(&self.windows[window].patches[corner])
            .data
            .iter()
            .map(|&b| b as f64)
            .collect()
    }
}

/// Constant-flow clips over fresh random textures.
pub fn synthetic_clips(count: usize, windows: usize, max_flow: f64, seed: u64) -> Result<Vec<Clip>> {
    let sim = EventSimConfig::default();
    let tex = TextureConfig::default();
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let duration = windows as u64 * WINDOW_US;
            let seq = translating_sequence(&sim, &tex, max_flow, duration, &mut rng)?;
            let ws: Vec<RoutedWindow> =
                window_and_route_until(preprocess_stream(&sim.geometry, &seq.events), duration).collect();
            Ok(Clip {
                flows: vec![[seq.flow_px_ms; 4]; ws.len()],
                windows: ws,
            })
        })
        .collect()
}

/// Cut a recording into consecutive clips of `windows` event windows.
/// Ground-truth flows come from the poses; windows outside the pose range
/// (or all of them, without poses) carry NaN flows.
pub fn recording_clips(
    events: &[Event],
    poses: Option<&[PoseSample]>,
    geometry: &SensorGeometry,
    cam: &CameraModel,
    windows: usize,
) -> Result<Vec<Clip>> {
    if windows == 0 {
        return Err(Error::Config("clip length must be positive".into()));
    }
    let end = events.last().map_or(0, |e| e.t + 1);
    let units = UnitContext::default();
    let all: Vec<RoutedWindow> = window_and_route_until(preprocess_stream(geometry, events), end).collect();
    let mut clips = Vec::new();
    for chunk in all.chunks_exact(windows) {
        let flows = chunk
            .iter()
            .map(|w| {
                let mid = (w.window.t_start + WINDOW_US / 2) as f64;
                poses
                    .and_then(|p| eval::kinematics_from_poses(p, mid, WINDOW_US as f64 / 2.0).ok())
                    .and_then(|k| ground_truth_corner_flows(&k, cam, geometry, FlowUnit::PxPerMs, &units).ok())
                    .map_or([[f64::NAN; 2]; 4], |f| f.flows)
            })
            .collect();
        clips.push(Clip {
            windows: chunk.to_vec(),
            flows,
        });
    }
    Ok(clips)
}

/// Mean losses of one optimizer step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub contrast: f64,
    pub smooth: f64,
    pub total: f64,
}

/// Run one buffer of one clip: returns the loss and accumulates gradients.
pub fn buffer_gradient(
    net: &TrainNet,
    clip: &Clip,
    start: usize,
    warmup: usize,
    buffer_len: usize,
    loss_cfg: &LossConfig,
    grads: &mut TrainParams,
) -> Result<StepStats> {
    let mut tapes: [Vec<StepTape>; 4] = Default::default();
    let mut flows = vec![[[0.0; 2]; 4]; buffer_len];
    for (c, tape) in tapes.iter_mut().enumerate() {
        let mut st = net.zero_state();
        for w in start - warmup..start {
            net.step(&mut st, &clip.input(w, c), None);
        }
        for t in 0..buffer_len {
            flows[t][c] = net.step(&mut st, &clip.input(start + t, c), Some(tape));
        }
    }
    let buffer = EventFlowBuffer {
        steps: (0..buffer_len)
            .map(|t| {
                let w = &clip.windows[start + t];
                BufferStep {
                    t_start: w.window.t_start,
                    patches: w.patches.clone(),
                    flows: flows[t],
                }
            })
            .collect(),
    };
    let out = loss_and_grad(&buffer, loss_cfg)?;
    for (c, tape) in tapes.iter().enumerate() {
        let g: Vec<[f64; 2]> = out.grad.iter().map(|g| g[c]).collect();
        net.backward(tape, &g, grads, false);
    }
    Ok(StepStats {
        contrast: out.contrast,
        smooth: out.smooth,
        total: out.total,
    })
}

/// Mutable training state: shadow parameters plus optimizer.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: TrainParams,
    pub adam: Adam,
    lr_scale: Vec<f64>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = NetworkWeights::random(&config.network, &mut rng)?;
        Ok(Self::from_weights(config, &weights, rng))
    }

    fn from_weights(config: TrainConfig, weights: &NetworkWeights, rng: ChaCha8Rng) -> Self {
        let params = TrainParams::from_weights(weights);
        let mut scale = params.zeros_like();
        scale.visit_mut(|v| *v = 1.0);
        scale.decode.iter_mut().for_each(|v| *v = config.decode_lr_scale);
        let adam = Adam::new(params.len(), config.lr);
        Self {
            config,
            lr_scale: scale.flatten(),
            params,
            adam,
            rng,
        }
    }

    /// Continue from a checkpoint. Without a training snapshot the shadow
    /// starts at the quantized weights and the optimizer is fresh.
    pub fn resume(config: TrainConfig, weights: &NetworkWeights, snap: Option<&TrainingSnapshot>, seed: u64) -> Result<Self> {
        config.validate()?;
        if weights.config != config.network {
            return Err(Error::Checkpoint("checkpoint network does not match the training config".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(seed ^ snap.map_or(0, |s| s.step));
        let mut t = Self::from_weights(config, weights, rng);
        if let Some(s) = snap {
            t.params.assign(&s.shadow)?;
            if s.m.len() != t.params.len() || s.v.len() != t.params.len() {
                return Err(Error::Checkpoint("optimizer moments have the wrong length".into()));
            }
            t.adam.m = s.m.clone();
            t.adam.v = s.v.clone();
            t.adam.step = s.step;
        }
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn weights(&self) -> Result<NetworkWeights> {
        self.params.to_weights()
    }

    pub fn snapshot(&self) -> TrainingSnapshot {
        TrainingSnapshot {
            step: self.adam.step,
            shadow: self.params.flatten(),
            m: self.adam.m.clone(),
            v: self.adam.v.clone(),
        }
    }

    /// One optimizer step on a random batch of buffers drawn from `clips`.
    pub fn step(&mut self, clips: &[Clip]) -> Result<StepStats> {
        let cfg = &self.config;
        let mode = Mode::Quantized {
            gamma: cfg.surrogate_gamma,
        };
        let net = TrainNet::new(&self.params, mode);
        let picks: Vec<(usize, usize)> = (0..cfg.batch)
            .map(|_| {
                let c = self.rng.random_range(0..clips.len());
                let max_start = clips[c].windows.len() - cfg.buffer_len;
                (c, self.rng.random_range(cfg.warmup_windows..=max_start))
            })
            .collect();
        let loss_cfg = cfg.loss_config();
        let results = picks
            .par_iter()
            .map(|&(c, s)| {
                let mut g = self.params.zeros_like();
                let st = buffer_gradient(&net, &clips[c], s, cfg.warmup_windows, cfg.buffer_len, &loss_cfg, &mut g)?;
                Ok((st, g.flatten()))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = results.len() as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut stats = StepStats::default();
        for (st, g) in &results {
            stats.contrast += st.contrast / n;
            stats.smooth += st.smooth / n;
            stats.total += st.total / n;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b / n;
            }
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("training gradient".into()));
        }
        if cfg.grad_clip > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > cfg.grad_clip {
                grad.iter_mut().for_each(|g| *g *= cfg.grad_clip / norm);
            }
        }
        let mut flat = self.params.flatten();
        self.adam.update(&mut flat, &grad, &self.lr_scale);
        self.params.assign(&flat)?;
        self.params.clamp();
        Ok(stats)
    }
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: NetworkWeights,
    pub log: CsvTable,
    pub final_epe: f64,
    pub best_epe: f64,
    pub steps: u64,
    pub seconds: f64,
}

/// Train on synthetic clips, logging every `log_every` steps. Keeps the
/// weights with the best validation EPE.
pub fn train_synthetic(config: &TrainConfig, seed: u64, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let started = Instant::now();
    let train = synthetic_clips(config.train_clips, config.clip_windows, config.max_flow, seed ^ 0x7472_6169_6e00)?;
    let val = synthetic_clips(config.val_clips, config.clip_windows, config.max_flow, seed ^ 0x0076_616c_0000)?;
    let mut trainer = Trainer::new(config.clone(), seed)?;
    run_training(&mut trainer, &train, &val, out_dir, started)
}

/// The training loop proper; `started` is when the wall-clock budget began.
pub fn run_training(
    trainer: &mut Trainer,
    train: &[Clip],
    val: &[Clip],
    out_dir: Option<&Path>,
    started: Instant,
) -> Result<TrainOutcome> {
    let cfg = trainer.config.clone();
    // a resumed run appends to the log it left behind
    let previous = match out_dir {
        Some(dir) if trainer.step_count() > 0 => std::fs::read_to_string(dir.join("train_log.csv")).ok(),
        _ => None,
    };
    let mut log = previous
        .and_then(|t| CsvTable::resume(&t, &TRAIN_LOG_HEADER))
        .unwrap_or_else(|| CsvTable::new(&TRAIN_LOG_HEADER));
    let mut acc = StepStats::default();
    let mut since = 0usize;
    let mut best = (f64::INFINITY, trainer.weights()?);
    let mut last_epe = f64::NAN;
    let warmup = cfg.warmup_windows;
    let evaluate = |w: &NetworkWeights| -> Result<f64> {
        if val.is_empty() {
            return Ok(f64::NAN);
        }
        Ok(evaluate_clips(w, val, warmup)?.mean)
    };
    for k in 0..cfg.steps {
        let st = trainer.step(train)?;
        acc.contrast += st.contrast;
        acc.smooth += st.smooth;
        acc.total += st.total;
        since += 1;
        let last = k + 1 == cfg.steps;
        let out_of_time = cfg.time_budget_s > 0.0 && started.elapsed().as_secs_f64() > cfg.time_budget_s;
        if since == cfg.log_every.max(1) || last || out_of_time {
            let w = trainer.weights()?;
            last_epe = evaluate(&w)?;
            let n = since as f64;
            log.push_row(&[
                trainer.step_count() as f64,
                acc.contrast / n,
                acc.smooth / n,
                acc.total / n,
                last_epe,
            ]);
            log::info!("step {} loss {:.6} epe {:.4}", trainer.step_count(), acc.total / n, last_epe);
            if last_epe < best.0 {
                best = (last_epe, w);
            }
            acc = StepStats::default();
            since = 0;
            if let Some(dir) = out_dir {
                log.write(&dir.join("train_log.csv"))?;
                save_checkpoint(&dir.join("checkpoint.json"), &trainer.weights()?, Some(&trainer.snapshot()))?;
            }
            if out_of_time || (cfg.target_epe > 0.0 && last_epe < cfg.target_epe) {
                break;
            }
        }
    }
    let weights = if best.0.is_finite() { best.1 } else { trainer.weights()? };
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("best.json"), &weights, None)?;
    }
    Ok(TrainOutcome {
        weights,
        log,
        final_epe: last_epe,
        best_epe: best.0,
        steps: trainer.step_count(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            network: NetworkConfig::with_channels(&[2, 4, 4], 8),
            steps: 3,
            batch: 2,
            train_clips: 2,
            val_clips: 1,
            clip_windows: 8,
            log_every: 1,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn clips_are_deterministic() {
        let a = synthetic_clips(2, 8, 1.0, 5).unwrap();
        let b = synthetic_clips(2, 8, 1.0, 5).unwrap();
        assert_eq!(a[1].windows, b[1].windows);
        assert_eq!(a[0].windows.len(), 8);
        assert_ne!(a[0].flows[0], a[1].flows[0]);
    }

    #[test]
    fn step_keeps_params_in_range_and_quantizable() {
        let clips = synthetic_clips(2, 8, 1.5, 1).unwrap();
        let mut t = Trainer::new(tiny(), 3).unwrap();
        for _ in 0..3 {
            let s = t.step(&clips).unwrap();
            assert!(s.total.is_finite());
        }
        assert_eq!(t.step_count(), 3);
        let w = t.weights().unwrap();
        w.validate().unwrap();
        assert_eq!(TrainParams::from_weights(&w).to_weights().unwrap(), w);
    }

    #[test]
    fn resume_restores_state() {
        let clips = synthetic_clips(2, 8, 1.5, 1).unwrap();
        let mut t = Trainer::new(tiny(), 3).unwrap();
        t.step(&clips).unwrap();
        let snap = t.snapshot();
        let r = Trainer::resume(tiny(), &t.weights().unwrap(), Some(&snap), 3).unwrap();
        assert_eq!(r.params, t.params);
        assert_eq!(r.adam.m, t.adam.m);
        assert_eq!(r.step_count(), 1);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = tiny();
        c.clip_windows = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.lr = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn training_run_logs_rows() {
        let dir = tempfile::tempdir().unwrap();
        let out = train_synthetic(&tiny(), 9, Some(dir.path())).unwrap();
        assert_eq!(out.log.rows(), 3);
        assert!(dir.path().join("checkpoint.json").exists());
        let again = train_synthetic(&tiny(), 9, None).unwrap();
        assert_eq!(out.log.as_str(), again.log.as_str());
    }
}
