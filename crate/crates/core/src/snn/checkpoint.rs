//! Versioned JSON checkpoints with base64 little-endian payloads.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::network::{DecodeMatrix, Layer, LayerSpec, NetworkConfig, NetworkWeights};
use super::neuron::NeuronParams;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_FORMAT: &str = "neuroflight-snn";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerHeader {
    spec: LayerSpec,
    params: NeuronParams,
    /// Feedforward then recurrent weights as little-endian i16.
    weights: String,
}

/// Optimizer state stored next to the quantized network so training can resume.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingSnapshot {
    pub step: u64,
    pub shadow: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingHeader {
    step: u64,
    shadow: String,
    m: String,
    v: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: NetworkConfig,
    layers: Vec<LayerHeader>,
    decode_cols: usize,
    /// 2 x P row-major little-endian f64.
    decode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingHeader>,
}

fn encode_f64(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f64(s: &str, what: &str) -> Result<Vec<f64>> {
    let bytes = B64.decode(s).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(format!("{what}: payload length {} is not a multiple of 8", bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn encode_i16(v: impl Iterator<Item = i32>) -> String {
    let bytes: Vec<u8> = v.flat_map(|x| (x as i16).to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_i16(s: &str, what: &str) -> Result<Vec<i32>> {
    let bytes = B64.decode(s).map_err(|e| Error::Checkpoint(format!("{what}: {e}")))?;
    if bytes.len() % 2 != 0 {
        return Err(Error::Checkpoint(format!("{what}: odd payload length")));
    }
    Ok(bytes.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as i32).collect())
}

pub fn checkpoint_to_string(weights: &NetworkWeights, training: Option<&TrainingSnapshot>) -> Result<String> {
    weights.validate()?;
    let layers = weights
        .layers
        .iter()
        .map(|l| LayerHeader {
            spec: l.spec.clone(),
            params: l.params,
            weights: encode_i16(l.weights.iter().chain(&l.recurrent).copied()),
        })
        .collect();
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: weights.config.clone(),
        layers,
        decode_cols: weights.decode.cols,
        decode: encode_f64(&weights.decode.data),
        training: training.map(|t| TrainingHeader {
            step: t.step,
            shadow: encode_f64(&t.shadow),
            m: encode_f64(&t.m),
            v: encode_f64(&t.v),
        }),
    };
    serde_json::to_string_pretty(&file).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn checkpoint_from_str(text: &str) -> Result<(NetworkWeights, Option<TrainingSnapshot>)> {
    let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format tag {:?}", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", file.version)));
    }
    let mut layers = Vec::with_capacity(file.layers.len());
    for h in file.layers {
        let mut all = decode_i16(&h.weights, &h.spec.name)?;
        let ff = h.spec.weight_len();
        let rec = if h.spec.recurrent { h.spec.output.len() } else { 0 };
        if all.len() != ff + rec {
            return Err(Error::Checkpoint(format!(
                "layer {}: expected {} weights, found {}",
                h.spec.name,
                ff + rec,
                all.len()
            )));
        }
        let recurrent = all.split_off(ff);
        layers.push(Layer {
            spec: h.spec,
            weights: all,
            recurrent,
            params: h.params,
        });
    }
    let weights = NetworkWeights {
        config: file.config,
        layers,
        decode: DecodeMatrix {
            cols: file.decode_cols,
            data: decode_f64(&file.decode, "decode")?,
        },
    };
    weights.validate()?;
    let training = match file.training {
        Some(t) => Some(TrainingSnapshot {
            step: t.step,
            shadow: decode_f64(&t.shadow, "shadow")?,
            m: decode_f64(&t.m, "m")?,
            v: decode_f64(&t.v, "v")?,
        }),
        None => None,
    };
    Ok((weights, training))
}

pub fn save_checkpoint(path: &Path, weights: &NetworkWeights, training: Option<&TrainingSnapshot>) -> Result<()> {
    write_atomic(path, checkpoint_to_string(weights, training)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkWeights, Option<TrainingSnapshot>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
