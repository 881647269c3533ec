//! Integer spiking network engine.

pub mod checkpoint;
pub mod network;
pub mod neuron;

pub use checkpoint::{load_checkpoint, save_checkpoint, TrainingSnapshot};
pub use network::{
    decode_flow, CompiledNetwork, CornerNetwork, DecodeMatrix, Layer, LayerSpec, LayerState, NetworkConfig,
    NetworkWeights, StepOutput, VisionNetwork, VisionStep,
};
pub use neuron::{neuron_step, quantize_weight, NeuronParams, NeuronState};
