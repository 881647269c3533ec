//! Event-camera optical flow with an integer spiking network, planar
//! homography observables, a quadrotor simulator and evolved linear control.

pub mod cli;
pub mod control;
pub mod error;
pub mod events;
pub mod evolve;
pub mod homography;
pub mod io;
pub mod loss;
pub mod quadsim;
pub mod snn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
