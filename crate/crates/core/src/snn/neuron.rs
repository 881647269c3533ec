//! Fixed-point current-based LIF neuron.
//!
//! Integer state update for one neuron with per-layer shared decays and
//! threshold:
//!
//! ```text
//! I[t] = trunc(I[t-1] * tau_i / 4096) + ff[t] + w_rec * S[t-1]
//! U[t] = trunc(U[t-1] * tau_u / 4096) * (1 - S[t-1]) + I[t]
//! S[t] = U[t] >= theta
//! ```
//!
//! `trunc` rounds toward zero, matching the arithmetic shift of the target
//! hardware. States are kept inside a signed 24-bit envelope.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Decay value representing "no leak".
pub const DECAY_ONE: i32 = 4096;
pub const THETA_MAX: i32 = 131_071;
pub const WEIGHT_STEP: i32 = 8;
pub const WEIGHT_MIN: i32 = -256;
pub const WEIGHT_MAX: i32 = 256 - WEIGHT_STEP;
/// Largest representable magnitude of `U` and `I`.
pub const STATE_LIMIT: i32 = (1 << 23) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub tau_u: i32,
    pub tau_i: i32,
    pub theta: i32,
}

impl NeuronParams {
    pub fn new(tau_u: i32, tau_i: i32, theta: i32) -> Result<Self> {
        let p = Self {
            tau_u,
            tau_i,
            theta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0..=DECAY_ONE).contains(&self.tau_u) || !(0..=DECAY_ONE).contains(&self.tau_i) {
            return Err(Error::Config(format!(
                "decays must lie in [0, {DECAY_ONE}], got tau_u={} tau_i={}",
                self.tau_u, self.tau_i
            )));
        }
        if !(0..=THETA_MAX).contains(&self.theta) {
            return Err(Error::Config(format!(
                "threshold must lie in [0, {THETA_MAX}], got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

/// Nearest multiple of [`WEIGHT_STEP`], ties toward zero, saturated to
/// `[WEIGHT_MIN, WEIGHT_MAX]`. NaN maps to zero.
pub fn quantize_weight(w: f64) -> i32 {
    if w.is_nan() {
        return 0;
    }
    let q = w / WEIGHT_STEP as f64;
    let mag = q.abs();
    let floor = mag.floor();
    let rounded = if mag - floor > 0.5 { floor + 1.0 } else { floor };
    let levels = (rounded.min(1e6) as i32) * WEIGHT_STEP;
    let signed = if q < 0.0 { -levels } else { levels };
    signed.clamp(WEIGHT_MIN, WEIGHT_MAX)
}

pub fn is_quantized_weight(w: i32) -> bool {
    w % WEIGHT_STEP == 0 && (WEIGHT_MIN..=WEIGHT_MAX).contains(&w)
}

/// `trunc(x * tau / 4096)`; Rust integer division already truncates toward zero.
#[inline]
pub fn decay(x: i32, tau: i32) -> i32 {
    ((x as i64 * tau as i64) / DECAY_ONE as i64) as i32
}

/// Clamp to the 24-bit state envelope. The flag reports whether clamping
/// happened.
#[inline]
pub fn saturate(x: i64) -> (i32, bool) {
    if x > STATE_LIMIT as i64 {
        (STATE_LIMIT, true)
    } else if x < -(STATE_LIMIT as i64) {
        (-STATE_LIMIT, true)
    } else {
        (x as i32, false)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NeuronState {
    pub u: i32,
    pub i: i32,
    /// Spike emitted on the previous step.
    pub s: bool,
}

/// Advance one neuron by one step. `ff` is the summed feedforward input.
pub fn neuron_step(state: NeuronState, ff: i64, params: &NeuronParams, w_rec: i32) -> (NeuronState, bool) {
    let s_prev = state.s as i64;
    let (i_new, sat_i) = saturate(decay(state.i, params.tau_i) as i64 + ff + w_rec as i64 * s_prev);
    let (u_new, sat_u) = saturate(decay(state.u, params.tau_u) as i64 * (1 - s_prev) + i_new as i64);
    if sat_i || sat_u {
        log::warn!("neuron state saturated at the 24-bit envelope");
    }
    let spike = u_new >= params.theta;
    (
        NeuronState {
            u: u_new,
            i: i_new,
            s: spike,
        },
        spike,
    )
}
