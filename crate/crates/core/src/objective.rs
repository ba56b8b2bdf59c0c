//! The sum rate as a differentiable function of `(W, P)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{CVar, Tape, Var};
use crate::channel::effective_channels_on_tape;
use crate::error::{Error, Result};
use crate::geometry::{PinchingState, SystemGeometry};
use crate::rate::{user_rates_on_tape, BeamformingState};

/// `(W, P)` recorded on a tape; same indexing as the plain states.
#[derive(Clone, Debug)]
pub struct TapeState {
    pub w: Vec<Vec<Vec<CVar>>>,
    pub x: Vec<Vec<Vec<Var>>>,
}

impl TapeState {
    pub fn record(tape: &mut Tape, w: &BeamformingState, p: &PinchingState) -> Self {
        TapeState {
            w: w.w
                .iter()
                .map(|b| b.iter().map(|r| r.iter().map(|v| CVar::new(tape, v.re, v.im)).collect()).collect())
                .collect(),
            x: p.x
                .iter()
                .map(|b| b.iter().map(|n| n.iter().map(|&v| tape.var(v)).collect()).collect())
                .collect(),
        }
    }

    /// Real coordinates of `W` in `[bs][waveguide][user][re, im]` order.
    pub fn w_vars(&self) -> Vec<Var> {
        self.w.iter().flatten().flatten().flat_map(|c| [c.re, c.im]).collect()
    }

    pub fn x_vars(&self) -> Vec<Var> {
        self.x.iter().flatten().flatten().copied().collect()
    }

    pub fn beamforming(&self, tape: &Tape) -> BeamformingState {
        BeamformingState {
            w: self
                .w
                .iter()
                .map(|b| b.iter().map(|r| r.iter().map(|c| c.value(tape)).collect()).collect())
                .collect(),
        }
    }

    pub fn pinching(&self, tape: &Tape) -> PinchingState {
        PinchingState {
            x: self
                .x
                .iter()
                .map(|b| b.iter().map(|n| tape.values(n)).collect())
                .collect(),
        }
    }
}

/// Per-user rates and their sum on `tape`.
pub fn rates_on_tape(tape: &mut Tape, geometry: &SystemGeometry, state: &TapeState) -> (Vec<Var>, Var) {
    let a = effective_channels_on_tape(tape, geometry, &state.x);
    let rates = user_rates_on_tape(tape, &a, &state.w, geometry.noise_power);
    let total = tape.sum(&rates);
    (rates, total)
}

/// `∂R/∂W` and `∂R/∂P` in the layout of the states they belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    /// `[bs][waveguide][user]` → `(∂R/∂Re w, ∂R/∂Im w)`.
    pub d_rate_d_w: Vec<Vec<Vec<[f64; 2]>>>,
    /// `[bs][waveguide][pa]`.
    pub d_rate_d_p: Vec<Vec<Vec<f64>>>,
}

impl GradientBundle {
    pub fn w_flat(&self) -> Vec<f64> {
        self.d_rate_d_w.iter().flatten().flatten().flat_map(|g| *g).collect()
    }

    pub fn p_flat(&self) -> Vec<f64> {
        self.d_rate_d_p.iter().flatten().flatten().copied().collect()
    }
}

/// Sum rate at `(W, P)` and its gradient.
pub fn rate_gradients(geometry: &SystemGeometry, w: &BeamformingState, p: &PinchingState) -> Result<(f64, GradientBundle)> {
    if !w.matches(geometry) || !p.matches(geometry) {
        return Err(Error::Dimension("state does not match geometry".into()));
    }
    let mut tape = Tape::with_capacity(4096);
    let state = TapeState::record(&mut tape, w, p);
    let (_, total) = rates_on_tape(&mut tape, geometry, &state);
    let grads = tape.backward(total)?;
    let bundle = GradientBundle {
        d_rate_d_w: state
            .w
            .iter()
            .map(|b| {
                b.iter()
                    .map(|r| r.iter().map(|c| [grads.get(c.re), grads.get(c.im)]).collect())
                    .collect()
            })
            .collect(),
        d_rate_d_p: state
            .x
            .iter()
            .map(|b| b.iter().map(|n| grads.collect(n)).collect())
            .collect(),
    };
    Ok((tape.value(total), bundle))
}
