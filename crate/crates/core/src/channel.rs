//! Channel model.
//!
//! Each PA re-radiates the guided wave with amplitude `sqrt(δ_eq)`, so user
//! `k` sees waveguide `n` of BS `b` through one complex gain
//!
//! ```text
//! a_{k,b}[n] = Σ_p sqrt(δ_eq) · η/d_{n,p,k} · exp(−j2π(d_{n,p,k}/λ + x_{n,p}/λ_g))
//! ```
//!
//! where `x_{n,p}` is measured from the feed point. Physical free-space
//! entries are kept unconjugated; the closed form above is the conjugate of
//! the stacked-channel product and is checked against it in the tests.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CVar, Tape, Var};
use crate::error::{index_check, Error, Result};
use crate::geometry::{pa_coordinates, FeedSide, PinchingState, SystemGeometry, BS_COUNT};

/// Phase accumulated over `x` metres of waveguide.
pub fn waveguide_phase(x: f64, guided_wavelength: f64) -> f64 {
    2.0 * PI * x / guided_wavelength
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// `(η/d)·e^{−j2πd/λ}` between a PA and a user.
pub fn freespace_entry(pa: [f64; 3], user: [f64; 3], wavelength: f64, eta: f64) -> Result<Complex64> {
    let d = distance(pa, user);
    if !(d > 0.0) {
        return Err(Error::SingularDistance(d));
    }
    Ok(Complex64::from_polar(eta / d, -2.0 * PI * d / wavelength))
}

/// Gains `a_{k,b}`, indexed `[user][bs][waveguide]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectiveChannel {
    pub gains: Vec<Vec<Vec<Complex64>>>,
}

impl EffectiveChannel {
    pub fn user_count(&self) -> usize {
        self.gains.len()
    }

    pub fn row(&self, user: usize, bs: usize) -> &[Complex64] {
        &self.gains[user][bs]
    }

    /// Waveguide counts per BS, taken from the first user.
    pub fn shape(&self) -> Vec<usize> {
        self.gains
            .first()
            .map(|u| u.iter().map(Vec::len).collect())
            .unwrap_or_default()
    }
}

/// `a_{k,b}` for one user and BS.
pub fn effective_channel(
    geometry: &SystemGeometry,
    state: &PinchingState,
    user: usize,
    bs: usize,
) -> Result<Vec<Complex64>> {
    index_check("user", user, geometry.user_count())?;
    index_check("BS", bs, BS_COUNT)?;
    if !state.matches(geometry) {
        return Err(Error::Dimension("pinching state does not match geometry".into()));
    }
    let u = geometry.users[user];
    let root_delta = geometry.delta_eq.sqrt();
    let mut row = Vec::with_capacity(geometry.waveguide_count(bs));
    for n in 0..geometry.waveguide_count(bs) {
        let mut acc = Complex64::new(0.0, 0.0);
        for p in 0..state.x[bs][n].len() {
            let pos = pa_coordinates(geometry, state, bs, n, p)?;
            // Free-space and guided factors are rounded separately; adding
            // two ~1e4 rad phases first costs about 1e-12 relative accuracy.
            let free = freespace_entry(pos, u, geometry.wavelength, geometry.eta)?;
            let xw = geometry.feed_distance(bs, n, pos[0]);
            acc += free * Complex64::from_polar(root_delta, -waveguide_phase(xw, geometry.guided_wavelength));
        }
        row.push(acc);
    }
    Ok(row)
}

pub fn effective_channels(geometry: &SystemGeometry, state: &PinchingState) -> Result<EffectiveChannel> {
    let gains = (0..geometry.user_count())
        .map(|k| (0..BS_COUNT).map(|b| effective_channel(geometry, state, k, b)).collect())
        .collect::<Result<_>>()?;
    Ok(EffectiveChannel { gains })
}

/// Same gains as [`effective_channels`], recorded on `tape` as functions of
/// the position variables `x[b][n][p]`.
pub fn effective_channels_on_tape(
    tape: &mut Tape,
    geometry: &SystemGeometry,
    x: &[Vec<Vec<Var>>],
) -> Vec<Vec<Vec<CVar>>> {
    let amp = tape.constant(geometry.delta_eq.sqrt() * geometry.eta);
    let kd = 2.0 * PI / geometry.wavelength;
    let kg = 2.0 * PI / geometry.guided_wavelength;
    let zero = tape.constant(0.0);

    // The in-waveguide phase is shared by all users.
    let guided: Vec<Vec<Vec<Var>>> = x
        .iter()
        .enumerate()
        .map(|(b, wgs)| {
            wgs.iter()
                .enumerate()
                .map(|(n, xs)| {
                    xs.iter()
                        .map(|&xv| match geometry.stations[b].feed_side {
                            FeedSide::Left => tape.scale(xv, kg),
                            FeedSide::Right => {
                                let span = geometry.stations[b].waveguides[n].span;
                                let t = tape.scale(xv, -kg);
                                tape.offset(t, kg * span)
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    geometry
        .users
        .iter()
        .map(|u| {
            (0..BS_COUNT)
                .map(|b| {
                    let station = &geometry.stations[b];
                    (0..station.waveguides.len())
                        .map(|n| {
                            let wg = &station.waveguides[n];
                            let rest = (wg.y - u[1]).powi(2) + (station.height - u[2]).powi(2);
                            let mut acc = CVar { re: zero, im: zero };
                            for (p, &xv) in x[b][n].iter().enumerate() {
                                let dx = tape.offset(xv, -u[0]);
                                let dx2 = tape.square(dx);
                                let d2 = tape.offset(dx2, rest);
                                let d = tape.sqrt(d2);
                                let a = tape.div(amp, d);
                                let free = tape.scale(d, kd);
                                let phase = tape.add(free, guided[b][n][p]);
                                let term = CVar::from_polar_neg(tape, a, phase);
                                acc = if p == 0 { term } else { acc.add(tape, term) };
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Line-of-sight channel from a uniform linear array along x, centred at
/// `bs_position`: entry `m` is `d_m^{−α/2}·e^{−j2πd_m/λ}`.
pub fn ula_channel(
    bs_position: [f64; 3],
    antenna_count: usize,
    spacing: f64,
    user: [f64; 3],
    wavelength: f64,
    alpha: f64,
) -> Result<Vec<Complex64>> {
    if antenna_count == 0 {
        return Err(Error::Config("ULA needs at least one element".into()));
    }
    let centre = (antenna_count as f64 - 1.0) / 2.0;
    (0..antenna_count)
        .map(|m| {
            let mut pos = bs_position;
            pos[0] += (m as f64 - centre) * spacing;
            let d = distance(pos, user);
            if !(d > 0.0) {
                return Err(Error::SingularDistance(d));
            }
            Ok(Complex64::from_polar(d.powf(-alpha / 2.0), -2.0 * PI * d / wavelength))
        })
        .collect()
}
