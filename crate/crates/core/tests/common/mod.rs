//! Oracles built from first principles, sharing nothing with the library's
//! channel and rate code beyond the geometry they read.
#![allow(dead_code)]

use std::f64::consts::PI;

use pacomp_core::baselines::project_positions;
use pacomp_core::{BeamformingState, Complex64, FeedSide, PinchingState, SystemGeometry};
use rand::Rng;

pub fn random_positions<R: Rng>(g: &SystemGeometry, rng: &mut R) -> PinchingState {
    let raw = PinchingState::from_fn(g, |b, n, _| rng.gen_range(0.0..g.stations[b].waveguides[n].span));
    project_positions(g, &raw)
}

pub fn random_beams<R: Rng>(g: &SystemGeometry, rng: &mut R) -> BeamformingState {
    let fraction = rng.gen_range(0.1..1.0);
    BeamformingState::random(g, fraction, rng)
}

/// Stacked `H` (one conjugated free-space entry per PA), block-diagonal `G`
/// of in-waveguide phases, and the explicit product `H^H G`.
pub fn block_matrix_channel(g: &SystemGeometry, p: &PinchingState, k: usize, b: usize) -> Vec<Complex64> {
    let station = &g.stations[b];
    let user = g.users[k];
    let mut h = Vec::new();
    let mut feed = Vec::new();
    let mut owner = Vec::new();
    for (n, wg) in station.waveguides.iter().enumerate() {
        for &x in &p.x[b][n] {
            let d = ((x - user[0]).powi(2) + (wg.y - user[1]).powi(2) + (station.height - user[2]).powi(2)).sqrt();
            let physical = Complex64::from_polar(g.eta / d, -2.0 * PI * d / g.wavelength);
            h.push(physical.conj());
            feed.push(match station.feed_side {
                FeedSide::Left => x,
                FeedSide::Right => wg.span - x,
            });
            owner.push(n);
        }
    }
    let cols = station.waveguides.len();
    let gm: Vec<Vec<Complex64>> = (0..h.len())
        .map(|r| {
            (0..cols)
                .map(|c| {
                    if owner[r] == c {
                        Complex64::from_polar(g.delta_eq.sqrt(), -2.0 * PI * feed[r] / g.guided_wavelength)
                    } else {
                        Complex64::new(0.0, 0.0)
                    }
                })
                .collect()
        })
        .collect();
    (0..cols)
        .map(|c| (0..h.len()).map(|r| h[r].conj() * gm[r][c]).sum())
        .collect()
}

/// Per-user rates: coherent desired signal over both BSs, interference
/// summed BS by BS.
pub fn rates(g: &SystemGeometry, p: &PinchingState, w: &BeamformingState) -> Vec<f64> {
    let k_count = g.users.len();
    let a: Vec<Vec<Vec<Complex64>>> = (0..k_count)
        .map(|k| (0..2).map(|b| block_matrix_channel(g, p, k, b)).collect())
        .collect();
    let inner = |k: usize, b: usize, j: usize| -> Complex64 {
        a[k][b].iter().enumerate().map(|(n, v)| v * w.w[b][n][j]).sum()
    };
    (0..k_count)
        .map(|k| {
            let signal = (inner(k, 0, k) + inner(k, 1, k)).norm_sqr();
            let mut interference = 0.0;
            for j in (0..k_count).filter(|&j| j != k) {
                interference += inner(k, 0, j).norm_sqr() + inner(k, 1, j).norm_sqr();
            }
            (1.0 + signal / (interference + g.noise_power)).log2()
        })
        .collect()
}

pub fn sum_rate(g: &SystemGeometry, p: &PinchingState, w: &BeamformingState) -> f64 {
    rates(g, p, w).iter().sum()
}

/// Central difference with one Richardson step.
pub fn derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let c = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * c(h / 2.0) - c(h)) / 3.0
}

pub fn rel_err(got: f64, want: f64, floor: f64) -> f64 {
    (got - want).abs() / got.abs().max(want.abs()).max(floor)
}

pub fn max_rel_err(got: &[Complex64], want: &[Complex64]) -> f64 {
    let scale = want.iter().map(|v| v.norm()).fold(0.0, f64::max);
    got.iter()
        .zip(want)
        .map(|(a, b)| (a - b).norm() / scale)
        .fold(0.0, f64::max)
}

/// Derivative by Richardson central differences over a ladder of steps from
/// `h` down by factors of sqrt(10). The pair of neighbouring estimates that
/// agree best marks the plateau between truncation and rounding error; its
/// larger-step member is returned since rounding noise shrinks with the
/// step.
pub fn plateau_derivative(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let est: Vec<f64> = (0..15).map(|k| derivative(&f, 0.0, h * 10f64.powf(-0.5 * k as f64))).collect();
    let mut best = (f64::INFINITY, est[0]);
    for pair in est.windows(2) {
        let spread = (pair[1] - pair[0]).abs() / pair[0].abs().max(pair[1].abs()).max(1e-300);
        if spread < best.0 {
            best = (spread, pair[0]);
        }
    }
    best.1
}
