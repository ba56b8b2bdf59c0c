//! SINR, achievable rates and feasibility checks.
//!
//! The desired signals of the two BSs add coherently while each BS's
//! interference is counted separately:
//!
//! ```text
//! R_k = log2(1 + |a_{k,1}·w_{k,1} + a_{k,2}·w_{k,2}|² / (I_1 + I_2 + σ²))
//! I_b = Σ_{k'≠k} |a_{k,b}·w_{k',b}|²
//! ```

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CVar, Tape, Var};
use crate::channel::EffectiveChannel;
use crate::error::{index_check, Error, Result};
use crate::geometry::{SystemGeometry, BS_COUNT};

/// Slack allowed on `R_k ≥ R_th`.
pub const QOS_TOLERANCE: f64 = 1e-9;
/// Relative slack allowed on the power budget.
pub const POWER_TOLERANCE: f64 = 1e-9;

/// Beamformers indexed `[bs][waveguide][user]`; column `k` of BS `b` is
/// `w_{k,b}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamformingState {
    pub w: Vec<Vec<Vec<Complex64>>>,
}

impl BeamformingState {
    pub fn zeros(geometry: &SystemGeometry) -> Self {
        let k = geometry.user_count();
        BeamformingState {
            w: geometry
                .stations
                .iter()
                .map(|s| vec![vec![Complex64::new(0.0, 0.0); k]; s.waveguides.len()])
                .collect(),
        }
    }

    /// Complex Gaussian entries scaled so each BS uses `fraction` of its
    /// budget.
    pub fn random<R: Rng>(geometry: &SystemGeometry, fraction: f64, rng: &mut R) -> Self {
        let mut state = Self::zeros(geometry);
        for (b, bs) in state.w.iter_mut().enumerate() {
            for v in bs.iter_mut().flatten() {
                *v = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            }
            let used: f64 = bs.iter().flatten().map(|v| v.norm_sqr()).sum();
            let scale = (fraction * geometry.stations[b].power_budget / used).sqrt();
            for v in bs.iter_mut().flatten() {
                *v *= scale;
            }
        }
        state
    }

    pub fn user_count(&self) -> usize {
        self.w
            .first()
            .and_then(|b| b.first())
            .map(Vec::len)
            .unwrap_or(0)
    }

    /// `w_{k,b}` as a vector over waveguides.
    pub fn column(&self, bs: usize, user: usize) -> Vec<Complex64> {
        self.w[bs].iter().map(|row| row[user]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().flatten().flatten().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Real coordinates in `[bs][waveguide][user][re, im]` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.w
            .iter()
            .flatten()
            .flatten()
            .flat_map(|v| [v.re, v.im])
            .collect()
    }

    /// Inverse of [`BeamformingState::flatten`] for a state of the same shape.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut it = flat.chunks_exact(2);
        BeamformingState {
            w: self
                .w
                .iter()
                .map(|bs| {
                    bs.iter()
                        .map(|row| {
                            row.iter()
                                .map(|_| {
                                    let c = it.next().expect("flat length");
                                    Complex64::new(c[0], c[1])
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn matches(&self, geometry: &SystemGeometry) -> bool {
        self.w.len() == BS_COUNT
            && self.w.iter().zip(&geometry.stations).all(|(rows, s)| {
                rows.len() == s.waveguides.len()
                    && rows.iter().all(|r| r.len() == geometry.user_count())
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRate {
    pub rate: f64,
    pub sinr: f64,
    pub signal: f64,
    /// Interference through BS 1 and BS 2 (W).
    pub interference: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub per_user_rate: Vec<f64>,
    pub per_user_sinr: Vec<f64>,
    pub interference: Vec<[f64; 2]>,
    pub feasible_qos: Vec<bool>,
    pub sum_rate: f64,
}

impl RateReport {
    pub fn all_qos_met(&self) -> bool {
        self.feasible_qos.iter().all(|&f| f)
    }
}

fn check_shapes(a: &EffectiveChannel, w: &BeamformingState) -> Result<()> {
    if a.gains.iter().any(|u| u.len() != BS_COUNT) || w.w.len() != BS_COUNT {
        return Err(Error::Dimension(format!("expected {BS_COUNT} base stations")));
    }
    let k = a.user_count();
    for b in 0..BS_COUNT {
        let n = w.w[b].len();
        if a.gains.iter().any(|u| u[b].len() != n) {
            return Err(Error::Dimension(format!(
                "BS {b}: channel rows and beamformer have different waveguide counts"
            )));
        }
        if w.w[b].iter().any(|row| row.len() != k) {
            return Err(Error::Dimension(format!(
                "BS {b}: beamformer has the wrong number of user columns (expected {k})"
            )));
        }
    }
    Ok(())
}

fn project(a: &[Complex64], w: &[Vec<Complex64>], user: usize) -> Complex64 {
    a.iter().zip(w).map(|(x, row)| x * row[user]).sum()
}

/// Rate, SINR and per-BS interference of one user.
pub fn user_rate(a: &EffectiveChannel, w: &BeamformingState, user: usize, noise_power: f64) -> Result<UserRate> {
    check_shapes(a, w)?;
    index_check("user", user, a.user_count())?;
    if !(noise_power > 0.0) {
        return Err(Error::Config(format!("noise power must be positive, got {noise_power}")));
    }
    let mut desired = Complex64::new(0.0, 0.0);
    let mut interference = [0.0; BS_COUNT];
    for b in 0..BS_COUNT {
        let row = a.row(user, b);
        desired += project(row, &w.w[b], user);
        for other in (0..a.user_count()).filter(|&o| o != user) {
            interference[b] += project(row, &w.w[b], other).norm_sqr();
        }
    }
    let signal = desired.norm_sqr();
    let sinr = signal / (interference.iter().sum::<f64>() + noise_power);
    Ok(UserRate {
        rate: (1.0 + sinr).log2(),
        sinr,
        signal,
        interference,
    })
}

pub fn sum_rate(
    a: &EffectiveChannel,
    w: &BeamformingState,
    noise_power: f64,
    rate_threshold: f64,
) -> Result<RateReport> {
    let users = (0..a.user_count())
        .map(|k| user_rate(a, w, k, noise_power))
        .collect::<Result<Vec<_>>>()?;
    Ok(RateReport {
        per_user_rate: users.iter().map(|u| u.rate).collect(),
        per_user_sinr: users.iter().map(|u| u.sinr).collect(),
        interference: users.iter().map(|u| u.interference).collect(),
        feasible_qos: users.iter().map(|u| u.rate >= rate_threshold - QOS_TOLERANCE).collect(),
        sum_rate: users.iter().map(|u| u.rate).sum(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerCheck {
    /// `trace(W_b W_b^H)` per BS (W).
    pub used: [f64; BS_COUNT],
    pub feasible: bool,
}

pub fn power_check(w: &BeamformingState, budgets: [f64; BS_COUNT]) -> PowerCheck {
    let mut used = [0.0; BS_COUNT];
    for (b, u) in used.iter_mut().enumerate() {
        *u = w.w.get(b).map_or(0.0, |rows| rows.iter().flatten().map(|v| v.norm_sqr()).sum());
    }
    let feasible = used
        .iter()
        .zip(budgets)
        .all(|(&u, p)| u <= p * (1.0 + POWER_TOLERANCE));
    PowerCheck { used, feasible }
}

/// Waveguide serving each user at each BS, `[user][bs]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WdmaAssignment {
    pub waveguide: Vec<[usize; BS_COUNT]>,
}

impl WdmaAssignment {
    pub fn validate(&self, waveguides: [usize; BS_COUNT]) -> Result<()> {
        for b in 0..BS_COUNT {
            let mut taken = vec![false; waveguides[b]];
            for per_user in &self.waveguide {
                let n = per_user[b];
                index_check("waveguide", n, waveguides[b])?;
                if taken[n] {
                    return Err(Error::NonInjective { bs: b, waveguide: n });
                }
                taken[n] = true;
            }
        }
        Ok(())
    }
}

fn channel_waveguides(a: &EffectiveChannel) -> Result<[usize; BS_COUNT]> {
    let shape = a.shape();
    if shape.len() != BS_COUNT {
        return Err(Error::Dimension("channel has no users or wrong BS count".into()));
    }
    Ok([shape[0], shape[1]])
}

/// The sparse beamformer WDMA implies: column `k` of BS `b` is non-zero only
/// on its assigned waveguide, with amplitude `sqrt(power)` and the phase that
/// makes `a_{k,b}[n]·w` real and positive.
pub fn wdma_beamforming(
    a: &EffectiveChannel,
    assignment: &WdmaAssignment,
    powers: &[Vec<f64>],
) -> Result<BeamformingState> {
    let wg = channel_waveguides(a)?;
    assignment.validate(wg)?;
    if assignment.waveguide.len() != a.user_count() {
        return Err(Error::Dimension("assignment must cover every user".into()));
    }
    let k = a.user_count();
    let mut w: Vec<Vec<Vec<Complex64>>> = (0..BS_COUNT)
        .map(|b| vec![vec![Complex64::new(0.0, 0.0); k]; wg[b]])
        .collect();
    for (user, per_bs) in assignment.waveguide.iter().enumerate() {
        for b in 0..BS_COUNT {
            let n = per_bs[b];
            let p = powers[b][n];
            w[b][n][user] = Complex64::from_polar(p.sqrt(), -a.gains[user][b][n].arg());
        }
    }
    Ok(BeamformingState { w })
}

/// WDMA rates evaluated directly from the channel magnitudes; `powers` are
/// watts per waveguide, `[bs][waveguide]`.
pub fn wdma_rate(
    a: &EffectiveChannel,
    assignment: &WdmaAssignment,
    powers: &[Vec<f64>],
    noise_power: f64,
    rate_threshold: f64,
) -> Result<RateReport> {
    let wg = channel_waveguides(a)?;
    assignment.validate(wg)?;
    if assignment.waveguide.len() != a.user_count() {
        return Err(Error::Dimension("assignment must cover every user".into()));
    }
    if powers.len() != BS_COUNT || (0..BS_COUNT).any(|b| powers[b].len() != wg[b]) {
        return Err(Error::Dimension("powers must be given per BS and waveguide".into()));
    }
    if !(noise_power > 0.0) {
        return Err(Error::Config(format!("noise power must be positive, got {noise_power}")));
    }
    let k = a.user_count();
    let mut report = RateReport {
        per_user_rate: Vec::with_capacity(k),
        per_user_sinr: Vec::with_capacity(k),
        interference: Vec::with_capacity(k),
        feasible_qos: Vec::with_capacity(k),
        sum_rate: 0.0,
    };
    for user in 0..k {
        let mut amplitude = 0.0;
        let mut interference = [0.0; BS_COUNT];
        for b in 0..BS_COUNT {
            let own = assignment.waveguide[user][b];
            amplitude += powers[b][own].sqrt() * a.gains[user][b][own].norm();
            for (other, per_bs) in assignment.waveguide.iter().enumerate() {
                if other != user {
                    let n = per_bs[b];
                    interference[b] += powers[b][n] * a.gains[user][b][n].norm_sqr();
                }
            }
        }
        let sinr = amplitude * amplitude / (interference.iter().sum::<f64>() + noise_power);
        let rate = (1.0 + sinr).log2();
        report.per_user_rate.push(rate);
        report.per_user_sinr.push(sinr);
        report.interference.push(interference);
        report.feasible_qos.push(rate >= rate_threshold - QOS_TOLERANCE);
        report.sum_rate += rate;
    }
    Ok(report)
}

/// Per-user rates recorded on `tape`. `a` is `[user][bs][waveguide]`, `w` is
/// `[bs][waveguide][user]`.
pub fn user_rates_on_tape(tape: &mut Tape, a: &[Vec<Vec<CVar>>], w: &[Vec<Vec<CVar>>], noise_power: f64) -> Vec<Var> {
    let k = a.len();
    let mut rates = Vec::with_capacity(k);
    for user in 0..k {
        let mut desired: Option<CVar> = None;
        let mut denom: Option<Var> = None;
        for b in 0..BS_COUNT {
            let row = &a[user][b];
            for target in 0..k {
                let col: Vec<CVar> = w[b].iter().map(|r| r[target]).collect();
                let proj = CVar::dot(tape, row, &col);
                if target == user {
                    desired = Some(match desired {
                        None => proj,
                        Some(d) => d.add(tape, proj),
                    });
                } else {
                    let p = proj.abs2(tape);
                    denom = Some(match denom {
                        None => p,
                        Some(d) => tape.add(d, p),
                    });
                }
            }
        }
        let signal = desired.expect("two base stations").abs2(tape);
        let denom = match denom {
            Some(d) => tape.offset(d, noise_power),
            None => tape.constant(noise_power),
        };
        let sinr = tape.div(signal, denom);
        let one_plus = tape.offset(sinr, 1.0);
        rates.push(tape.log2(one_plus));
    }
    rates
}
