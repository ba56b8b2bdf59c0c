//! Gradient-based meta-learning of `(W, P)`.
//!
//! Two small networks turn sum-rate gradients into updates: the BVN proposes
//! `ΔW` one waveguide row at a time and the PPN proposes `ΔP` one waveguide
//! (or one PA) at a time. An outer iteration runs `N_i` BVN steps with the
//! positions held fixed, then `N_i` PPN steps with the resulting beamformer
//! held fixed, rescales the beamformer into the power budget and scores the
//! result with the penalised meta-loss. The network weights are trained with
//! Adam on the meta-loss, differentiated through the whole unrolled trajectory
//! including the rate gradients the networks consumed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CVar, Tape, Var};
use crate::baselines::equidistant_positions;
use crate::channel::{effective_channels, effective_channels_on_tape};
use crate::error::{Error, Result};
use crate::geometry::{range_violations, spacing_violations, PinchingState, SystemGeometry, BS_COUNT};
use crate::nets::{mlp_forward_first, mlp_init, AdamState, MlpParams, MlpVars, NetworkDocument, DEFAULT_HIDDEN};
use crate::objective::TapeState;
use crate::rate::{power_check, sum_rate, user_rates_on_tape, BeamformingState, RateReport};

/// Largest range overshoot (m) that best-tracking clamps instead of rejecting.
pub const RANGE_CLAMP_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyMode {
    /// `ζ·relu(violation)`: continuous, used for training.
    #[default]
    Hinge,
    /// `ζ·[violated]`: counts violated conditions.
    Indicator,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PpnMode {
    /// One PPN call per waveguide on the `P_n` position gradients.
    #[default]
    PerWaveguide,
    /// One PPN call per PA on the `K` per-user gradients `∂R_k/∂x`.
    PerPa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmlConfig {
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub epochs: usize,
    /// QoS penalty weight ζ1.
    pub zeta1: f64,
    /// Placement penalty weight ζ2.
    pub zeta2: f64,
    /// Adam learning rate of the BVN (β_W).
    pub lr_w: f64,
    /// Adam learning rate of the PPN (β_P).
    pub lr_p: f64,
    pub penalty: PenaltyMode,
    /// Meta-gradients flow only through the last `truncation` steps of each
    /// inner loop; 0 keeps the full unroll.
    pub truncation: usize,
    pub seed: u64,
    pub hidden: usize,
    pub ppn_mode: PpnMode,
    /// Outer iterations per Adam step; 0 means one step per epoch.
    pub meta_update_every: usize,
    /// Start each outer iteration from the previous candidate instead of the
    /// epoch's initial point.
    pub warm_start: bool,
    /// Share of each BS budget used by the initial beamformer.
    pub init_power_fraction: f64,
    /// Share of the initial beamformer's power in its random component; 1
    /// gives a pure complex Gaussian start.
    pub init_noise: f64,
    /// Metres per unit of PPN output; defaults to the waveguide span.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position_scale: Option<f64>,
}

impl Default for GmlConfig {
    fn default() -> Self {
        GmlConfig {
            inner_iterations: 10,
            outer_iterations: 200,
            epochs: 50,
            zeta1: 1e-4,
            zeta2: 1e-2,
            lr_w: 1e-3,
            lr_p: 1.6e-3,
            penalty: PenaltyMode::Hinge,
            truncation: 0,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            ppn_mode: PpnMode::PerWaveguide,
            meta_update_every: 0,
            warm_start: false,
            init_power_fraction: 0.5,
            init_noise: 0.1,
            position_scale: None,
        }
    }
}

impl GmlConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("gml.{m}")));
        if self.inner_iterations == 0 {
            return bad("inner_iterations must be at least 1");
        }
        if self.outer_iterations == 0 {
            return bad("outer_iterations must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.zeta1 >= 0.0 && self.zeta2 >= 0.0) {
            return bad("zeta1 and zeta2 must be non-negative");
        }
        if !(self.lr_w > 0.0 && self.lr_p > 0.0) {
            return bad("lr_w and lr_p must be positive");
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1");
        }
        if !(self.init_power_fraction > 0.0 && self.init_power_fraction <= 1.0) {
            return bad("init_power_fraction must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.init_noise) {
            return bad("init_noise must lie in [0, 1]");
        }
        if let Some(s) = self.position_scale {
            if !(s > 0.0) {
                return bad("position_scale must be positive");
            }
        }
        Ok(())
    }
}

/// Meta-loss terms; `total` is their sum and `rate_loss = −sum_rate`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rate_loss: f64,
    pub threshold_loss: f64,
    pub spacing_loss: f64,
    pub range_loss: f64,
    pub total: f64,
    pub sum_rate: f64,
}

fn indicator(violated: bool) -> f64 {
    if violated {
        1.0
    } else {
        0.0
    }
}

fn penalty_terms(geometry: &SystemGeometry, rates: &[f64], p: &PinchingState, zeta1: f64, zeta2: f64, mode: PenaltyMode) -> [f64; 3] {
    let ds = geometry.min_spacing;
    let mut threshold = 0.0;
    for &r in rates {
        threshold += match mode {
            PenaltyMode::Hinge => (geometry.rate_threshold - r).max(0.0),
            PenaltyMode::Indicator => indicator(r < geometry.rate_threshold),
        };
    }
    let mut spacing = 0.0;
    let mut range = 0.0;
    for (b, bs) in p.x.iter().enumerate() {
        for (n, xs) in bs.iter().enumerate() {
            let span = geometry.stations[b].waveguides[n].span;
            for i in 0..xs.len() {
                for j in i + 1..xs.len() {
                    let deficit = ds - (xs[i] - xs[j]).abs();
                    spacing += match mode {
                        PenaltyMode::Hinge => deficit.max(0.0),
                        PenaltyMode::Indicator => indicator(deficit > 0.0),
                    };
                }
                let x = xs[i];
                range += match mode {
                    PenaltyMode::Hinge => (-x).max(0.0) + (x - span).max(0.0),
                    PenaltyMode::Indicator => indicator(x < 0.0) + indicator(x > span),
                };
            }
        }
    }
    [zeta1 * threshold, zeta2 * spacing, zeta2 * range]
}

/// Meta-loss of a concrete `(W, P)`. The power budget is not penalised; see
/// [`normalize_power`].
pub fn meta_loss(
    geometry: &SystemGeometry,
    w: &BeamformingState,
    p: &PinchingState,
    zeta1: f64,
    zeta2: f64,
    mode: PenaltyMode,
) -> Result<LossBreakdown> {
    let a = effective_channels(geometry, p)?;
    let report = sum_rate(&a, w, geometry.noise_power, geometry.rate_threshold)?;
    let [threshold_loss, spacing_loss, range_loss] = penalty_terms(geometry, &report.per_user_rate, p, zeta1, zeta2, mode);
    let rate_loss = -report.sum_rate;
    Ok(LossBreakdown {
        rate_loss,
        threshold_loss,
        spacing_loss,
        range_loss,
        total: rate_loss + threshold_loss + spacing_loss + range_loss,
        sum_rate: report.sum_rate,
    })
}

/// Loss terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub sum_rate: Var,
    pub threshold: Var,
    pub spacing: Var,
    pub range: Var,
    pub total: Var,
}

pub fn meta_loss_on_tape(
    tape: &mut Tape,
    geometry: &SystemGeometry,
    state: &TapeState,
    zeta1: f64,
    zeta2: f64,
    mode: PenaltyMode,
) -> LossVars {
    let a = effective_channels_on_tape(tape, geometry, &state.x);
    let rates = user_rates_on_tape(tape, &a, &state.w, geometry.noise_power);
    let sum_rate = tape.sum(&rates);

    let (threshold, spacing, range) = match mode {
        PenaltyMode::Hinge => {
            let ds = geometry.min_spacing;
            let mut th = Vec::new();
            for &r in &rates {
                let gap = tape.neg(r);
                let gap = tape.offset(gap, geometry.rate_threshold);
                th.push(tape.relu(gap));
            }
            let mut sp = Vec::new();
            let mut rg = Vec::new();
            for (b, bs) in state.x.iter().enumerate() {
                for (n, xs) in bs.iter().enumerate() {
                    let span = geometry.stations[b].waveguides[n].span;
                    for i in 0..xs.len() {
                        for j in i + 1..xs.len() {
                            let diff = tape.sub(xs[i], xs[j]);
                            let gap = tape.abs(diff);
                            let deficit = tape.neg(gap);
                            let deficit = tape.offset(deficit, ds);
                            sp.push(tape.relu(deficit));
                        }
                        let below = tape.neg(xs[i]);
                        rg.push(tape.relu(below));
                        let above = tape.offset(xs[i], -span);
                        rg.push(tape.relu(above));
                    }
                }
            }
            let th = tape.sum(&th);
            let sp = tape.sum(&sp);
            let rg = tape.sum(&rg);
            (tape.scale(th, zeta1), tape.scale(sp, zeta2), tape.scale(rg, zeta2))
        }
        PenaltyMode::Indicator => {
            let rate_values = tape.values(&rates);
            let p = PinchingState {
                x: state.x.iter().map(|b| b.iter().map(|n| tape.values(n)).collect()).collect(),
            };
            let [t, s, r] = penalty_terms(geometry, &rate_values, &p, zeta1, zeta2, mode);
            (tape.constant(t), tape.constant(s), tape.constant(r))
        }
    };
    let neg = tape.neg(sum_rate);
    let total = tape.add(neg, threshold);
    let total = tape.add(total, spacing);
    let total = tape.add(total, range);
    LossVars {
        sum_rate,
        threshold,
        spacing,
        range,
        total,
    }
}

/// Scales `W_b` down onto the budget when `trace(W_b W_b^H) > P_BS,b`.
pub fn normalize_power(w: &BeamformingState, budgets: [f64; BS_COUNT]) -> BeamformingState {
    let mut out = w.clone();
    let used = power_check(w, budgets).used;
    for b in 0..BS_COUNT.min(out.w.len()) {
        if used[b] > budgets[b] {
            let s = (budgets[b] / used[b]).sqrt();
            for v in out.w[b].iter_mut().flatten() {
                *v *= s;
            }
        }
    }
    out
}

/// [`normalize_power`] on the tape; the scale factor stays differentiable.
pub fn normalize_power_on_tape(tape: &mut Tape, w: &[Vec<Vec<CVar>>], budgets: [f64; BS_COUNT]) -> Vec<Vec<Vec<CVar>>> {
    w.iter()
        .enumerate()
        .map(|(b, rows)| {
            let entries: Vec<CVar> = rows.iter().flatten().copied().collect();
            let squares: Vec<Var> = entries.iter().map(|c| c.abs2(tape)).collect();
            let used = tape.sum(&squares);
            if tape.value(used) <= budgets[b] {
                return rows.clone();
            }
            let budget = tape.constant(budgets[b]);
            let ratio = tape.div(budget, used);
            let s = tape.sqrt(ratio);
            rows.iter()
                .map(|r| r.iter().map(|c| c.mul_real(tape, s)).collect())
                .collect()
        })
        .collect()
}

/// Position of the current inner step, fed to the BVN.
#[derive(Clone, Copy, Debug)]
pub struct IterationContext {
    pub index: usize,
    pub total: usize,
}

impl IterationContext {
    fn fraction(self) -> f64 {
        self.index as f64 / self.total.max(1) as f64
    }
}

/// Divides gradient variables by their joint L2 norm (+1e-12), on the tape.
fn normalize_features(tape: &mut Tape, g: &[Var]) -> Vec<Var> {
    let squares: Vec<Var> = g.iter().map(|&v| tape.square(v)).collect();
    let ss = tape.sum(&squares);
    let norm = tape.sqrt(ss);
    let denom = tape.offset(norm, 1e-12);
    g.iter().map(|&v| tape.div(v, denom)).collect()
}

fn all_finite(tape: &Tape, vars: &[Var]) -> bool {
    vars.iter().all(|&v| tape.value(v).is_finite())
}

fn detach_w(tape: &mut Tape, w: &[Vec<Vec<CVar>>]) -> Vec<Vec<Vec<CVar>>> {
    w.iter()
        .map(|b| {
            b.iter()
                .map(|r| {
                    r.iter()
                        .map(|c| CVar {
                            re: tape.detach(c.re),
                            im: tape.detach(c.im),
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn detach_x(tape: &mut Tape, x: &[Vec<Vec<Var>>]) -> Vec<Vec<Vec<Var>>> {
    x.iter()
        .map(|b| b.iter().map(|n| n.iter().map(|&v| tape.detach(v)).collect()).collect())
        .collect()
}

/// Outcome of one inner step. `skipped` is set when the rate gradient was not
/// finite and the variable was left unchanged.
pub struct Step<T> {
    pub value: T,
    pub skipped: bool,
}

/// One BVN step with the positions fixed:
/// `W ← W + sqrt(P_BS,b)·BVN([∂R/∂w_{b,n,·}, used_b/(used_b + P_BS,b), i/N_i])`.
pub fn inner_update_w(
    tape: &mut Tape,
    geometry: &SystemGeometry,
    w: &[Vec<Vec<CVar>>],
    channel: &[Vec<Vec<CVar>>],
    bvn: &MlpVars,
    ctx: IterationContext,
) -> Result<Step<Vec<Vec<Vec<CVar>>>>> {
    let k = geometry.user_count();
    let rates = user_rates_on_tape(tape, channel, w, geometry.noise_power);
    let total = tape.sum(&rates);
    let flat: Vec<Var> = w.iter().flatten().flatten().flat_map(|c| [c.re, c.im]).collect();
    let grads = tape.grad_on_tape(total, &flat)?;
    if !all_finite(tape, &grads) {
        return Ok(Step {
            value: w.to_vec(),
            skipped: true,
        });
    }
    let features = normalize_features(tape, &grads);
    let budgets = geometry.budgets();

    let mut deltas: Vec<Vec<Vec<CVar>>> = Vec::with_capacity(w.len());
    let mut offset = 0;
    for (b, rows) in w.iter().enumerate() {
        let squares: Vec<Var> = rows.iter().flatten().map(|c| c.abs2(tape)).collect();
        let used = tape.sum(&squares);
        // used/(used + P) rather than used/P: an unbounded power input lets
        // the BVN feed back on its own step size
        let denom = tape.offset(used, budgets[b]);
        let frac = tape.div(used, denom);
        let step = tape.constant(ctx.fraction());
        let amp = budgets[b].sqrt();
        let mut bs_delta = Vec::with_capacity(rows.len());
        for _ in rows {
            let mut input: Vec<Var> = features[offset..offset + 2 * k].to_vec();
            offset += 2 * k;
            input.push(frac);
            input.push(step);
            let out = mlp_forward_first(tape, bvn, &input, 2 * k)?;
            bs_delta.push(
                (0..k)
                    .map(|u| CVar {
                        re: tape.scale(out[2 * u], amp),
                        im: tape.scale(out[2 * u + 1], amp),
                    })
                    .collect::<Vec<_>>(),
            );
        }
        deltas.push(bs_delta);
    }
    let value = w
        .iter()
        .zip(&deltas)
        .map(|(rows, drows)| {
            rows.iter()
                .zip(drows)
                .map(|(r, d)| r.iter().zip(d).map(|(&x, &dx)| x.add(tape, dx)).collect())
                .collect()
        })
        .collect();
    Ok(Step { value, skipped: false })
}

/// One PPN step with the beamformer fixed: `P ← P + scale·PPN(∂R/∂P)`.
pub fn inner_update_p(
    tape: &mut Tape,
    geometry: &SystemGeometry,
    w: &[Vec<Vec<CVar>>],
    x: &[Vec<Vec<Var>>],
    ppn: &MlpVars,
    mode: PpnMode,
    position_scale: f64,
) -> Result<Step<Vec<Vec<Vec<Var>>>>> {
    let a = effective_channels_on_tape(tape, geometry, x);
    let rates = user_rates_on_tape(tape, &a, w, geometry.noise_power);
    let flat: Vec<Var> = x.iter().flatten().flatten().copied().collect();

    let deltas: Vec<Var> = match mode {
        PpnMode::PerWaveguide => {
            let total = tape.sum(&rates);
            let grads = tape.grad_on_tape(total, &flat)?;
            if !all_finite(tape, &grads) {
                return Ok(Step {
                    value: x.to_vec(),
                    skipped: true,
                });
            }
            let features = normalize_features(tape, &grads);
            let mut deltas = Vec::with_capacity(flat.len());
            let mut offset = 0;
            for xs in x.iter().flatten() {
                let out = mlp_forward_first(tape, ppn, &features[offset..offset + xs.len()], xs.len())?;
                offset += xs.len();
                deltas.extend(out);
            }
            deltas
        }
        PpnMode::PerPa => {
            // per_user[k][i] = ∂R_k/∂x_i
            let mut per_user = Vec::with_capacity(rates.len());
            for &r in &rates {
                per_user.push(tape.grad_on_tape(r, &flat)?);
            }
            let all: Vec<Var> = per_user.iter().flatten().copied().collect();
            if !all_finite(tape, &all) {
                return Ok(Step {
                    value: x.to_vec(),
                    skipped: true,
                });
            }
            let features = normalize_features(tape, &all);
            let n = flat.len();
            let mut deltas = Vec::with_capacity(n);
            for i in 0..n {
                let input: Vec<Var> = (0..rates.len()).map(|k| features[k * n + i]).collect();
                let out = mlp_forward_first(tape, ppn, &input, 1)?;
                deltas.push(out[0]);
            }
            deltas
        }
    };

    let mut it = deltas.into_iter();
    let value = x
        .iter()
        .map(|b| {
            b.iter()
                .map(|xs| {
                    xs.iter()
                        .map(|&xv| {
                            let d = it.next().expect("one delta per PA");
                            let d = tape.scale(d, position_scale);
                            tape.add(xv, d)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(Step { value, skipped: false })
}

/// Result of one unrolled outer iteration on the tape.
pub struct OuterOutput {
    pub w: Vec<Vec<Vec<CVar>>>,
    pub x: Vec<Vec<Vec<Var>>>,
    pub loss: LossVars,
    pub skipped: usize,
}

/// `N_i` BVN steps, `N_i` PPN steps, power normalisation and meta-loss,
/// starting from `start`. The BVN steps see the channel at `anchor`, the
/// positions produced by the previous outer iteration (or `start.x`).
pub fn outer_iteration_on_tape(
    tape: &mut Tape,
    geometry: &SystemGeometry,
    config: &GmlConfig,
    bvn: &MlpVars,
    ppn: &MlpVars,
    start: &TapeState,
    anchor: &[Vec<Vec<Var>>],
) -> Result<OuterOutput> {
    let n_i = config.inner_iterations;
    let keep = |i: usize| config.truncation == 0 || i + config.truncation >= n_i;
    let mut skipped = 0;

    let channel = effective_channels_on_tape(tape, geometry, anchor);
    let mut w = start.w.clone();
    for i in 0..n_i {
        let step = inner_update_w(tape, geometry, &w, &channel, bvn, IterationContext { index: i, total: n_i })?;
        skipped += step.skipped as usize;
        w = if keep(i) { step.value } else { detach_w(tape, &step.value) };
    }

    let scale = config
        .position_scale
        .unwrap_or(geometry.stations[0].waveguides[0].span);
    // W already depends on the start positions through the channel; fresh
    // nodes keep the PPN features a partial derivative with W held fixed.
    let mut x: Vec<Vec<Vec<Var>>> = start
        .x
        .iter()
        .map(|b| b.iter().map(|n| n.iter().map(|&v| tape.offset(v, 0.0)).collect()).collect())
        .collect();
    for i in 0..n_i {
        let step = inner_update_p(tape, geometry, &w, &x, ppn, config.ppn_mode, scale)?;
        skipped += step.skipped as usize;
        x = if keep(i) { step.value } else { detach_x(tape, &step.value) };
    }

    let w = normalize_power_on_tape(tape, &w, geometry.budgets());
    let state = TapeState { w, x };
    let loss = meta_loss_on_tape(tape, geometry, &state, config.zeta1, config.zeta2, config.penalty);
    Ok(OuterOutput {
        w: state.w,
        x: state.x,
        loss,
        skipped,
    })
}

/// Network shapes for a geometry: `(bvn_in, bvn_out, ppn_in, ppn_out)`.
pub fn network_dims(geometry: &SystemGeometry, mode: PpnMode) -> Result<[usize; 4]> {
    let k = geometry.user_count();
    let ppn = match mode {
        PpnMode::PerWaveguide => geometry.uniform_pa_count().ok_or_else(|| {
            Error::Config("per-waveguide PPN needs the same PA count on every waveguide".into())
        })?,
        PpnMode::PerPa => k,
    };
    Ok([2 * k + 2, 2 * k + 2, ppn, ppn])
}

pub fn init_networks(geometry: &SystemGeometry, config: &GmlConfig) -> Result<NetworkDocument> {
    let [bi, bo, pi, po] = network_dims(geometry, config.ppn_mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bvn = mlp_init(bi, config.hidden, bo, rng.next_u64())?;
    let ppn = mlp_init(pi, config.hidden, po, rng.next_u64())?;
    Ok(NetworkDocument::new(bvn, ppn, config.seed))
}

/// Initial point: equidistant PAs and a maximum-ratio beamformer on their
/// channel, mixed with a complex Gaussian carrying `init_noise` of the power.
/// Each BS uses `init_power_fraction` of its budget.
pub fn initial_point(geometry: &SystemGeometry, config: &GmlConfig) -> Result<(BeamformingState, PinchingState)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let p = equidistant_positions(geometry);
    let noise = BeamformingState::random(geometry, 1.0, &mut rng);
    let a = effective_channels(geometry, &p)?;
    let k_count = geometry.user_count();
    let mut w = BeamformingState::zeros(geometry);
    for b in 0..BS_COUNT {
        let share = config.init_power_fraction * geometry.stations[b].power_budget;
        let noise_power: f64 = noise.w[b].iter().flatten().map(|v| v.norm_sqr()).sum();
        let g = (config.init_noise * share / noise_power).sqrt();
        for k in 0..k_count {
            let row = a.row(k, b);
            let norm = row.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            let m = if norm > 0.0 {
                ((1.0 - config.init_noise) * share / k_count as f64).sqrt() / norm
            } else {
                0.0
            };
            for n in 0..row.len() {
                w.w[b][n][k] = row[n].conj() * m + noise.w[b][n][k] * g;
            }
        }
        let used: f64 = w.w[b].iter().flatten().map(|v| v.norm_sqr()).sum();
        let s = (share / used).sqrt();
        w.w[b].iter_mut().flatten().for_each(|v| *v *= s);
    }
    Ok((w, p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    /// Global outer-iteration index (1-based, counting across epochs).
    pub outer_iteration: usize,
    pub sum_rate: f64,
    pub loss: LossBreakdown,
    pub best_so_far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub best_w: BeamformingState,
    pub best_p: PinchingState,
    pub best_sum_rate: f64,
    pub best_report: RateReport,
    pub trace: Vec<TraceRow>,
    pub networks: NetworkDocument,
    /// Inner steps skipped because a rate gradient was not finite.
    pub skipped_updates: usize,
}

/// Returns the candidate if it satisfies the power, spacing and range
/// constraints, clamping range overshoots below [`RANGE_CLAMP_TOLERANCE`].
pub fn feasible_candidate(geometry: &SystemGeometry, w: &BeamformingState, p: &PinchingState) -> Option<PinchingState> {
    if !w.is_finite() || !p.is_finite() || !power_check(w, geometry.budgets()).feasible {
        return None;
    }
    let mut p = p.clone();
    for v in range_violations(geometry, &p) {
        if v.overshoot >= RANGE_CLAMP_TOLERANCE {
            return None;
        }
        let span = geometry.stations[v.bs].waveguides[v.waveguide].span;
        let x = &mut p.x[v.bs][v.waveguide][v.pa];
        *x = x.clamp(0.0, span);
    }
    spacing_violations(geometry, &p).is_empty().then_some(p)
}

struct Best {
    w: BeamformingState,
    p: PinchingState,
    report: RateReport,
}

impl Best {
    fn key(report: &RateReport) -> (bool, f64) {
        (report.all_qos_met(), report.sum_rate)
    }

    /// Returns the candidate's sum rate when its placement is feasible.
    fn offer(slot: &mut Option<Best>, geometry: &SystemGeometry, w: &BeamformingState, p: &PinchingState) -> Result<Option<f64>> {
        let Some(p) = feasible_candidate(geometry, w, p) else {
            return Ok(None);
        };
        let a = effective_channels(geometry, &p)?;
        let report = sum_rate(&a, w, geometry.noise_power, geometry.rate_threshold)?;
        let rate = report.sum_rate;
        let better = match slot {
            None => true,
            Some(b) => Best::key(&report) > Best::key(&b.report),
        };
        if better {
            *slot = Some(Best {
                w: w.clone(),
                p,
                report,
            });
        }
        Ok(Some(rate))
    }
}

struct MetaOptimizer {
    bvn: MlpParams,
    ppn: MlpParams,
    adam_bvn: AdamState,
    adam_ppn: AdamState,
    acc_bvn: Vec<f64>,
    acc_ppn: Vec<f64>,
    pending: usize,
}

impl MetaOptimizer {
    fn accumulate(&mut self, g_bvn: &[f64], g_ppn: &[f64]) {
        for (a, g) in self.acc_bvn.iter_mut().zip(g_bvn) {
            *a += g;
        }
        for (a, g) in self.acc_ppn.iter_mut().zip(g_ppn) {
            *a += g;
        }
        self.pending += 1;
    }

    /// Adam step on the average of the accumulated gradients.
    fn apply(&mut self) -> Result<()> {
        if self.pending == 0 {
            return Ok(());
        }
        let inv = 1.0 / self.pending as f64;
        let g_bvn: Vec<f64> = self.acc_bvn.iter().map(|g| g * inv).collect();
        let g_ppn: Vec<f64> = self.acc_ppn.iter().map(|g| g * inv).collect();
        crate::nets::adam_step(&mut self.adam_bvn, &mut self.bvn, &g_bvn)?;
        crate::nets::adam_step(&mut self.adam_ppn, &mut self.ppn, &g_ppn)?;
        self.acc_bvn.iter_mut().for_each(|g| *g = 0.0);
        self.acc_ppn.iter_mut().for_each(|g| *g = 0.0);
        self.pending = 0;
        Ok(())
    }
}

/// Mean meta-loss of one epoch with the networks held fixed, and its
/// gradient with respect to the BVN and PPN parameters. Each outer iteration
/// starts from the (detached) end point of the previous one, so the gradient
/// is exact when `outer_iterations == 1`.
#[derive(Clone, Debug)]
pub struct EpochLoss {
    pub loss: f64,
    pub grad_bvn: Vec<f64>,
    pub grad_ppn: Vec<f64>,
}

pub fn epoch_loss(
    geometry: &SystemGeometry,
    config: &GmlConfig,
    bvn: &MlpParams,
    ppn: &MlpParams,
    w0: &BeamformingState,
    p0: &PinchingState,
) -> Result<EpochLoss> {
    let mut tape = Tape::new();
    let mut out = EpochLoss {
        loss: 0.0,
        grad_bvn: vec![0.0; bvn.param_count()],
        grad_ppn: vec![0.0; ppn.param_count()],
    };
    let (mut w, mut p) = (w0.clone(), p0.clone());
    let inv = 1.0 / config.outer_iterations as f64;
    for _ in 0..config.outer_iterations {
        tape.clear();
        let bv = bvn.record(&mut tape);
        let pv = ppn.record(&mut tape);
        let start = TapeState::record(&mut tape, &w, &p);
        let o = outer_iteration_on_tape(&mut tape, geometry, config, &bv, &pv, &start, &start.x)?;
        out.loss += inv * tape.value(o.loss.total);
        let grads = tape.backward(o.loss.total)?;
        for (a, g) in out.grad_bvn.iter_mut().zip(grads.collect(&bv.all())) {
            *a += inv * g;
        }
        for (a, g) in out.grad_ppn.iter_mut().zip(grads.collect(&pv.all())) {
            *a += inv * g;
        }
        let state = TapeState { w: o.w, x: o.x };
        w = state.beamforming(&tape);
        p = state.pinching(&tape);
    }
    Ok(out)
}

/// Runs the meta-learned optimizer on one instance.
pub fn train(geometry: &SystemGeometry, config: &GmlConfig) -> Result<TrainResult> {
    train_with(geometry, config, |_| {})
}

/// [`train`] with a callback invoked after every outer iteration.
pub fn train_with(geometry: &SystemGeometry, config: &GmlConfig, mut on_row: impl FnMut(&TraceRow)) -> Result<TrainResult> {
    config.validate()?;
    geometry.validate()?;
    let nets = init_networks(geometry, config)?;
    let (w0, p0) = initial_point(geometry, config)?;
    let w0 = normalize_power(&w0, geometry.budgets());

    let mut opt = MetaOptimizer {
        adam_bvn: AdamState::new(nets.bvn.param_count(), config.lr_w),
        adam_ppn: AdamState::new(nets.ppn.param_count(), config.lr_p),
        acc_bvn: vec![0.0; nets.bvn.param_count()],
        acc_ppn: vec![0.0; nets.ppn.param_count()],
        bvn: nets.bvn,
        ppn: nets.ppn,
        pending: 0,
    };

    let mut best: Option<Best> = None;
    // Running maximum over placement-feasible candidates. The returned
    // solution prefers QoS-feasible candidates, so it can sit below this.
    let mut peak = Best::offer(&mut best, geometry, &w0, &p0)?.unwrap_or(f64::NEG_INFINITY);
    let mut trace = Vec::with_capacity(config.epochs * config.outer_iterations);
    let mut skipped_updates = 0;
    let mut tape = Tape::new();
    let (mut w_start, mut p_start) = (w0.clone(), p0.clone());
    // P* of the previous outer iteration; the BVN steps are evaluated there.
    let mut p_hat = p0.clone();

    for epoch in 0..config.epochs {
        for j in 0..config.outer_iterations {
            tape.clear();
            let bvn = opt.bvn.record(&mut tape);
            let ppn = opt.ppn.record(&mut tape);
            let start = TapeState::record(&mut tape, &w_start, &p_start);
            let anchor = if config.warm_start {
                start.x.clone()
            } else {
                p_hat
                    .x
                    .iter()
                    .map(|b| b.iter().map(|n| n.iter().map(|&v| tape.var(v)).collect()).collect())
                    .collect()
            };
            let out = outer_iteration_on_tape(&mut tape, geometry, config, &bvn, &ppn, &start, &anchor)?;
            skipped_updates += out.skipped;

            let total = tape.value(out.loss.total);
            if !total.is_finite() {
                return Err(Error::Numerical(format!(
                    "meta-loss is not finite at epoch {epoch}, outer iteration {}",
                    j + 1
                )));
            }
            let grads = tape.backward(out.loss.total)?;
            opt.accumulate(&grads.collect(&bvn.all()), &grads.collect(&ppn.all()));

            let state = TapeState { w: out.w, x: out.x };
            let w = state.beamforming(&tape);
            let p = state.pinching(&tape);
            let loss = meta_loss(geometry, &w, &p, config.zeta1, config.zeta2, config.penalty)?;
            if let Some(rate) = Best::offer(&mut best, geometry, &w, &p)? {
                peak = peak.max(rate);
            }
            let row = TraceRow {
                epoch: epoch + 1,
                outer_iteration: epoch * config.outer_iterations + j + 1,
                sum_rate: loss.sum_rate,
                loss,
                best_so_far: peak,
            };
            on_row(&row);
            trace.push(row);

            if config.meta_update_every > 0 && opt.pending >= config.meta_update_every {
                opt.apply()?;
            }
            if config.warm_start {
                w_start = w;
                p_start = p.clone();
            }
            p_hat = p;
        }
        opt.apply()?;
    }

    let best = best.expect("the initial point is always feasible");
    Ok(TrainResult {
        best_sum_rate: best.report.sum_rate,
        best_w: best.w,
        best_p: best.p,
        best_report: best.report,
        trace,
        networks: NetworkDocument::new(opt.bvn, opt.ppn, config.seed),
        skipped_updates,
    })
}
