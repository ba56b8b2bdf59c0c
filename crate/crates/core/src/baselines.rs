//! Reference schemes: a multi-start projected-gradient oracle, equidistant
//! pinching, waveguide-division multiple access and fixed ULAs.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{CVar, Tape};
use crate::channel::{effective_channels, effective_channels_on_tape, ula_channel, EffectiveChannel};
use crate::error::{Error, Result};
use crate::geometry::{range_violations, spacing_violations, PinchingState, SystemGeometry, BS_COUNT};
use crate::gml::normalize_power;
use crate::objective::TapeState;
use crate::rate::{power_check, sum_rate, user_rates_on_tape, wdma_beamforming, wdma_rate, BeamformingState, RateReport, WdmaAssignment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub restarts: usize,
    pub steps: usize,
    /// Initial beamformer step as a fraction of `sqrt(P_BS)`.
    pub step_size: f64,
    /// Weight of `Σ relu(R_th − R_k)` subtracted from the ascent objective;
    /// 0 maximises the plain sum rate.
    pub qos_weight: f64,
    /// Amplitude gain applied to the ULA channel; defaults to η.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ula_gain: Option<f64>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            restarts: 16,
            steps: 500,
            step_size: 0.1,
            qos_weight: 10.0,
            ula_gain: None,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Config("baselines.restarts must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("baselines.steps must be at least 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("baselines.step_size must be positive".into()));
        }
        if !(self.qos_weight >= 0.0) {
            return Err(Error::Config("baselines.qos_weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Gml,
    Pga,
    Equidistant,
    Wdma,
    Ula,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Scheme::Gml, Scheme::Pga, Scheme::Equidistant, Scheme::Wdma, Scheme::Ula]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Gml => "gml",
            Scheme::Pga => "pga",
            Scheme::Equidistant => "equidistant",
            Scheme::Wdma => "wdma",
            Scheme::Ula => "ula",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feasibility {
    pub power: bool,
    pub spacing: bool,
    pub range: bool,
    pub qos: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub scheme: Scheme,
    pub sum_rate: f64,
    pub per_user_rate: Vec<f64>,
    pub w: BeamformingState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<PinchingState>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assignment: Option<WdmaAssignment>,
    pub report: RateReport,
    pub feasibility: Feasibility,
}

/// Rates and constraint checks of a pinching-antenna solution.
pub fn assess(geometry: &SystemGeometry, w: &BeamformingState, p: &PinchingState) -> Result<(RateReport, Feasibility)> {
    let a = effective_channels(geometry, p)?;
    let report = sum_rate(&a, w, geometry.noise_power, geometry.rate_threshold)?;
    let feasibility = Feasibility {
        power: power_check(w, geometry.budgets()).feasible,
        spacing: spacing_violations(geometry, p).is_empty(),
        range: range_violations(geometry, p).is_empty(),
        qos: report.all_qos_met(),
    };
    Ok((report, feasibility))
}

fn pinching_result(scheme: Scheme, geometry: &SystemGeometry, w: BeamformingState, p: PinchingState) -> Result<BaselineResult> {
    let (report, feasibility) = assess(geometry, &w, &p)?;
    Ok(BaselineResult {
        scheme,
        sum_rate: report.sum_rate,
        per_user_rate: report.per_user_rate.clone(),
        w,
        p: Some(p),
        assignment: None,
        report,
        feasibility,
    })
}

/// `x_p = p·D/(P_n+1)`, `p = 1..P_n`, on every waveguide.
pub fn equidistant_positions(geometry: &SystemGeometry) -> PinchingState {
    PinchingState::from_fn(geometry, |b, n, p| {
        let wg = &geometry.stations[b].waveguides[n];
        (p + 1) as f64 * wg.span / (wg.pa_count + 1) as f64
    })
}

/// Clamps into `[0, D]`, sorts, then pushes neighbours apart to the minimum
/// spacing, first left to right and then right to left from the far end.
pub fn project_positions(geometry: &SystemGeometry, p: &PinchingState) -> PinchingState {
    // Tiny margin so the projected gaps never round below DS.
    let ds = geometry.min_spacing * (1.0 + 1e-12);
    let mut out = p.clone();
    for (b, bs) in out.x.iter_mut().enumerate() {
        for (n, xs) in bs.iter_mut().enumerate() {
            let span = geometry.stations[b].waveguides[n].span;
            for x in xs.iter_mut() {
                *x = x.clamp(0.0, span);
            }
            xs.sort_by(f64::total_cmp);
            for i in 1..xs.len() {
                xs[i] = xs[i].max(xs[i - 1] + ds);
            }
            if let Some(last) = xs.last_mut() {
                *last = last.min(span);
            }
            for i in (0..xs.len().saturating_sub(1)).rev() {
                xs[i] = xs[i].min(xs[i + 1] - ds);
            }
            for x in xs.iter_mut() {
                *x = x.clamp(0.0, span);
            }
        }
    }
    out
}

/// Where the channel comes from during an ascent.
#[derive(Clone, Copy)]
enum ChannelSource<'a> {
    Positions,
    Fixed(&'a EffectiveChannel),
}

struct Ascent<'a> {
    geometry: &'a SystemGeometry,
    source: ChannelSource<'a>,
    qos_weight: f64,
}

impl Ascent<'_> {
    fn channel(&self, p: &PinchingState) -> Result<EffectiveChannel> {
        match self.source {
            ChannelSource::Positions => effective_channels(self.geometry, p),
            ChannelSource::Fixed(a) => Ok(a.clone()),
        }
    }

    fn penalised(&self, report: &RateReport) -> f64 {
        let shortfall: f64 = report
            .per_user_rate
            .iter()
            .map(|r| (self.geometry.rate_threshold - r).max(0.0))
            .sum();
        report.sum_rate - self.qos_weight * shortfall
    }

    fn value(&self, w: &BeamformingState, p: &PinchingState) -> Result<f64> {
        let a = self.channel(p)?;
        let report = sum_rate(&a, w, self.geometry.noise_power, self.geometry.rate_threshold)?;
        Ok(self.penalised(&report))
    }

    /// Gradients of the ascent objective with respect to `W` and `P`.
    fn gradients(&self, w: &BeamformingState, p: &PinchingState) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::with_capacity(4096);
        let state = TapeState::record(&mut tape, w, p);
        let a = match self.source {
            ChannelSource::Positions => effective_channels_on_tape(&mut tape, self.geometry, &state.x),
            ChannelSource::Fixed(a) => a
                .gains
                .iter()
                .map(|u| u.iter().map(|r| r.iter().map(|v| CVar::new(&mut tape, v.re, v.im)).collect()).collect())
                .collect(),
        };
        let rates = user_rates_on_tape(&mut tape, &a, &state.w, self.geometry.noise_power);
        let mut objective = tape.sum(&rates);
        if self.qos_weight > 0.0 {
            let mut short = Vec::with_capacity(rates.len());
            for &r in &rates {
                let gap = tape.neg(r);
                let gap = tape.offset(gap, self.geometry.rate_threshold);
                short.push(tape.relu(gap));
            }
            let s = tape.sum(&short);
            let s = tape.scale(s, self.qos_weight);
            objective = tape.sub(objective, s);
        }
        let g = tape.backward(objective)?;
        Ok((g.collect(&state.w_vars()), g.collect(&state.x_vars())))
    }

    /// Backtracking step along the normalised gradient. Returns the accepted
    /// point (or `None`) and the adapted step.
    fn line_search<T>(
        &self,
        current: f64,
        mut step: f64,
        max_step: f64,
        trial: impl Fn(f64) -> Result<(T, f64)>,
    ) -> Result<(Option<(T, f64)>, f64)> {
        for _ in 0..40 {
            let (candidate, value) = trial(step)?;
            if value.is_finite() && value >= current {
                return Ok((Some((candidate, value)), (2.0 * step).min(max_step)));
            }
            step *= 0.5;
        }
        Ok((None, step))
    }

    fn run(
        &self,
        mut w: BeamformingState,
        mut p: PinchingState,
        optimize_p: bool,
        steps: usize,
        step_size: f64,
    ) -> Result<(BeamformingState, PinchingState, f64)> {
        let budgets = self.geometry.budgets();
        let w_scale = budgets.iter().cloned().fold(0.0, f64::max).sqrt();
        let mut sw = step_size * w_scale;
        let mut sp = self.geometry.guided_wavelength / 8.0;
        let max_sw = 2.0 * w_scale;
        let max_sp = self.geometry.stations[0].waveguides[0].span / 4.0;

        w = normalize_power(&w, budgets);
        if optimize_p {
            p = project_positions(self.geometry, &p);
        }
        let mut current = self.value(&w, &p)?;
        let mut stalled = 0;
        for _ in 0..steps {
            let before = current;

            let (gw, _) = self.gradients(&w, &p)?;
            let norm = gw.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > 0.0 && norm.is_finite() {
                let base = w.flatten();
                let (accepted, next) = self.line_search(current, sw, max_sw, |s| {
                    let moved: Vec<f64> = base.iter().zip(&gw).map(|(x, g)| x + s * g / norm).collect();
                    let cand = normalize_power(&w.with_flat(&moved), budgets);
                    let v = self.value(&cand, &p)?;
                    Ok((cand, v))
                })?;
                sw = next.max(1e-12 * w_scale);
                if let Some((cand, v)) = accepted {
                    w = cand;
                    current = v;
                }
            }

            if optimize_p {
                let (_, gp) = self.gradients(&w, &p)?;
                let norm = gp.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > 0.0 && norm.is_finite() {
                    let base = p.flatten();
                    let (accepted, next) = self.line_search(current, sp, max_sp, |s| {
                        let moved: Vec<f64> = base.iter().zip(&gp).map(|(x, g)| x + s * g / norm).collect();
                        let cand = project_positions(self.geometry, &p.with_flat(&moved));
                        let v = self.value(&w, &cand)?;
                        Ok((cand, v))
                    })?;
                    sp = next.max(1e-9 * self.geometry.guided_wavelength);
                    if let Some((cand, v)) = accepted {
                        p = cand;
                        current = v;
                    }
                }
            }

            if current - before <= 1e-13 * current.abs().max(1.0) {
                stalled += 1;
                if stalled >= 5 {
                    break;
                }
            } else {
                stalled = 0;
            }
        }
        Ok((w, p, current))
    }
}

/// PAs gathered around the users' x-coordinates, users served round-robin.
pub fn user_aligned_positions(geometry: &SystemGeometry) -> PinchingState {
    let mut xs: Vec<f64> = geometry.users.iter().map(|u| u[0]).collect();
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    let raw = PinchingState::from_fn(geometry, |_, _, p| xs[p % k] + (p / k) as f64 * geometry.wavelength);
    project_positions(geometry, &raw)
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(restart as u64))
}

/// Multi-start projected gradient ascent over `(W, P)`.
///
/// Restart 0 starts from the given point, restart 1 from PAs gathered at the
/// users, later restarts from uniformly random positions; beamformers other
/// than the first are random at full budget. The best feasible result wins,
/// earlier restarts on ties.
pub fn pga_oracle(
    geometry: &SystemGeometry,
    p_init: &PinchingState,
    w_init: &BeamformingState,
    config: &BaselineConfig,
    seed: u64,
) -> Result<BaselineResult> {
    config.validate()?;
    if !p_init.matches(geometry) || !w_init.matches(geometry) {
        return Err(Error::Dimension("initial point does not match geometry".into()));
    }
    let ascent = Ascent {
        geometry,
        source: ChannelSource::Positions,
        qos_weight: config.qos_weight,
    };
    let mut best: Option<(f64, BeamformingState, PinchingState)> = None;
    for r in 0..config.restarts {
        let mut rng = restart_rng(seed, r);
        let (w0, p0) = match r {
            0 => (w_init.clone(), p_init.clone()),
            1 => (BeamformingState::random(geometry, 1.0, &mut rng), user_aligned_positions(geometry)),
            _ => {
                let w = BeamformingState::random(geometry, 1.0, &mut rng);
                let p = PinchingState::from_fn(geometry, |b, n, _| {
                    rng.gen_range(0.0..=geometry.stations[b].waveguides[n].span)
                });
                (w, p)
            }
        };
        let (w, p, value) = ascent.run(w0, p0, true, config.steps, config.step_size)?;
        if best.as_ref().map_or(true, |b| value > b.0) {
            best = Some((value, w, p));
        }
    }
    let (_, w, p) = best.expect("at least one restart");
    pinching_result(Scheme::Pga, geometry, w, p)
}

/// Beamforming-only ascent with the PAs frozen at `p`.
pub fn optimize_beamforming(
    geometry: &SystemGeometry,
    p: &PinchingState,
    scheme: Scheme,
    config: &BaselineConfig,
    seed: u64,
) -> Result<BaselineResult> {
    config.validate()?;
    let ascent = Ascent {
        geometry,
        source: ChannelSource::Positions,
        qos_weight: config.qos_weight,
    };
    let mut best: Option<(f64, BeamformingState)> = None;
    for r in 0..config.restarts {
        let mut rng = restart_rng(seed, r);
        let w0 = BeamformingState::random(geometry, 1.0, &mut rng);
        let (w, _, value) = ascent.run(w0, p.clone(), false, config.steps, config.step_size)?;
        if best.as_ref().map_or(true, |b| value > b.0) {
            best = Some((value, w));
        }
    }
    let (_, w) = best.expect("at least one restart");
    pinching_result(scheme, geometry, w, p.clone())
}

/// Equidistant PAs with an optimised beamformer.
pub fn equidistant_baseline(geometry: &SystemGeometry, config: &BaselineConfig, seed: u64) -> Result<BaselineResult> {
    optimize_beamforming(geometry, &equidistant_positions(geometry), Scheme::Equidistant, config, seed)
}

/// Greedy waveguide assignment. Per BS, users are visited in descending
/// order of their strongest gain and take their strongest free waveguide;
/// ties go to the lower user or waveguide index.
pub fn wdma_assign(geometry: &SystemGeometry, p: &PinchingState) -> Result<WdmaAssignment> {
    let k = geometry.user_count();
    for b in 0..BS_COUNT {
        let n = geometry.waveguide_count(b);
        if k > n {
            return Err(Error::TooManyUsers {
                bs: b,
                users: k,
                waveguides: n,
            });
        }
    }
    let a = effective_channels(geometry, p)?;
    let mut out = vec![[0usize; BS_COUNT]; k];
    for b in 0..BS_COUNT {
        let gains: Vec<Vec<f64>> = (0..k).map(|u| a.row(u, b).iter().map(|g| g.norm()).collect()).collect();
        let strongest = |u: usize| gains[u].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&x, &y| strongest(y).total_cmp(&strongest(x)).then(x.cmp(&y)));
        let mut taken = vec![false; gains[0].len()];
        for u in order {
            let mut pick: Option<usize> = None;
            for (n, &g) in gains[u].iter().enumerate() {
                if !taken[n] && pick.map_or(true, |q| g > gains[u][q]) {
                    pick = Some(n);
                }
            }
            let n = pick.expect("k ≤ N_b leaves a free waveguide");
            taken[n] = true;
            out[u][b] = n;
        }
    }
    Ok(WdmaAssignment { waveguide: out })
}

/// Equal split `P_BS/N_b` on every waveguide that serves a user.
pub fn wdma_powers(geometry: &SystemGeometry, assignment: &WdmaAssignment) -> Vec<Vec<f64>> {
    (0..BS_COUNT)
        .map(|b| {
            let st = &geometry.stations[b];
            let share = st.power_budget / st.waveguides.len() as f64;
            let mut p = vec![0.0; st.waveguides.len()];
            for per_user in &assignment.waveguide {
                p[per_user[b]] = share;
            }
            p
        })
        .collect()
}

/// WDMA on the given PA positions.
pub fn wdma_baseline(geometry: &SystemGeometry, p: &PinchingState) -> Result<BaselineResult> {
    let assignment = wdma_assign(geometry, p)?;
    let powers = wdma_powers(geometry, &assignment);
    let a = effective_channels(geometry, p)?;
    let direct = wdma_rate(&a, &assignment, &powers, geometry.noise_power, geometry.rate_threshold)?;
    let w = wdma_beamforming(&a, &assignment, &powers)?;
    let mut result = pinching_result(Scheme::Wdma, geometry, w, p.clone())?;
    if (direct.sum_rate - result.sum_rate).abs() > 1e-9 * result.sum_rate.abs().max(1.0) {
        return Err(Error::Numerical(format!(
            "WDMA rate {} disagrees with its beamformer {}",
            direct.sum_rate, result.sum_rate
        )));
    }
    result.assignment = Some(assignment);
    Ok(result)
}

/// ULA channel rows for every user: `N_b` elements per BS at
/// `(D/2, D/2, A_b)`, half-wavelength spacing, scaled by `gain`.
pub fn ula_channels(geometry: &SystemGeometry, gain: f64) -> Result<EffectiveChannel> {
    let gains = geometry
        .users
        .iter()
        .map(|&u| {
            (0..BS_COUNT)
                .map(|b| {
                    let st = &geometry.stations[b];
                    let centre = [geometry.area / 2.0, geometry.area / 2.0, st.height];
                    let row = ula_channel(centre, st.waveguides.len(), geometry.wavelength / 2.0, u, geometry.wavelength, geometry.alpha)?;
                    Ok(row.into_iter().map(|v| v * gain).collect())
                })
                .collect::<Result<Vec<Vec<Complex64>>>>()
        })
        .collect::<Result<_>>()?;
    Ok(EffectiveChannel { gains })
}

/// Conventional CoMP with fixed ULAs; only the beamformer is optimised.
pub fn fixed_ula_optimize(geometry: &SystemGeometry, config: &BaselineConfig, seed: u64) -> Result<BaselineResult> {
    config.validate()?;
    let a = ula_channels(geometry, config.ula_gain.unwrap_or(geometry.eta))?;
    let ascent = Ascent {
        geometry,
        source: ChannelSource::Fixed(&a),
        qos_weight: config.qos_weight,
    };
    // Positions are ignored by a fixed channel; any well-shaped state will do.
    let dummy = equidistant_positions(geometry);
    let mut best: Option<(f64, BeamformingState)> = None;
    for r in 0..config.restarts {
        let mut rng = restart_rng(seed, r);
        let w0 = BeamformingState::random(geometry, 1.0, &mut rng);
        let (w, _, value) = ascent.run(w0, dummy.clone(), false, config.steps, config.step_size)?;
        if best.as_ref().map_or(true, |b| value > b.0) {
            best = Some((value, w));
        }
    }
    let (_, w) = best.expect("at least one restart");
    let report = sum_rate(&a, &w, geometry.noise_power, geometry.rate_threshold)?;
    let feasibility = Feasibility {
        power: power_check(&w, geometry.budgets()).feasible,
        spacing: true,
        range: true,
        qos: report.all_qos_met(),
    };
    Ok(BaselineResult {
        scheme: Scheme::Ula,
        sum_rate: report.sum_rate,
        per_user_rate: report.per_user_rate.clone(),
        w,
        p: None,
        assignment: None,
        report,
        feasibility,
    })
}

/// Single-user rate with each BS beamforming along its own channel at full
/// budget: `log2(1 + (Σ_b sqrt(P_b)·‖a_b‖)² / σ²)`.
pub fn matched_filter_rate(a: &EffectiveChannel, budgets: [f64; BS_COUNT], noise_power: f64) -> f64 {
    let amp: f64 = (0..BS_COUNT)
        .map(|b| budgets[b].sqrt() * a.row(0, b).iter().map(|g| g.norm_sqr()).sum::<f64>().sqrt())
        .sum();
    (1.0 + amp * amp / noise_power).log2()
}
