//! Experiment drivers behind the command-line tool: convergence traces,
//! power and threshold sweeps, single training runs and re-evaluation of
//! stored solutions. Every function returns its CSV or JSON as a string so
//! the output is byte-for-byte reproducible.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    equidistant_baseline, equidistant_positions, fixed_ula_optimize, pga_oracle, ula_channels, wdma_baseline, BaselineResult,
    Feasibility, Scheme,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::geometry::{build_geometry, range_violations, spacing_violations, PinchingState, SystemGeometry};
use crate::gml::{initial_point, meta_loss, train, train_with, GmlConfig, TraceRow, TrainResult};
use crate::nets::NetworkDocument;
use crate::channel::effective_channels;
use crate::rate::{power_check, sum_rate, BeamformingState, RateReport, WdmaAssignment};

/// `v` with 12 significant digits: positional notation for moderate
/// magnitudes, scientific otherwise; trailing zeros trimmed.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.11e}")
    }
}

fn instance(config: &ExperimentConfig, seed: u64) -> Result<SystemGeometry> {
    build_geometry(&config.system, seed)
}

fn gml_for(config: &ExperimentConfig, seed: u64) -> GmlConfig {
    GmlConfig {
        seed,
        ..config.gml.clone()
    }
}

/// Output of [`run_convergence`].
pub struct Convergence {
    pub csv: String,
    pub train: TrainResult,
    pub oracle: BaselineResult,
}

/// One epoch of training on the instance drawn from `experiment.seed`,
/// followed by a reference row from the projected-gradient oracle.
pub fn run_convergence(config: &ExperimentConfig) -> Result<Convergence> {
    run_convergence_with(config, |_| {})
}

pub fn run_convergence_with(config: &ExperimentConfig, on_row: impl FnMut(&TraceRow)) -> Result<Convergence> {
    config.validate()?;
    let seed = config.experiment.seed;
    let geometry = instance(config, seed)?;
    let gml = GmlConfig {
        epochs: 1,
        ..gml_for(config, seed)
    };
    let train = train_with(&geometry, &gml, on_row)?;
    let (w0, p0) = initial_point(&geometry, &gml)?;
    let oracle = pga_oracle(&geometry, &p0, &w0, &config.baselines, seed)?;

    let mut csv = String::from("outer_iteration,sum_rate,rate_loss,threshold_loss,spacing_loss,range_loss,best_so_far\n");
    for row in &train.trace {
        let l = &row.loss;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            row.outer_iteration,
            format_float(row.sum_rate),
            format_float(l.rate_loss),
            format_float(l.threshold_loss),
            format_float(l.spacing_loss),
            format_float(l.range_loss),
            format_float(row.best_so_far)
        );
    }
    let p = oracle.p.as_ref().expect("oracle returns positions");
    let l = meta_loss(&geometry, &oracle.w, p, gml.zeta1, gml.zeta2, gml.penalty)?;
    let _ = writeln!(
        csv,
        "oracle,{},{},{},{},{},{}",
        format_float(oracle.sum_rate),
        format_float(l.rate_loss),
        format_float(l.threshold_loss),
        format_float(l.spacing_loss),
        format_float(l.range_loss),
        format_float(oracle.sum_rate)
    );
    Ok(Convergence { csv, train, oracle })
}

pub const SWEEP_SCHEMES: [Scheme; 4] = [Scheme::Gml, Scheme::Equidistant, Scheme::Wdma, Scheme::Ula];

/// One scheme's outcome on one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemeOutcome {
    pub scheme: Scheme,
    pub seed: u64,
    pub sum_rate: f64,
    pub feasibility: Feasibility,
}

/// Runs every sweep scheme on one instance.
pub fn run_schemes(config: &ExperimentConfig, seed: u64) -> Result<Vec<SchemeOutcome>> {
    let geometry = instance(config, seed)?;
    let mut out = Vec::with_capacity(SWEEP_SCHEMES.len());
    for scheme in SWEEP_SCHEMES {
        let (sum_rate, feasibility) = match scheme {
            Scheme::Gml => {
                let t = train(&geometry, &gml_for(config, seed))?;
                let f = crate::baselines::assess(&geometry, &t.best_w, &t.best_p)?.1;
                (t.best_sum_rate, f)
            }
            Scheme::Equidistant => {
                let r = equidistant_baseline(&geometry, &config.baselines, seed)?;
                (r.sum_rate, r.feasibility)
            }
            Scheme::Wdma => {
                let r = wdma_baseline(&geometry, &equidistant_positions(&geometry))?;
                (r.sum_rate, r.feasibility)
            }
            Scheme::Ula => {
                let r = fixed_ula_optimize(&geometry, &config.baselines, seed)?;
                (r.sum_rate, r.feasibility)
            }
            Scheme::Pga => unreachable!("not part of the sweeps"),
        };
        out.push(SchemeOutcome {
            scheme,
            seed,
            sum_rate,
            feasibility,
        });
    }
    Ok(out)
}

/// Seed-averaged result of one scheme at one grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub grid: f64,
    pub scheme: Scheme,
    pub sum_rate: f64,
    pub infeasible_fraction: f64,
}

fn sweep(
    config: &ExperimentConfig,
    grid: &[f64],
    apply: impl Fn(&mut ExperimentConfig, f64),
    mut progress: impl FnMut(f64, u64),
) -> Result<Vec<SweepPoint>> {
    config.validate()?;
    let mut acc: BTreeMap<(usize, Scheme), (f64, usize, usize)> = BTreeMap::new();
    for (gi, &value) in grid.iter().enumerate() {
        let mut c = config.clone();
        apply(&mut c, value);
        for &seed in &config.experiment.seeds {
            progress(value, seed);
            for o in run_schemes(&c, seed)? {
                let e = acc.entry((gi, o.scheme)).or_insert((0.0, 0, 0));
                e.0 += o.sum_rate;
                e.1 += 1;
                e.2 += !o.feasibility.qos as usize;
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|((gi, scheme), (sum, n, bad))| SweepPoint {
            grid: grid[gi],
            scheme,
            sum_rate: sum / n as f64,
            infeasible_fraction: bad as f64 / n as f64,
        })
        .collect())
}

fn sorted(mut points: Vec<SweepPoint>) -> Vec<SweepPoint> {
    points.sort_by(|a, b| a.grid.total_cmp(&b.grid).then(a.scheme.name().cmp(b.scheme.name())));
    points
}

/// Sum rate against the per-BS budget, averaged over `experiment.seeds`.
pub fn run_power_sweep(config: &ExperimentConfig, progress: impl FnMut(f64, u64)) -> Result<(String, Vec<SweepPoint>)> {
    let points = sorted(sweep(
        config,
        &config.experiment.power_grid_dbm,
        |c, v| c.system.power_dbm = v,
        progress,
    )?);
    let mut csv = String::from("power_dbm,scheme,sum_rate\n");
    for p in &points {
        let _ = writeln!(csv, "{},{},{}", format_float(p.grid), p.scheme.name(), format_float(p.sum_rate));
    }
    Ok((csv, points))
}

/// Sum rate and QoS infeasibility against the rate threshold.
pub fn run_threshold_sweep(config: &ExperimentConfig, progress: impl FnMut(f64, u64)) -> Result<(String, Vec<SweepPoint>)> {
    let points = sorted(sweep(
        config,
        &config.experiment.threshold_grid,
        |c, v| c.system.rate_threshold = v,
        progress,
    )?);
    let mut csv = String::from("r_th,scheme,sum_rate,infeasible_fraction\n");
    for p in &points {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            format_float(p.grid),
            p.scheme.name(),
            format_float(p.sum_rate),
            format_float(p.infeasible_fraction)
        );
    }
    Ok((csv, points))
}

/// Stored solution of any scheme, as written by `train` and read by
/// [`evaluate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolutionDocument {
    pub scheme: Scheme,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub sum_rate: f64,
    pub per_user_rate: Vec<f64>,
    pub w: BeamformingState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<PinchingState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment: Option<WdmaAssignment>,
    pub feasibility: Feasibility,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub networks: Option<NetworkDocument>,
}

impl SolutionDocument {
    pub fn from_train(config: &ExperimentConfig, seed: u64, geometry: &SystemGeometry, t: TrainResult) -> Result<Self> {
        let feasibility = crate::baselines::assess(geometry, &t.best_w, &t.best_p)?.1;
        Ok(SolutionDocument {
            scheme: Scheme::Gml,
            seed,
            config: config.clone(),
            sum_rate: t.best_sum_rate,
            per_user_rate: t.best_report.per_user_rate,
            w: t.best_w,
            p: Some(t.best_p),
            assignment: None,
            feasibility,
            trace: Some(t.trace),
            networks: Some(t.networks),
        })
    }

    pub fn from_baseline(config: &ExperimentConfig, seed: u64, r: BaselineResult) -> Self {
        SolutionDocument {
            scheme: r.scheme,
            seed,
            config: config.clone(),
            sum_rate: r.sum_rate,
            per_user_rate: r.per_user_rate,
            w: r.w,
            p: r.p,
            assignment: r.assignment,
            feasibility: r.feasibility,
            trace: None,
            networks: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("solution documents always serialise")
    }

    /// Parses a document; errors carry the JSON path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }
}

/// Trains on `experiment.seed` and returns the solution document.
pub fn run_train(config: &ExperimentConfig) -> Result<SolutionDocument> {
    config.validate()?;
    let seed = config.experiment.seed;
    let geometry = instance(config, seed)?;
    let t = train(&geometry, &gml_for(config, seed))?;
    SolutionDocument::from_train(config, seed, &geometry, t)
}

/// Solves `experiment.seed` with any scheme. `Pga` starts from the GML
/// initial point.
pub fn run_solve(config: &ExperimentConfig, scheme: Scheme) -> Result<SolutionDocument> {
    if scheme == Scheme::Gml {
        return run_train(config);
    }
    config.validate()?;
    let seed = config.experiment.seed;
    let geometry = instance(config, seed)?;
    let r = match scheme {
        Scheme::Equidistant => equidistant_baseline(&geometry, &config.baselines, seed)?,
        Scheme::Wdma => wdma_baseline(&geometry, &equidistant_positions(&geometry))?,
        Scheme::Ula => fixed_ula_optimize(&geometry, &config.baselines, seed)?,
        Scheme::Pga => {
            let (w0, p0) = initial_point(&geometry, &gml_for(config, seed))?;
            pga_oracle(&geometry, &p0, &w0, &config.baselines, seed)?
        }
        Scheme::Gml => unreachable!(),
    };
    Ok(SolutionDocument::from_baseline(config, seed, r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scheme: Scheme,
    pub seed: u64,
    pub sum_rate: f64,
    pub stored_sum_rate: f64,
    pub per_user_rate: Vec<f64>,
    pub per_user_sinr: Vec<f64>,
    pub power_used: [f64; 2],
    pub feasibility: Feasibility,
}

/// Recomputes rates and constraint checks of a stored solution on the
/// instance it was produced for.
pub fn evaluate(doc: &SolutionDocument) -> Result<EvaluationReport> {
    let geometry = instance(&doc.config, doc.seed)?;
    if !doc.w.matches(&geometry) {
        return Err(Error::Schema {
            path: "w".into(),
            message: "beamformer shape does not match the configured system".into(),
        });
    }
    let (report, spacing, range): (RateReport, bool, bool) = match (&doc.scheme, &doc.p) {
        (Scheme::Ula, _) => {
            let a = ula_channels(&geometry, doc.config.baselines.ula_gain.unwrap_or(geometry.eta))?;
            (sum_rate(&a, &doc.w, geometry.noise_power, geometry.rate_threshold)?, true, true)
        }
        (_, Some(p)) => {
            if !p.matches(&geometry) {
                return Err(Error::Schema {
                    path: "p".into(),
                    message: "position shape does not match the configured system".into(),
                });
            }
            let a = effective_channels(&geometry, p)?;
            (
                sum_rate(&a, &doc.w, geometry.noise_power, geometry.rate_threshold)?,
                spacing_violations(&geometry, p).is_empty(),
                range_violations(&geometry, p).is_empty(),
            )
        }
        (_, None) => {
            return Err(Error::Schema {
                path: "p".into(),
                message: "pinching solutions must store PA positions".into(),
            })
        }
    };
    let pc = power_check(&doc.w, geometry.budgets());
    Ok(EvaluationReport {
        scheme: doc.scheme,
        seed: doc.seed,
        sum_rate: report.sum_rate,
        stored_sum_rate: doc.sum_rate,
        per_user_sinr: report.per_user_sinr.clone(),
        power_used: pc.used,
        feasibility: Feasibility {
            power: pc.feasible,
            spacing,
            range,
            qos: report.all_qos_met(),
        },
        per_user_rate: report.per_user_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Scale;

    #[test]
    fn float_formatting() {
        assert_eq!(format_float(0.0), "0");
        assert_eq!(format_float(18.0), "18");
        assert_eq!(format_float(0.2), "0.2");
        assert_eq!(format_float(-31.123456789012345), "-31.123456789");
        assert_eq!(format_float(1.0 / 3.0), "0.333333333333");
        assert_eq!(format_float(1e-9), "1.00000000000e-9");
        assert_eq!(format_float(123456.0), "123456");
    }

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(Scale::Ci);
        c.gml.inner_iterations = 1;
        c.gml.outer_iterations = 3;
        c.gml.hidden = 8;
        c.baselines.restarts = 2;
        c.baselines.steps = 20;
        c
    }

    #[test]
    fn convergence_rows_and_running_best() {
        let c = tiny();
        let out = run_convergence(&c).unwrap();
        let lines: Vec<&str> = out.csv.lines().collect();
        assert_eq!(lines.len(), 1 + 3 + 1);
        assert!(lines[4].starts_with("oracle,"));
        let best: Vec<f64> = out.train.trace.iter().map(|r| r.best_so_far).collect();
        assert!(best.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn solution_round_trip_and_schema_errors() {
        let c = tiny();
        let doc = run_train(&c).unwrap();
        let back = SolutionDocument::from_json(&doc.to_json()).unwrap();
        assert_eq!(back, doc);
        let report = evaluate(&back).unwrap();
        assert!((report.sum_rate - doc.sum_rate).abs() <= 1e-12 * doc.sum_rate);

        let broken = doc.to_json().replacen("\"scheme\": \"gml\"", "\"scheme\": \"gm1\"", 1);
        match SolutionDocument::from_json(&broken) {
            Err(Error::Schema { path, .. }) => assert_eq!(path, "scheme"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }
}
