//! Experiment configuration.
//!
//! A configuration is one TOML document with `[system]`, `[gml]`,
//! `[baselines]` and `[experiment]` sections. Loading starts from the preset
//! for the selected [`Scale`], deep-merges the file on top and then applies
//! `key=value` overrides (dotted keys, TOML literal values).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineConfig;
use crate::error::{Error, Result};
use crate::geometry::FeedSide;
use crate::gml::GmlConfig;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(watts: f64) -> f64 {
    10.0 * watts.log10() + 30.0
}

/// Iteration budgets: `ci` for fast tests, `desk` for laptop runs, `paper`
/// for the full-size settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Ci,
    #[default]
    Desk,
    Paper,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ci" => Ok(Scale::Ci),
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::Config(format!(
                "unknown scale `{other}` (expected ci, desk or paper)"
            ))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Ci => "ci",
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        })
    }
}

/// Physical layout and link parameters. Powers and noise are in dBm here and
/// converted to watts when the geometry is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    /// Waveguide span D (m), identical for every waveguide.
    pub span: f64,
    /// Side of the square service area (m); defaults to `span`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    pub waveguides_per_bs: [usize; 2],
    pub pas_per_waveguide: usize,
    pub heights: [f64; 2],
    /// Per-BS waveguide y-coordinates; defaults to `i·D/(N_b+1)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y_offsets: Option<[Vec<f64>; 2]>,
    pub feed_side: [FeedSide; 2],
    pub wavelength: f64,
    pub n_eff: f64,
    /// Minimum PA spacing DS (m); defaults to λ/2.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_spacing: Option<f64>,
    /// Free-space gain constant η (m); defaults to λ/(4π).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Equal-power ratio; defaults to 1/P_n.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_eq: Option<f64>,
    pub noise_density_dbm_hz: f64,
    pub bandwidth_hz: f64,
    /// Per-BS transmit budget (dBm), applied to both BSs.
    pub power_dbm: f64,
    pub rate_threshold: f64,
    /// Path-loss exponent of the fixed-ULA benchmark.
    pub alpha: f64,
    pub users: usize,
    /// Explicit user (x, y) positions; sampled uniformly when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_positions: Option<Vec<[f64; 2]>>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            span: 80.0,
            area: None,
            waveguides_per_bs: [2, 2],
            pas_per_waveguide: 4,
            heights: [10.0, 15.0],
            y_offsets: None,
            feed_side: [FeedSide::Left, FeedSide::Left],
            wavelength: 0.01,
            n_eff: 1.4,
            min_spacing: None,
            eta: None,
            delta_eq: None,
            noise_density_dbm_hz: -173.0,
            bandwidth_hz: 1e6,
            power_dbm: 18.0,
            rate_threshold: 0.2,
            alpha: 3.9,
            users: 2,
            user_positions: None,
        }
    }
}

impl SystemConfig {
    pub fn noise_power_watts(&self) -> f64 {
        dbm_to_watts(self.noise_density_dbm_hz + 10.0 * self.bandwidth_hz.log10())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    Convergence,
    SweepPower,
    SweepThreshold,
    Evaluate,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub kind: ExperimentKind,
    /// Seed for single-instance runs (convergence, train).
    pub seed: u64,
    /// Seeds averaged over by the sweeps.
    pub seeds: Vec<u64>,
    pub power_grid_dbm: Vec<f64>,
    pub threshold_grid: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        ExperimentSettings {
            kind: ExperimentKind::Convergence,
            seed: 1,
            seeds: (1..=10).collect(),
            power_grid_dbm: vec![12.0, 15.0, 18.0, 21.0, 24.0, 27.0, 30.0],
            threshold_grid: vec![0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4],
            out: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scale: Scale,
    pub system: SystemConfig,
    pub gml: GmlConfig,
    pub baselines: BaselineConfig,
    pub experiment: ExperimentSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::preset(Scale::Desk)
    }
}

impl ExperimentConfig {
    /// Defaults for `scale`; the system section always matches the reference
    /// simulation table.
    pub fn preset(scale: Scale) -> Self {
        let mut gml = GmlConfig::default();
        let mut baselines = BaselineConfig::default();
        let mut experiment = ExperimentSettings::default();
        match scale {
            Scale::Ci => {
                gml.inner_iterations = 3;
                gml.outer_iterations = 20;
                gml.epochs = 5;
                baselines.restarts = 4;
                baselines.steps = 100;
                experiment.seeds = vec![1, 2];
            }
            Scale::Desk => {
                gml.inner_iterations = 5;
                gml.outer_iterations = 40;
                gml.epochs = 10;
                baselines.restarts = 16;
                baselines.steps = 300;
            }
            Scale::Paper => {
                gml.inner_iterations = 10;
                gml.outer_iterations = 200;
                gml.epochs = 50;
                baselines.restarts = 16;
                baselines.steps = 500;
            }
        }
        ExperimentConfig {
            scale,
            system: SystemConfig::default(),
            gml,
            baselines,
            experiment,
        }
    }

    /// Parses a TOML document on top of the scale preset.
    ///
    /// The scale comes from `scale_override`, else from the document's
    /// top-level `scale` key, else [`Scale::Desk`].
    pub fn from_toml_str(text: &str, scale_override: Option<Scale>, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let scale = match scale_override {
            Some(s) => s,
            None => match doc.get("scale") {
                Some(toml::Value::String(s)) => s.parse()?,
                Some(other) => return Err(Error::Config(format!("scale must be a string, got {other}"))),
                None => Scale::default(),
            },
        };
        doc.insert("scale".into(), toml::Value::String(scale.to_string()));

        let base = toml::Value::try_from(Self::preset(scale)).map_err(|e| Error::Config(e.to_string()))?;
        let mut merged = match base {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        deep_merge(&mut merged, doc);
        let config: ExperimentConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.gml.validate()?;
        self.baselines.validate()?;
        let e = &self.experiment;
        for (name, grid) in [
            ("power_grid_dbm", &e.power_grid_dbm),
            ("threshold_grid", &e.threshold_grid),
        ] {
            if grid.is_empty() {
                return Err(Error::Config(format!("experiment.{name} must not be empty")));
            }
            if grid.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config(format!("experiment.{name} must be strictly ascending")));
            }
        }
        if e.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds must not be empty".into()));
        }
        Ok(())
    }
}

fn deep_merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => deep_merge(dst, src),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal
/// and falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for part in path {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{key}`: `{part}` is not a section"))),
        };
    }
    table.insert(last.to_string(), value);
    Ok(())
}
