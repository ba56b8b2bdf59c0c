//! Physical layout of the two-BS pinching-antenna system.
//!
//! Waveguides run parallel to the x-axis. Waveguide `n` of BS `b` lies on the
//! line `y = y_n`, `z = A_b` and spans `x ∈ [0, D_n]`; its PAs move only along
//! that line. Users stand on the ground plane inside the service square.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{dbm_to_watts, SystemConfig};
use crate::error::{index_check, Error, Result};

pub const BS_COUNT: usize = 2;

/// End of the waveguide where the BS injects its signal.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedSide {
    /// Feed at `x = 0`.
    #[default]
    Left,
    /// Feed at `x = D`.
    Right,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveguide {
    pub y: f64,
    pub span: f64,
    pub pa_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseStation {
    pub height: f64,
    pub feed_side: FeedSide,
    /// Transmit budget P_BS (W).
    pub power_budget: f64,
    pub waveguides: Vec<Waveguide>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemGeometry {
    pub stations: [BaseStation; BS_COUNT],
    /// User positions `[x, y, 0]` (m).
    pub users: Vec<[f64; 3]>,
    /// Side of the square service area (m).
    pub area: f64,
    pub wavelength: f64,
    pub n_eff: f64,
    pub guided_wavelength: f64,
    pub min_spacing: f64,
    pub eta: f64,
    pub delta_eq: f64,
    /// Noise power σ² (W), identical for all users.
    pub noise_power: f64,
    pub rate_threshold: f64,
    /// Path-loss exponent used by the fixed-ULA benchmark.
    pub alpha: f64,
}

impl SystemGeometry {
    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn waveguide_count(&self, bs: usize) -> usize {
        self.stations[bs].waveguides.len()
    }

    pub fn budgets(&self) -> [f64; BS_COUNT] {
        [self.stations[0].power_budget, self.stations[1].power_budget]
    }

    /// In-waveguide distance from the feed point to a PA at `x`.
    pub fn feed_distance(&self, bs: usize, waveguide: usize, x: f64) -> f64 {
        let station = &self.stations[bs];
        match station.feed_side {
            FeedSide::Left => x,
            FeedSide::Right => station.waveguides[waveguide].span - x,
        }
    }

    /// Every waveguide carries the same number of PAs.
    pub fn uniform_pa_count(&self) -> Option<usize> {
        let mut counts = self
            .stations
            .iter()
            .flat_map(|s| s.waveguides.iter().map(|w| w.pa_count));
        let first = counts.next()?;
        counts.all(|c| c == first).then_some(first)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.users.is_empty() {
            return bad("at least one user is required".into());
        }
        if !(self.wavelength > 0.0) {
            return bad(format!("wavelength must be positive, got {}", self.wavelength));
        }
        if !(self.n_eff >= 1.0) {
            return bad(format!("n_eff must be at least 1, got {}", self.n_eff));
        }
        if !(self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.noise_power > 0.0) {
            return bad(format!("noise power must be positive, got {}", self.noise_power));
        }
        if !(self.min_spacing >= 0.0) {
            return bad(format!("min_spacing must be non-negative, got {}", self.min_spacing));
        }
        if !(self.area > 0.0) {
            return bad(format!("service area must be positive, got {}", self.area));
        }
        for (b, s) in self.stations.iter().enumerate() {
            if !(s.height > 0.0) {
                return bad(format!("BS {b} height must be positive, got {}", s.height));
            }
            if !(s.power_budget > 0.0) {
                return bad(format!("BS {b} power budget must be positive"));
            }
            if s.waveguides.is_empty() {
                return bad(format!("BS {b} needs at least one waveguide"));
            }
            for (n, w) in s.waveguides.iter().enumerate() {
                if !(w.span > 0.0) {
                    return bad(format!("BS {b} waveguide {n}: span must be positive, got {}", w.span));
                }
                if w.pa_count == 0 {
                    return bad(format!("BS {b} waveguide {n}: at least one PA is required"));
                }
                let max_delta = 1.0 / w.pa_count as f64;
                if !(self.delta_eq > 0.0 && self.delta_eq <= max_delta * (1.0 + 1e-12)) {
                    return bad(format!(
                        "delta_eq {} outside (0, 1/{}]",
                        self.delta_eq, w.pa_count
                    ));
                }
                if (w.pa_count - 1) as f64 * self.min_spacing > w.span {
                    return bad(format!(
                        "BS {b} waveguide {n}: {} PAs cannot keep {} m spacing within {} m",
                        w.pa_count, self.min_spacing, w.span
                    ));
                }
            }
        }
        for (k, u) in self.users.iter().enumerate() {
            let inside = (0.0..=self.area).contains(&u[0]) && (0.0..=self.area).contains(&u[1]);
            if u[2] != 0.0 || !inside {
                return bad(format!("user {k} at {u:?} is outside the service area"));
            }
        }
        Ok(())
    }
}

/// Builds and validates the layout described by `config`; users are drawn
/// uniformly over the service square from `seed` unless given explicitly.
pub fn build_geometry(config: &SystemConfig, seed: u64) -> Result<SystemGeometry> {
    let area = config.area.unwrap_or(config.span);
    if config.users == 0 && config.user_positions.is_none() {
        return Err(Error::Config("at least one user is required".into()));
    }
    if config.pas_per_waveguide == 0 {
        return Err(Error::Config("pas_per_waveguide must be at least 1".into()));
    }
    let delta_eq = config
        .delta_eq
        .unwrap_or(1.0 / config.pas_per_waveguide as f64);

    let stations = [0, 1].map(|b| {
        let count = config.waveguides_per_bs[b];
        let ys: Vec<f64> = match &config.y_offsets {
            Some(offsets) => offsets[b].clone(),
            None => (1..=count)
                .map(|i| i as f64 * area / (count + 1) as f64)
                .collect(),
        };
        BaseStation {
            height: config.heights[b],
            feed_side: config.feed_side[b],
            power_budget: dbm_to_watts(config.power_dbm),
            waveguides: ys
                .into_iter()
                .map(|y| Waveguide {
                    y,
                    span: config.span,
                    pa_count: config.pas_per_waveguide,
                })
                .collect(),
        }
    });
    for (b, s) in stations.iter().enumerate() {
        if s.waveguides.len() != config.waveguides_per_bs[b] {
            return Err(Error::Config(format!(
                "BS {b}: {} y-offsets for {} waveguides",
                s.waveguides.len(),
                config.waveguides_per_bs[b]
            )));
        }
    }

    let users = match &config.user_positions {
        Some(p) => p.iter().map(|&[x, y]| [x, y, 0.0]).collect(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..config.users)
                .map(|_| [rng.gen_range(0.0..=area), rng.gen_range(0.0..=area), 0.0])
                .collect()
        }
    };

    let geometry = SystemGeometry {
        stations,
        users,
        area,
        wavelength: config.wavelength,
        n_eff: config.n_eff,
        guided_wavelength: config.wavelength / config.n_eff,
        min_spacing: config.min_spacing.unwrap_or(config.wavelength / 2.0),
        eta: config
            .eta
            .unwrap_or(config.wavelength / (4.0 * std::f64::consts::PI)),
        delta_eq,
        noise_power: config.noise_power_watts(),
        rate_threshold: config.rate_threshold,
        alpha: config.alpha,
    };
    geometry.validate()?;
    Ok(geometry)
}

/// PA x-coordinates, indexed `[bs][waveguide][pa]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinchingState {
    pub x: Vec<Vec<Vec<f64>>>,
}

impl PinchingState {
    pub fn from_fn(geometry: &SystemGeometry, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let x = geometry
            .stations
            .iter()
            .enumerate()
            .map(|(b, s)| {
                s.waveguides
                    .iter()
                    .enumerate()
                    .map(|(n, w)| (0..w.pa_count).map(|p| f(b, n, p)).collect())
                    .collect()
            })
            .collect();
        PinchingState { x }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.x.iter().flatten().flatten().copied().collect()
    }

    /// Inverse of [`PinchingState::flatten`] for a state of the same shape.
    pub fn with_flat(&self, flat: &[f64]) -> Self {
        let mut it = flat.iter().copied();
        let x = self
            .x
            .iter()
            .map(|bs| {
                bs.iter()
                    .map(|wg| wg.iter().map(|_| it.next().expect("flat length")).collect())
                    .collect()
            })
            .collect();
        PinchingState { x }
    }

    pub fn len(&self) -> usize {
        self.x.iter().flatten().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matches(&self, geometry: &SystemGeometry) -> bool {
        self.x.len() == BS_COUNT
            && self.x.iter().zip(&geometry.stations).all(|(xs, s)| {
                xs.len() == s.waveguides.len()
                    && xs.iter().zip(&s.waveguides).all(|(v, w)| v.len() == w.pa_count)
            })
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().flatten().flatten().all(|v| v.is_finite())
    }
}

/// `[x, y_n, A_b]` of one PA.
pub fn pa_coordinates(
    geometry: &SystemGeometry,
    state: &PinchingState,
    bs: usize,
    waveguide: usize,
    pa: usize,
) -> Result<[f64; 3]> {
    index_check("BS", bs, BS_COUNT)?;
    let station = &geometry.stations[bs];
    index_check("waveguide", waveguide, station.waveguides.len())?;
    let xs = state
        .x
        .get(bs)
        .and_then(|w| w.get(waveguide))
        .ok_or_else(|| Error::Dimension("pinching state does not match geometry".into()))?;
    index_check("PA", pa, xs.len())?;
    Ok([xs[pa], station.waveguides[waveguide].y, station.height])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpacingViolation {
    pub bs: usize,
    pub waveguide: usize,
    pub p: usize,
    pub q: usize,
    /// `DS − |x_p − x_q| > 0` (m).
    pub deficit: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangeViolation {
    pub bs: usize,
    pub waveguide: usize,
    pub pa: usize,
    /// Distance outside `[0, D]` (m).
    pub overshoot: f64,
}

/// Pairs `p < q` on one waveguide closer than the minimum spacing.
pub fn spacing_violations(geometry: &SystemGeometry, state: &PinchingState) -> Vec<SpacingViolation> {
    let ds = geometry.min_spacing;
    let mut out = Vec::new();
    for (b, bs) in state.x.iter().enumerate() {
        for (n, xs) in bs.iter().enumerate() {
            for p in 0..xs.len() {
                for q in p + 1..xs.len() {
                    let gap = (xs[p] - xs[q]).abs();
                    if gap < ds {
                        out.push(SpacingViolation {
                            bs: b,
                            waveguide: n,
                            p,
                            q,
                            deficit: ds - gap,
                        });
                    }
                }
            }
        }
    }
    out
}

/// PAs outside the closed interval `[0, D]` of their waveguide.
pub fn range_violations(geometry: &SystemGeometry, state: &PinchingState) -> Vec<RangeViolation> {
    let mut out = Vec::new();
    for (b, bs) in state.x.iter().enumerate() {
        for (n, xs) in bs.iter().enumerate() {
            let span = geometry.stations[b].waveguides[n].span;
            for (p, &x) in xs.iter().enumerate() {
                let overshoot = if x < 0.0 {
                    -x
                } else if x > span {
                    x - span
                } else {
                    continue;
                };
                out.push(RangeViolation {
                    bs: b,
                    waveguide: n,
                    pa: p,
                    overshoot,
                });
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn table1() -> SystemGeometry {
        build_geometry(&SystemConfig::default(), 42).unwrap()
    }

    fn single_waveguide_state(xs: Vec<f64>) -> (SystemGeometry, PinchingState) {
        let config = SystemConfig {
            waveguides_per_bs: [1, 1],
            pas_per_waveguide: xs.len(),
            ..SystemConfig::default()
        };
        let g = build_geometry(&config, 1).unwrap();
        let s = PinchingState {
            x: vec![vec![xs.clone()], vec![xs]],
        };
        (g, s)
    }

    #[test]
    fn table1_geometry() {
        let g = table1();
        assert_eq!(g.user_count(), 2);
        assert_eq!(g.waveguide_count(0), 2);
        assert_eq!(g.stations[0].waveguides[0].pa_count, 4);
        assert_eq!(g.stations[0].height, 10.0);
        assert_eq!(g.stations[1].height, 15.0);
        assert!((g.stations[0].power_budget - 0.0630957344480193).abs() < 1e-15);
        assert!((g.guided_wavelength - 0.01 / 1.4).abs() < 1e-18);
        assert_eq!(g.min_spacing, 0.005);
        assert_eq!(g.delta_eq, 0.25);
        let ys: Vec<f64> = g.stations[1].waveguides.iter().map(|w| w.y).collect();
        assert!((ys[0] - 80.0 / 3.0).abs() < 1e-12 && (ys[1] - 160.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_configs() {
        let c = SystemConfig {
            delta_eq: Some(0.3),
            ..SystemConfig::default()
        };
        assert!(matches!(build_geometry(&c, 1), Err(Error::Config(_))));
        let c = SystemConfig {
            span: 0.0,
            ..SystemConfig::default()
        };
        assert!(build_geometry(&c, 1).is_err());
        let c = SystemConfig {
            users: 0,
            ..SystemConfig::default()
        };
        assert!(build_geometry(&c, 1).is_err());
    }

    #[test]
    fn user_sampling_is_seeded() {
        let a = build_geometry(&SystemConfig::default(), 42).unwrap();
        let b = build_geometry(&SystemConfig::default(), 42).unwrap();
        let c = build_geometry(&SystemConfig::default(), 43).unwrap();
        assert_eq!(a.users, b.users);
        assert_ne!(a.users, c.users);
    }

    #[test]
    fn pa_coordinate_layout() {
        let config = SystemConfig {
            y_offsets: Some([vec![20.0, 60.0], vec![20.0, 60.0]]),
            ..SystemConfig::default()
        };
        let g = build_geometry(&config, 1).unwrap();
        let mut s = PinchingState::from_fn(&g, |_, _, _| 0.0);
        s.x[0][0][1] = 10.0;
        assert_eq!(pa_coordinates(&g, &s, 0, 0, 1).unwrap(), [10.0, 20.0, 10.0]);
        assert_eq!(pa_coordinates(&g, &s, 0, 1, 0).unwrap(), [0.0, 60.0, 10.0]);
        assert_eq!(pa_coordinates(&g, &s, 1, 0, 3).unwrap()[2], 15.0);
        assert!(matches!(
            pa_coordinates(&g, &s, 0, 2, 0),
            Err(Error::Index { what: "waveguide", .. })
        ));
        assert!(pa_coordinates(&g, &s, 2, 0, 0).is_err());
        assert!(pa_coordinates(&g, &s, 0, 0, 4).is_err());
    }

    #[test]
    fn spacing_examples() {
        let (g, s) = single_waveguide_state(vec![1.0, 1.0]);
        let v = spacing_violations(&g, &s);
        assert_eq!(v.len(), 2);
        assert!((v[0].deficit - 0.005).abs() < 1e-15);

        let (g, s) = single_waveguide_state(vec![10.0, 20.0, 30.0, 40.0]);
        assert!(spacing_violations(&g, &s).is_empty());

        let (g, s) = single_waveguide_state(vec![10.0, 10.003]);
        let v = spacing_violations(&g, &s);
        let expected = 0.005 - (10.003_f64 - 10.0).abs();
        assert!((v[0].deficit - expected).abs() < 1e-15);
        assert!((v[0].deficit - 0.002).abs() < 1e-12);
    }

    #[test]
    fn range_examples() {
        let (g, s) = single_waveguide_state(vec![-0.5]);
        assert_eq!(range_violations(&g, &s)[0].overshoot, 0.5);
        let (g, s) = single_waveguide_state(vec![80.0]);
        assert!(range_violations(&g, &s).is_empty());
        let (g, s) = single_waveguide_state(vec![81.2]);
        assert!((range_violations(&g, &s)[0].overshoot - 1.2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn pa_moves_only_along_x(x in -10.0f64..90.0, n in 0usize..2, p in 0usize..4) {
            let g = table1();
            let mut s = PinchingState::from_fn(&g, |_, _, _| 5.0);
            let before = pa_coordinates(&g, &s, 1, n, p).unwrap();
            s.x[1][n][p] = x;
            let after = pa_coordinates(&g, &s, 1, n, p).unwrap();
            prop_assert_eq!(after[0], x);
            prop_assert_eq!(&before[1..], &after[1..]);
        }

        #[test]
        fn spacing_ignores_pa_order(mut xs in prop::collection::vec(0.0f64..0.05, 2..6), seed in any::<u64>()) {
            let (g, s) = single_waveguide_state(xs.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..xs.len()).rev() {
                xs.swap(i, rng.gen_range(0..=i));
            }
            let (_, t) = single_waveguide_state(xs);
            let mut a: Vec<f64> = spacing_violations(&g, &s).iter().map(|v| v.deficit).collect();
            let mut b: Vec<f64> = spacing_violations(&g, &t).iter().map(|v| v.deficit).collect();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn equidistant_layouts_are_feasible(pas in 1usize..12) {
            let config = SystemConfig { pas_per_waveguide: pas, ..SystemConfig::default() };
            let g = build_geometry(&config, 3).unwrap();
            let s = PinchingState::from_fn(&g, |_, _, p| (p + 1) as f64 * 80.0 / (pas + 1) as f64);
            prop_assert!(spacing_violations(&g, &s).is_empty());
            prop_assert!(range_violations(&g, &s).is_empty());
        }
    }
}
