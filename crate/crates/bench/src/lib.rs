//! Shared fixture for the kernel benchmarks.

use pacomp_core::baselines::{equidistant_positions, project_positions};
use pacomp_core::gml::{initial_point, GmlConfig};
use pacomp_core::{build_geometry, BeamformingState, PinchingState, SystemConfig, SystemGeometry};

pub struct Fixture {
    pub geometry: SystemGeometry,
    pub w: BeamformingState,
    pub p: PinchingState,
    pub gml: GmlConfig,
}

/// Default system at `seed` with the GML starting point, positions nudged off
/// the equidistant grid so no two waveguides share phases.
pub fn fixture(seed: u64) -> Fixture {
    let geometry = build_geometry(&SystemConfig::default(), seed).expect("default system is valid");
    let gml = GmlConfig {
        seed,
        ..GmlConfig::default()
    };
    let (w, _) = initial_point(&geometry, &gml).expect("default system is valid");
    let base = equidistant_positions(&geometry);
    let p = project_positions(
        &geometry,
        &PinchingState::from_fn(&geometry, |b, n, i| base.x[b][n][i] + 0.37 * (b + 2 * n + i) as f64),
    );
    Fixture { geometry, w, p, gml }
}
