//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines reach the terminal. The
//! process fails if any criterion fails that is not listed in `KNOWN_RED`;
//! a listed criterion that starts passing is reported too.

mod common;

use std::time::Instant;

use common::{block_matrix_channel, derivative, max_rel_err, random_beams, random_positions, rel_err, plateau_derivative};
use pacomp_core::baselines::{
    assess, equidistant_baseline, equidistant_positions, fixed_ula_optimize, pga_oracle, wdma_assign, wdma_baseline,
    wdma_powers, BaselineConfig,
};
use pacomp_core::channel::effective_channels;
use pacomp_core::experiment::{
    evaluate, run_convergence, run_power_sweep, run_solve, run_threshold_sweep, SweepPoint,
};
use pacomp_core::geometry::{range_violations, spacing_violations};
use pacomp_core::gml::{epoch_loss, init_networks, initial_point, normalize_power, train, GmlConfig};
use pacomp_core::objective::rate_gradients;
use pacomp_core::rate::{power_check, sum_rate, wdma_beamforming, wdma_rate, BeamformingState};
use pacomp_core::{build_geometry, Complex64, ExperimentConfig, PinchingState, Scale, Scheme, SystemConfig, SystemGeometry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria that fail with the reference settings; see the README.
const KNOWN_RED: &[u32] = &[5, 6, 7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn c1_channel_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let config = SystemConfig {
            pas_per_waveguide: 1 + (seed % 4) as usize,
            ..SystemConfig::default()
        };
        let g = build_geometry(&config, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_positions(&g, &mut rng);
        let a = effective_channels(&g, &p).unwrap();
        for k in 0..g.user_count() {
            for b in 0..2 {
                worst = worst.max(max_rel_err(a.row(k, b), &block_matrix_channel(&g, &p, k, b)));
            }
        }
    }
    outcome(worst < 1e-12, format!("max relative error {worst:.3e} over 50 instances"))
}

fn c2_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let g = build_geometry(&SystemConfig::default(), 1000 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_positions(&g, &mut rng);
        let w = random_beams(&g, &mut rng);
        let (_, grad) = rate_gradients(&g, &w, &p).unwrap();
        let hw = 1e-6 * g.budgets()[0].sqrt();
        for b in 0..2 {
            for n in 0..w.w[b].len() {
                for k in 0..g.user_count() {
                    for part in 0..2 {
                        let f = |t: f64| {
                            let mut w2 = w.clone();
                            w2.w[b][n][k] += if part == 0 { Complex64::new(t, 0.0) } else { Complex64::new(0.0, t) };
                            common::sum_rate(&g, &p, &w2)
                        };
                        let want = derivative(f, 0.0, hw);
                        worst = worst.max(rel_err(grad.d_rate_d_w[b][n][k][part], want, 1e-12));
                    }
                }
            }
            for n in 0..p.x[b].len() {
                for i in 0..p.x[b][n].len() {
                    let f = |t: f64| {
                        let mut p2 = p.clone();
                        p2.x[b][n][i] += t;
                        common::sum_rate(&g, &p2, &w)
                    };
                    let want = derivative(f, 0.0, 1e-6);
                    worst = worst.max(rel_err(grad.d_rate_d_p[b][n][i], want, 1e-12));
                }
            }
        }
    }
    outcome(worst < 1e-5, format!("max relative error {worst:.3e} over 20 instances"))
}

fn c3_meta_gradient() -> Outcome {
    let system = SystemConfig {
        users: 1,
        waveguides_per_bs: [1, 1],
        pas_per_waveguide: 1,
        ..SystemConfig::default()
    };
    let g = build_geometry(&system, 21).unwrap();
    let gml = GmlConfig {
        inner_iterations: 1,
        outer_iterations: 1,
        epochs: 1,
        seed: 21,
        ..GmlConfig::default()
    };
    let nets = init_networks(&g, &gml).unwrap();
    let (w0, p0) = initial_point(&g, &gml).unwrap();
    let el = epoch_loss(&g, &gml, &nets.bvn, &nets.ppn, &w0, &p0).unwrap();
    let nb = nets.bvn.param_count();
    let theta: Vec<f64> = nets.bvn.flatten().into_iter().chain(nets.ppn.flatten()).collect();
    let analytic: Vec<f64> = el.grad_bvn.iter().chain(&el.grad_ppn).copied().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let i = rng.gen_range(0..theta.len());
        let f = |t: f64| {
            let mut th = theta.clone();
            th[i] += t;
            let (mut bvn, mut ppn) = (nets.bvn.clone(), nets.ppn.clone());
            bvn.set_flat(&th[..nb]).unwrap();
            ppn.set_flat(&th[nb..]).unwrap();
            epoch_loss(&g, &gml, &bvn, &ppn, &w0, &p0).unwrap().loss
        };
        worst = worst.max(rel_err(analytic[i], plateau_derivative(f, 1e-2), 1e-8));
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.3e} over 50 parameters"))
}

fn c4_power_normalisation() -> Outcome {
    let g = build_geometry(&SystemConfig::default(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for _ in 0..100 {
        let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
        let mut w = random_beams(&g, &mut rng);
        w.w.iter_mut().flatten().flatten().for_each(|v| *v *= scale);
        let before = power_check(&w, g.budgets()).used;
        let after = power_check(&normalize_power(&w, g.budgets()), g.budgets()).used;
        for b in 0..2 {
            let budget = g.budgets()[b];
            let err = if before[b] > budget {
                (after[b] - budget).abs() / budget
            } else {
                (after[b] - before[b]).abs() / budget
            };
            ok &= after[b] <= budget * (1.0 + 1e-9);
            worst = worst.max(err);
        }
    }
    outcome(ok && worst <= 1e-9, format!("max relative deviation {worst:.3e} over 100 beamformers"))
}

fn c5_optimality_ratio() -> Outcome {
    // N_e is cut from 50 to 20 so twenty instances fit in the time budget.
    let mut hits = 0;
    let mut ratios = Vec::new();
    for seed in 1..=20u64 {
        let g = build_geometry(&SystemConfig::default(), seed).unwrap();
        let gml = GmlConfig {
            inner_iterations: 10,
            outer_iterations: 200,
            epochs: 20,
            seed,
            ..GmlConfig::default()
        };
        let t = train(&g, &gml).unwrap();
        let (w0, p0) = initial_point(&g, &gml).unwrap();
        let oracle = pga_oracle(&g, &p0, &w0, &BaselineConfig::default(), seed).unwrap();
        let ratio = t.best_sum_rate / oracle.sum_rate;
        hits += (ratio >= 0.9) as usize;
        ratios.push(ratio);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        hits >= 18,
        format!("{hits}/20 instances at >= 0.90 of the oracle (mean ratio {mean:.3}, min {min:.3})"),
    )
}

fn at(points: &[SweepPoint], grid: f64, scheme: Scheme) -> &SweepPoint {
    points
        .iter()
        .find(|p| p.grid == grid && p.scheme == scheme)
        .expect("grid point present")
}

fn desk(seeds: std::ops::RangeInclusive<u64>) -> ExperimentConfig {
    let mut c = ExperimentConfig::preset(Scale::Desk);
    c.experiment.seeds = seeds.collect();
    c
}

fn c6_benchmark_ordering() -> Outcome {
    let mut c = desk(1..=10);
    c.experiment.power_grid_dbm = vec![12.0, 15.0, 18.0, 27.0, 30.0];
    let (_, pts) = run_power_sweep(&c, |_, _| {}).unwrap();
    let r = |grid, s| at(&pts, grid, s).sum_rate;
    let (gml, equi, ula) = (r(18.0, Scheme::Gml), r(18.0, Scheme::Equidistant), r(18.0, Scheme::Ula));
    let ratio = |s| (r(30.0, s) - r(27.0, s)) / (r(15.0, s) - r(12.0, s));
    let (ula_ratio, gml_ratio) = (ratio(Scheme::Ula), ratio(Scheme::Gml));
    let pass = gml >= equi && gml >= ula && ula_ratio < 0.5 && gml_ratio > ula_ratio;
    outcome(
        pass,
        format!(
            "18 dBm: gml {gml:.3}, equidistant {equi:.3}, ula {ula:.3}; high/low gain ratio ula {ula_ratio:.3}, gml {gml_ratio:.3}"
        ),
    )
}

fn c7_threshold_behaviour() -> Outcome {
    let c = desk(1..=10);
    let grid = c.experiment.threshold_grid.clone();
    let (_, pts) = run_threshold_sweep(&c, |_, _| {}).unwrap();
    let gml: Vec<f64> = grid.iter().map(|&t| at(&pts, t, Scheme::Gml).sum_rate).collect();
    let monotone = gml.windows(2).all(|w| w[1] <= w[0]);
    let first_split = grid.iter().copied().find(|&t| {
        at(&pts, t, Scheme::Ula).infeasible_fraction > 0.0 && at(&pts, t, Scheme::Gml).infeasible_fraction == 0.0
    });
    let infeasible: Vec<String> = grid
        .iter()
        .map(|&t| {
            format!(
                "{t}:{:.1}/{:.1}",
                at(&pts, t, Scheme::Gml).infeasible_fraction,
                at(&pts, t, Scheme::Ula).infeasible_fraction
            )
        })
        .collect();
    outcome(
        monotone && first_split.is_some(),
        format!(
            "gml sum rate {:?}; infeasible gml/ula {}",
            gml.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            infeasible.join(" ")
        ),
    )
}

fn feasible(
    g: &SystemGeometry,
    w: &BeamformingState,
    p: Option<&PinchingState>,
    rates: &[f64],
    claims_qos: bool,
) -> bool {
    let power = power_check(w, g.budgets()).feasible;
    let placement = p.map_or(true, |p| spacing_violations(g, p).is_empty() && range_violations(g, p).is_empty());
    let qos = !claims_qos || rates.iter().all(|&r| r >= g.rate_threshold - 1e-9);
    power && placement && qos
}

fn c8_feasibility() -> Outcome {
    let mut checked = 0;
    let mut bad = Vec::new();
    let base = ExperimentConfig::preset(Scale::Desk);
    for seed in 1..=5u64 {
        for power in [12.0, 24.0] {
            let mut c = base.clone();
            c.system.power_dbm = power;
            let g = build_geometry(&c.system, seed).unwrap();
            let t = train(&g, &GmlConfig { seed, ..c.gml.clone() }).unwrap();
            let qos = t.best_report.all_qos_met();
            let mut results = vec![(
                "gml",
                feasible(&g, &t.best_w, Some(&t.best_p), &t.best_report.per_user_rate, qos),
            )];
            let (w0, p0) = initial_point(&g, &GmlConfig { seed, ..c.gml.clone() }).unwrap();
            for r in [
                pga_oracle(&g, &p0, &w0, &c.baselines, seed).unwrap(),
                equidistant_baseline(&g, &c.baselines, seed).unwrap(),
                wdma_baseline(&g, &equidistant_positions(&g)).unwrap(),
                fixed_ula_optimize(&g, &c.baselines, seed).unwrap(),
            ] {
                let ok = feasible(&g, &r.w, r.p.as_ref(), &r.per_user_rate, r.feasibility.qos);
                let declared = r.feasibility.power && r.feasibility.spacing && r.feasibility.range;
                results.push((r.scheme.name(), ok && declared));
            }
            // recomputation from the stored pinching solution agrees with the claim
            if let Some(p) = results.first().map(|_| &t.best_p) {
                let re = assess(&g, &t.best_w, p).unwrap().0;
                results.push(("gml-recheck", (re.sum_rate - t.best_sum_rate).abs() <= 1e-12 * t.best_sum_rate.max(1.0)));
            }
            for (name, ok) in results {
                checked += 1;
                if !ok {
                    bad.push(format!("{name}@seed{seed}/{power}dBm"));
                }
            }
        }
    }
    outcome(
        bad.is_empty(),
        format!("{checked} results checked, failures: [{}]", bad.join(", ")),
    )
}

fn c9_determinism() -> Outcome {
    let mut c = ExperimentConfig::preset(Scale::Ci);
    c.experiment.seeds = vec![3, 8];
    c.experiment.seed = 3;
    let mut same = Vec::new();
    same.push(("convergence", run_convergence(&c).unwrap().csv == run_convergence(&c).unwrap().csv));
    same.push(("sweep-power", run_power_sweep(&c, |_, _| {}).unwrap().0 == run_power_sweep(&c, |_, _| {}).unwrap().0));
    same.push((
        "sweep-threshold",
        run_threshold_sweep(&c, |_, _| {}).unwrap().0 == run_threshold_sweep(&c, |_, _| {}).unwrap().0,
    ));
    for scheme in [Scheme::Gml, Scheme::Pga, Scheme::Equidistant, Scheme::Wdma, Scheme::Ula] {
        let a = run_solve(&c, scheme).unwrap();
        let b = run_solve(&c, scheme).unwrap();
        let ea = serde_json::to_string(&evaluate(&a).unwrap()).unwrap();
        let eb = serde_json::to_string(&evaluate(&b).unwrap()).unwrap();
        same.push((scheme.name(), a.to_json() == b.to_json() && ea == eb));
    }
    let differing: Vec<&str> = same.iter().filter(|(_, s)| !s).map(|(n, _)| *n).collect();
    outcome(
        differing.is_empty(),
        format!("{} outputs compared, differing: {:?}", same.len(), differing),
    )
}

fn c10_wdma() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let g = build_geometry(&SystemConfig::default(), 500 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_positions(&g, &mut rng);
        let a = effective_channels(&g, &p).unwrap();
        let assignment = wdma_assign(&g, &p).unwrap();
        let powers = wdma_powers(&g, &assignment);
        let direct = wdma_rate(&a, &assignment, &powers, g.noise_power, g.rate_threshold).unwrap();
        let w = wdma_beamforming(&a, &assignment, &powers).unwrap();
        let full = sum_rate(&a, &w, g.noise_power, g.rate_threshold).unwrap();
        worst = worst.max((direct.sum_rate - full.sum_rate).abs() / full.sum_rate.max(1.0));
    }
    outcome(worst <= 1e-12, format!("max deviation {worst:.3e} over 20 instances"))
}

fn main() {
    // `cargo test -- <filter>` passes the filter through; run everything or
    // only the criteria whose number is named.
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "channel oracle equivalence", c1_channel_oracle),
        (2, "gradient correctness", c2_gradients),
        (3, "meta-gradient correctness", c3_meta_gradient),
        (4, "power normalisation", c4_power_normalisation),
        (5, "optimality ratio", c5_optimality_ratio),
        (6, "benchmark ordering", c6_benchmark_ordering),
        (7, "threshold behaviour", c7_threshold_behaviour),
        (8, "feasibility of returned solutions", c8_feasibility),
        (9, "determinism", c9_determinism),
        (10, "WDMA consistency", c10_wdma),
    ];
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let secs = t.elapsed().as_secs_f64();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let red = KNOWN_RED.contains(&id);
        let note = match (o.pass, red) {
            (false, true) => " (known)",
            (true, true) => " (listed as known red; update KNOWN_RED)",
            _ => "",
        };
        println!("criterion {id:>2} {verdict}{note}: {name}: {} [{secs:.1}s]", o.detail);
        if o.pass == red {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected outcome for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
