use criterion::{black_box, criterion_group, criterion_main, Criterion};
use pacomp_bench::fixture;
use pacomp_core::autodiff::Tape;
use pacomp_core::baselines::{pga_oracle, BaselineConfig};
use pacomp_core::channel::effective_channels;
use pacomp_core::gml::{init_networks, outer_iteration_on_tape, GmlConfig};
use pacomp_core::objective::{rate_gradients, TapeState};
use pacomp_core::rate::sum_rate;

fn channel_and_rate(c: &mut Criterion) {
    let f = fixture(1);
    let g = &f.geometry;
    c.bench_function("effective_channels", |b| {
        b.iter(|| effective_channels(g, black_box(&f.p)).unwrap())
    });
    let a = effective_channels(g, &f.p).unwrap();
    c.bench_function("sum_rate", |b| {
        b.iter(|| sum_rate(&a, black_box(&f.w), g.noise_power, g.rate_threshold).unwrap())
    });
    c.bench_function("rate_gradients", |b| {
        b.iter(|| rate_gradients(g, black_box(&f.w), black_box(&f.p)).unwrap())
    });
}

fn gml_outer_iteration(c: &mut Criterion) {
    let f = fixture(1);
    let mut group = c.benchmark_group("outer_iteration");
    for n_i in [1, 10] {
        let config = GmlConfig {
            inner_iterations: n_i,
            ..f.gml.clone()
        };
        let nets = init_networks(&f.geometry, &config).unwrap();
        group.bench_function(format!("forward_backward_ni{n_i}"), |b| {
            let mut tape = Tape::new();
            b.iter(|| {
                tape.clear();
                let bvn = nets.bvn.record(&mut tape);
                let ppn = nets.ppn.record(&mut tape);
                let start = TapeState::record(&mut tape, &f.w, &f.p);
                let out = outer_iteration_on_tape(&mut tape, &f.geometry, &config, &bvn, &ppn, &start, &start.x).unwrap();
                tape.backward(out.loss.total).unwrap()
            })
        });
    }
    group.finish();
}

fn pga(c: &mut Criterion) {
    let f = fixture(1);
    let config = BaselineConfig {
        restarts: 1,
        steps: 50,
        ..BaselineConfig::default()
    };
    let mut group = c.benchmark_group("pga");
    group.sample_size(10);
    group.bench_function("one_restart_50_steps", |b| {
        b.iter(|| pga_oracle(&f.geometry, &f.p, &f.w, &config, 1).unwrap())
    });
    group.finish();
}

criterion_group!(benches, channel_and_rate, gml_outer_iteration, pga);
criterion_main!(benches);
