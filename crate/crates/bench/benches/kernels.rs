use std::f64::consts::TAU;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sqamp::fit::{extract_populations, fit_state_model, model_pdown, FitInit, RabiTrace, StateModel};
use sqamp::gaussian::{apply_squeeze, coherent_amplitudes};
use sqamp::open_system::{run_sequence, EvolveOptions, NoiseParams, PulseSequence, Segment};
use sqamp::{psrsb_exact_pdown, FockSpace, MotionalState, SqueezeParam, StateVector, C64};

fn gaussian_ops(c: &mut Criterion) {
    let space = FockSpace::new(256).unwrap();
    let vac = MotionalState::vacuum(space);
    c.bench_function("apply_squeeze_n256", |b| {
        b.iter(|| apply_squeeze(black_box(SqueezeParam::new(2.0, 0.3)), vac.amps()))
    });
    c.bench_function("coherent_amplitudes_n256", |b| {
        b.iter(|| coherent_amplitudes(black_box(C64::new(1.5, 0.5)), 256))
    });
    let space = FockSpace::new(64).unwrap();
    c.bench_function("psrsb_exact_pdown_n64", |b| {
        b.iter(|| psrsb_exact_pdown(black_box(C64::new(0.3, 0.1)), 0.4, space).unwrap())
    });
}

fn open_system(c: &mut Criterion) {
    let g = TAU * 50.2e3;
    let seq = PulseSequence::new(vec![
        Segment::squeeze(g, 0.0, 1e-6).unwrap(),
        Segment::displace(C64::new(0.01, 0.0), 1e-6).unwrap(),
        Segment::squeeze(g, std::f64::consts::PI, 1e-6).unwrap(),
    ]);
    let vac = MotionalState::vacuum(FockSpace::new(32).unwrap());
    let opts = EvolveOptions {
        check_convergence: false,
        ..EvolveOptions::default()
    };
    let mut group = c.benchmark_group("lindblad");
    group.sample_size(10);
    group.bench_function("amplify_3us_n32", |b| {
        b.iter(|| run_sequence(&seq, NoiseParams::default(), vac.clone(), &opts).unwrap())
    });
    group.finish();
}

fn fitting(c: &mut Criterion) {
    let omega = TAU * 1.1e3;
    let times: Vec<f64> = (0..120).map(|k| k as f64 * 5e-6).collect();
    let truth = [0.6, omega, 50.0];
    let trace = RabiTrace::new(times.clone(), model_pdown(StateModel::Coherent, &truth, &times), 300).unwrap();
    let mut init = FitInit::new(omega * 1.05, 40.0);
    init.alpha = Some(0.5);
    let mut group = c.benchmark_group("fit");
    group.sample_size(20);
    group.bench_function("coherent_multistart", |b| {
        b.iter(|| fit_state_model(&trace, StateModel::Coherent, &init).unwrap())
    });
    group.bench_function("extract_populations_nmax8", |b| {
        b.iter(|| extract_populations(&trace, omega, 50.0, 8).unwrap())
    });
    group.finish();
}

criterion_group!(benches, gaussian_ops, open_system, fitting);
criterion_main!(benches);
