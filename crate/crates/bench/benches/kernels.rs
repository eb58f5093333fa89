use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use nvsim_core::analytic::{binomial_sigma, BranchPhases};
use nvsim_core::optical::{excitation_stats, StepControl};
use nvsim_core::physics::angular;
use nvsim_core::{
    blok_coherence, fit_stretched_exp, simulate_curve, AttemptSequence, BlokParams, Delay, FieldParams, FitOptions,
    InitialNuclearState, NoiseModel, NuclearSpinParams, Observation, OpticalLevelModel, PulseEnvelope, RunSpec,
};

fn spec(trials: u64, max_n: u64) -> RunSpec {
    RunSpec {
        spin: NuclearSpinParams::direct("C2", angular(62.4e3), 9.9e-3).unwrap(),
        field: FieldParams::reference_414g(),
        seq: AttemptSequence::standard(Delay::LarmorPeriods { count: 1 }),
        noise: NoiseModel { p_mw: 1e-3, p_init: 1e-3, ..NoiseModel::pure_repump(100e-9) },
        n_attempts_grid: (1..=16).map(|k| k * max_n / 16).collect(),
        n_trials: trials,
        echo_count: 1,
        master_seed: 5,
        initial_nuclear_state: InitialNuclearState::SuperpositionX,
        intrinsic_envelope: true,
    }
}

fn monte_carlo(c: &mut Criterion) {
    let mut g = c.benchmark_group("monte_carlo");
    g.sample_size(10);
    for max_n in [1_000u64, 10_000] {
        let s = spec(256, max_n);
        g.throughput(Throughput::Elements(s.attempt_cost()));
        g.bench_with_input(BenchmarkId::from_parameter(max_n), &s, |b, s| b.iter(|| simulate_curve(black_box(s)).unwrap()));
    }
    g.finish();
}

fn analytic(c: &mut Criterion) {
    let p = BlokParams { tau: 52e-9, delta_omega: angular(376.5e3), p1: 0.5, n: 263.0 };
    c.bench_function("blok_coherence", |b| b.iter(|| blok_coherence(black_box(&p))));
    let ph = BranchPhases { phi0: 0.0, phi_plus: 0.3, phi_minus: -0.3 };
    c.bench_function("binomial_sigma_n700", |b| b.iter(|| binomial_sigma(black_box(700), 7.1e-4, &ph, 1.0)));
}

fn fitting(c: &mut Criterion) {
    let obs: Vec<Observation> = (1..=30)
        .map(|k| {
            let n = k as f64 * 50.0;
            Observation::with_sigma(n, 0.9 * (-(n / 600.0f64).powf(1.4)).exp(), 0.01)
        })
        .collect();
    c.bench_function("fit_stretched_exp", |b| b.iter(|| fit_stretched_exp(black_box(&obs), None, &FitOptions::default()).unwrap()));
}

fn optical(c: &mut Criterion) {
    let model = OpticalLevelModel::reference();
    let pump = PulseEnvelope::reference_pi();
    let mut g = c.benchmark_group("optical");
    g.sample_size(10);
    g.throughput(Throughput::Elements(2_000));
    g.bench_function("pump_2000", |b| b.iter(|| excitation_stats(&model, &pump, 2_000, 3, StepControl::default()).unwrap()));
    g.finish();
}

criterion_group!(benches, monte_carlo, analytic, fitting, optical);
criterion_main!(benches);
