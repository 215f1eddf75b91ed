use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mcm_core::capture::{CornerMode, EnvelopeConfig, GunEnvelope};
use mcm_core::control::{double_integrator_a, propagate_reference, MpcConfig, MpcProblem, MpcSolver};
use mcm_core::estimation::{stt_step, EstimatorState, SharePacket, SttParams};
use mcm_core::netdyn::{build_net, integrate_net, launch_initial_state, IntegratorConfig, LaunchParams, NetMaterials, NetParams};
use mcm_core::world::Pose;
use nalgebra::{DVector, Vector3};

fn capture(c: &mut Criterion) {
    let gun = Pose::identity();
    let env = GunEnvelope::build(&gun, &LaunchParams::default(), &EnvelopeConfig::default(), CornerMode::Tethered).unwrap();
    let p = Vector3::new(4.0, 0.3, -0.2);
    c.bench_function("is_capturable", |b| b.iter(|| env.is_capturable(black_box(&p), &gun)));

    let topo = build_net(19, &NetMaterials::default()).unwrap();
    let s0 = launch_initial_state(&gun, &LaunchParams::default(), &topo).unwrap();
    let cfg = IntegratorConfig { duration: 0.3, ..IntegratorConfig::default() };
    let mut g = c.benchmark_group("net");
    g.sample_size(10);
    g.bench_function("rollout_0.3s", |b| b.iter(|| integrate_net(&s0, &topo, &NetParams::default(), &cfg).unwrap()));
    g.finish();
}

fn estimation(c: &mut Criterion) {
    let params = SttParams::default();
    let state = EstimatorState::at(&Vector3::new(10.0, 0.0, 10.0));
    let packet = |i: usize, s: Vector3<f64>| SharePacket {
        sender: i,
        step: 0,
        bearing: Some((Vector3::new(10.0, 0.0, 10.0) - s).normalize()),
        sensor_pos: s,
        prior: Some(state.x_hat),
    };
    let own = packet(0, Vector3::new(13.0, 0.0, 13.0));
    let nb = [packet(1, Vector3::new(10.0, 3.0, 13.0)), packet(3, Vector3::new(10.0, -3.0, 13.0))];
    c.bench_function("stt_step", |b| b.iter(|| stt_step(black_box(&state), &own, &nb, &params).unwrap()));
}

fn control(c: &mut Criterion) {
    let cfg = MpcConfig::default();
    let solver = MpcSolver::new(MpcProblem::from_config(&cfg, 3, 5.0)).unwrap();
    let a = double_integrator_a(3, cfg.dt);
    let r0 = DVector::from_vec(vec![1.0, 2.0, 3.0, 0.5, 0.0, 0.0]);
    let reference = propagate_reference(&r0, &a, cfg.horizon).unwrap();
    let x0 = DVector::zeros(6);
    c.bench_function("mpc_solve", |b| b.iter(|| solver.solve(black_box(&x0), &reference).unwrap()));
}

criterion_group!(benches, capture, estimation, control);
criterion_main!(benches);
