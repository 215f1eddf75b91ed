use mcm_core::capture::{
    build_envelope, corner_trajectories, dwell_trigger, point_in_convex, ConvexPolytope, CornerMode, DwellState,
    EnvelopeConfig, EnvelopeSplit, GEOMETRY_TOLERANCE,
};
use mcm_core::control::{objective, MpcProblem, MpcSolver};
use mcm_core::estimation::{projective_matrix, pseudo_linear, stt_step, EstimatorState, SharePacket, SttParams};
use mcm_core::netdyn::LaunchParams;
use mcm_core::world::Pose;
use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit() -> impl Strategy<Value = Vector3<f64>> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("not near zero", |(x, y, z)| x * x + y * y + z * z > 1e-2)
        .prop_map(|(x, y, z)| Vector3::new(x, y, z).normalize())
}

fn point(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

/// Point-in-hull by Carathéodory: inside iff inside some tetrahedron of the
/// input points.
fn in_some_tetrahedron(pts: &[Vector3<f64>], p: &Vector3<f64>) -> bool {
    let n = pts.len();
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                for d in c + 1..n {
                    let m = Matrix3::from_columns(&[pts[b] - pts[a], pts[c] - pts[a], pts[d] - pts[a]]);
                    let Some(inv) = m.try_inverse() else { continue };
                    let l = inv * (p - pts[a]);
                    if l.iter().all(|&x| x >= -1e-12) && l.sum() <= 1.0 + 1e-12 {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn max_violation(poly: &ConvexPolytope, p: &Vector3<f64>) -> f64 {
    poly.halfspaces.iter().map(|h| h.signed_distance(p)).fold(f64::NEG_INFINITY, f64::max)
}

/// Streak length at each sample measured from the last out-of-region sample
/// (or the first sample), then fire on the first sample that reaches 0.5 s.
fn dwell_reference(flags: &[bool], dt: f64) -> Vec<bool> {
    let mut out = Vec::with_capacity(flags.len());
    let mut anchor: Option<usize> = None;
    let mut fired = false;
    for (k, &inside) in flags.iter().enumerate() {
        if !inside {
            anchor = Some(k);
            fired = false;
            out.push(false);
            continue;
        }
        let start = anchor.unwrap_or(0);
        let held = (k - start) as f64 * dt;
        let fire = !fired && held >= 0.5 - 1e-9;
        fired |= fire;
        out.push(fire);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn projector_annihilates_and_is_idempotent(g in unit()) {
        let p = projective_matrix(&g).unwrap();
        prop_assert!((p * g).norm() < 1e-12);
        prop_assert!((p * p - p).abs().max() < 1e-12);
        prop_assert!((p - p.transpose()).abs().max() == 0.0);
    }

    #[test]
    fn noiseless_pseudo_linear_residual_vanishes(s in point(50.0), t in point(50.0), v in point(5.0)) {
        prop_assume!((t - s).norm() > 1e-3);
        let g = (t - s).normalize();
        let m = pseudo_linear(&g, &s).unwrap();
        let x = Vector6::new(t.x, t.y, t.z, v.x, v.y, v.z);
        prop_assert!(m.residual(&x).norm() < 1e-9);
    }

    #[test]
    fn dwell_fires_iff_held_for_window(flags in proptest::collection::vec(prop::bool::weighted(0.9), 1..200)) {
        let dt = 0.02;
        let mut st = DwellState::default();
        let mut got = Vec::new();
        for (k, &f) in flags.iter().enumerate() {
            let (next, fire) = dwell_trigger(&st, f, k as f64 * dt, 0.5).unwrap();
            st = next;
            got.push(fire);
        }
        prop_assert_eq!(got, dwell_reference(&flags, dt));
    }

    #[test]
    fn stt_information_stays_spd(seed in any::<u64>(), steps in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = SttParams::default();
        let target = Vector3::new(10.0, 0.0, 10.0);
        let mut st = EstimatorState::at(&(target + Vector3::new(0.3, -0.2, 0.1)));
        for k in 0..steps {
            let sensors: Vec<Vector3<f64>> = (0..3)
                .map(|_| target + Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(1.0..5.0)))
                .collect();
            let packet = |i: usize, s: &Vector3<f64>, with: bool| SharePacket {
                sender: i,
                step: k as u64,
                bearing: with.then(|| (target - s).normalize()),
                sensor_pos: *s,
                prior: Some(st.x_hat + Vector6::repeat(0.01)),
            };
            let own = packet(0, &sensors[0], rng.random_bool(0.8));
            let nb = [packet(1, &sensors[1], rng.random_bool(0.5)), packet(2, &sensors[2], rng.random_bool(0.5))];
            st = stt_step(&st, &own, &nb, &params).unwrap();
            prop_assert!((st.m_hat - st.m_hat.transpose()).abs().max() == 0.0);
            prop_assert!(st.m_hat.cholesky().is_some());
        }
    }

    #[test]
    fn hull_containment_matches_tetrahedron_oracle(
        pts in proptest::collection::vec(point(1.0), 6..10),
        q in proptest::collection::vec(point(1.2), 20),
    ) {
        let Ok(poly) = ConvexPolytope::hull(&pts) else { return Ok(()) };
        prop_assume!(poly.volume() > 1e-3);
        for p in &q {
            // Away from the tolerance band both tests must agree exactly.
            if max_violation(&poly, p).abs() <= 10.0 * GEOMETRY_TOLERANCE {
                continue;
            }
            prop_assert_eq!(point_in_convex(p, &poly), in_some_tetrahedron(&pts, p));
        }
    }

    #[test]
    fn hull_volume_matches_monte_carlo(pts in proptest::collection::vec(point(1.0), 8..14), seed in any::<u64>()) {
        let Ok(poly) = ConvexPolytope::hull(&pts) else { return Ok(()) };
        prop_assume!(poly.volume() > 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40_000;
        let hits = (0..n)
            .filter(|_| {
                let p = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                poly.contains(&p, 0.0)
            })
            .count();
        let mc = 8.0 * hits as f64 / n as f64;
        prop_assert!((mc - poly.volume()).abs() <= 0.05 * poly.volume(), "mc {} hull {}", mc, poly.volume());
    }

    #[test]
    fn envelope_moves_rigidly_with_the_gun(yaw in -3.1..3.1f64, t in point(20.0), q in proptest::collection::vec(point(6.0), 30)) {
        let cfg = EnvelopeConfig::default();
        let launch = LaunchParams::default();
        let build = |pose: &Pose| {
            let c = corner_trajectories(pose, &launch, &cfg, CornerMode::Tethered).unwrap();
            build_envelope(&c, &pose.position, EnvelopeSplit::MouthClosure { fraction: 0.5 }).unwrap()
        };
        let local = build(&Pose::identity());
        let pose = Pose::new(t, Rotation3::from_axis_angle(&Vector3::z_axis(), yaw));
        let world = build(&pose);
        for p in &q {
            let pw = pose.transform_point(p);
            let margin = max_violation(&local.a, p).abs().min(max_violation(&local.b, p).abs());
            if margin > 1e-6 {
                prop_assert_eq!(
                    mcm_core::capture::is_capturable(p, &local),
                    mcm_core::capture::is_capturable(&pw, &world)
                );
            }
        }
    }

    #[test]
    fn mpc_optimum_beats_perturbations(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, k) = (2, 8);
        let prob = MpcProblem {
            horizon: k,
            dt: 0.1,
            q: DMatrix::identity(d, d) * rng.random_range(0.5..2.0),
            r_u: DMatrix::identity(d, d) * rng.random_range(0.05..0.5),
            a_max: 1e9,
        };
        let x0 = DVector::from_fn(2 * d, |_, _| rng.random_range(-2.0..2.0));
        let reference: Vec<DVector<f64>> = (0..k).map(|_| DVector::from_fn(2 * d, |_, _| rng.random_range(-3.0..3.0))).collect();
        let sol = MpcSolver::new(prob.clone()).unwrap().solve(&x0, &reference).unwrap();
        for _ in 0..10 {
            let mut u = sol.inputs.clone();
            let eps = 10f64.powf(rng.random_range(-4.0..0.0));
            for ui in u.iter_mut() {
                for c in ui.iter_mut() {
                    *c += eps * rng.random_range(-1.0..1.0);
                }
            }
            prop_assert!(objective(&prob, &x0, &reference, &u).unwrap() >= sol.objective - 1e-9 * sol.objective.abs().max(1.0));
        }
    }
}
