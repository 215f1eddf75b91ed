//! Stand-alone net studies: a single launch demo and the envelope-versus-
//! rollout agreement grid.

use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::capture::{CornerMode, EnvelopeConfig, GunEnvelope};
use crate::error::{Error, Result};
use crate::netdyn::{
    build_net, corner_spread, integrate_net, launch_initial_state, EnclosureCriteria, EnclosureOracle,
    EnclosureVerdict, IntegratorConfig, LaunchParams, NetMaterials, NetParams, NetTrajectory, Scheme,
};
use crate::world::Pose;

/// Launch from a level gun at the origin toward a static target on its axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetDemo {
    /// Mission time of the launch; only shifts reported times.
    pub launch_time: f64,
    pub target_distance: f64,
    pub nodes_per_side: usize,
    pub materials: NetMaterials,
    pub params: NetParams,
    pub launch: LaunchParams,
    pub dt: f64,
    pub horizon: f64,
    /// Frame spacing (s).
    pub frame_dt: f64,
    pub closure_fraction: f64,
}

impl Default for NetDemo {
    fn default() -> Self {
        Self {
            launch_time: 20.5,
            target_distance: 5.0,
            nodes_per_side: 19,
            materials: NetMaterials::default(),
            params: NetParams::default(),
            launch: LaunchParams::default(),
            dt: 1e-4,
            horizon: 0.6,
            frame_dt: 0.005,
            closure_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NetDemoReport {
    pub launch_time: f64,
    pub target: [f64; 3],
    pub verdict: EnclosureVerdict,
    /// Seconds after launch.
    pub enclosure_delay: Option<f64>,
    pub nominal_diagonal: f64,
    /// (seconds after launch, corner spread) per frame.
    pub spread: Vec<(f64, f64)>,
    pub stability_warning: Option<String>,
}

fn sample_every(frame_dt: f64, dt: f64) -> usize {
    ((frame_dt / dt).round() as usize).max(1)
}

/// Runs the demo and returns the report together with the trajectory.
pub fn netdemo(cfg: &NetDemo) -> Result<(NetDemoReport, NetTrajectory)> {
    let topo = build_net(cfg.nodes_per_side, &cfg.materials)?;
    let gun = Pose::identity();
    let s0 = launch_initial_state(&gun, &cfg.launch, &topo)?;
    let traj = integrate_net(
        &s0,
        &topo,
        &cfg.params,
        &IntegratorConfig {
            dt: cfg.dt,
            duration: cfg.horizon,
            scheme: Scheme::SemiImplicitEuler,
            sample_every: sample_every(cfg.frame_dt, cfg.dt),
            divergence_bound: 1e6,
        },
    )?;
    let target = Vector3::new(cfg.target_distance, 0.0, 0.0);
    let criteria = EnclosureCriteria {
        closure_fraction: cfg.closure_fraction,
        ..EnclosureCriteria::default()
    };
    let verdict = EnclosureOracle::new(&traj, &topo, criteria).verdict_static(&target);
    let spread = traj
        .times
        .iter()
        .zip(&traj.states)
        .map(|(&t, s)| (t, corner_spread(s, &topo)))
        .collect();
    let report = NetDemoReport {
        launch_time: cfg.launch_time,
        target: [target.x, target.y, target.z],
        verdict,
        enclosure_delay: verdict.first_enclosure_time,
        nominal_diagonal: topo.nominal_mouth_diagonal(),
        spread,
        stability_warning: traj.stability_warning.clone(),
    };
    Ok((report, traj))
}

/// Grid comparison of the simplified envelope against full rollouts for
/// static targets in front of a level gun.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvelopeStudy {
    pub envelope: EnvelopeConfig,
    pub launch: LaunchParams,
    pub nodes_per_side: usize,
    pub materials: NetMaterials,
    pub params: NetParams,
    pub dt: f64,
    pub frame_dt: f64,
    pub closure_fraction: f64,
    /// Points along the gun axis, across, and vertically.
    pub counts: [usize; 3],
    pub axial_range: [f64; 2],
    /// Lateral and vertical half-width as a fraction of half the nominal
    /// mouth diagonal.
    pub half_width_fraction: f64,
    /// Vertical center of the grid (m); negative follows the net's sag.
    pub vertical_offset: f64,
    /// Queries timed for the per-query cost.
    pub timing_queries: usize,
}

impl Default for EnvelopeStudy {
    fn default() -> Self {
        Self {
            envelope: EnvelopeConfig::default(),
            launch: LaunchParams::default(),
            nodes_per_side: 19,
            materials: NetMaterials::default(),
            params: NetParams::default(),
            dt: 1e-4,
            frame_dt: 0.005,
            closure_fraction: 0.5,
            counts: [10, 8, 8],
            axial_range: [0.5, 9.0],
            half_width_fraction: 0.6,
            vertical_offset: -0.4,
            timing_queries: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeStudyReport {
    pub points: usize,
    pub oracle_positive: usize,
    pub agreement: f64,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
    pub t_star: f64,
    pub t_split: f64,
    /// Mean cost of one envelope query (s).
    pub query_seconds: f64,
    /// Cost of one net rollout (s).
    pub rollout_seconds: f64,
    pub speedup: f64,
}

fn lerp(lo: f64, hi: f64, i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.5 * (lo + hi)
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

impl EnvelopeStudy {
    pub fn grid(&self, nominal_diagonal: f64) -> Vec<Vector3<f64>> {
        let r = self.half_width_fraction * 0.5 * nominal_diagonal;
        let [nx, ny, nz] = self.counts;
        let mut pts = Vec::with_capacity(nx * ny * nz);
        for i in 0..nx {
            for j in 0..ny {
                for k in 0..nz {
                    pts.push(Vector3::new(
                        lerp(self.axial_range[0], self.axial_range[1], i, nx),
                        lerp(-r, r, j, ny),
                        self.vertical_offset + lerp(-r, r, k, nz),
                    ));
                }
            }
        }
        pts
    }
}

pub fn validate_envelope(cfg: &EnvelopeStudy) -> Result<EnvelopeStudyReport> {
    if cfg.counts.contains(&0) || cfg.timing_queries == 0 {
        return Err(Error::InvalidConfig("grid counts and timing_queries must be positive".into()));
    }
    let topo = build_net(cfg.nodes_per_side, &cfg.materials)?;
    let gun = Pose::identity();
    let env = GunEnvelope::build(&gun, &cfg.launch, &cfg.envelope, CornerMode::Tethered)?;

    let s0 = launch_initial_state(&gun, &cfg.launch, &topo)?;
    let icfg = IntegratorConfig {
        dt: cfg.dt,
        duration: cfg.envelope.horizon,
        scheme: Scheme::SemiImplicitEuler,
        sample_every: sample_every(cfg.frame_dt, cfg.dt),
        divergence_bound: 1e6,
    };
    let t0 = Instant::now();
    let traj = integrate_net(&s0, &topo, &cfg.params, &icfg)?;
    let oracle = EnclosureOracle::new(
        &traj,
        &topo,
        EnclosureCriteria {
            closure_fraction: cfg.closure_fraction,
            ..EnclosureCriteria::default()
        },
    );
    let rollout_seconds = t0.elapsed().as_secs_f64();

    let grid = cfg.grid(topo.nominal_mouth_diagonal());
    let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
    for p in &grid {
        match (env.is_capturable(p, &gun), oracle.verdict_static(p).captured) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }

    let t0 = Instant::now();
    let mut hits = 0usize;
    for q in 0..cfg.timing_queries {
        let p = std::hint::black_box(&grid[q % grid.len()]);
        hits += env.is_capturable(p, &gun) as usize;
    }
    std::hint::black_box(hits);
    let query_seconds = t0.elapsed().as_secs_f64() / cfg.timing_queries as f64;

    Ok(EnvelopeStudyReport {
        points: grid.len(),
        oracle_positive: tp + fneg,
        agreement: (tp + tn) as f64 / grid.len() as f64,
        true_positive: tp,
        false_positive: fp,
        false_negative: fneg,
        true_negative: tn,
        t_star: env.local.t_star,
        t_split: env.local.t_split,
        query_seconds,
        rollout_seconds,
        speedup: rollout_seconds / query_seconds.max(f64::MIN_POSITIVE),
    })
}
