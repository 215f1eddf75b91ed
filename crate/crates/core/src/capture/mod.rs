//! Real-time capture decision.
//!
//! Only the four corner masses are propagated. Their sampled paths sweep a
//! flying envelope which is split into two convex polytopes: `A`, the hull of
//! the muzzle and every corner sample, and `B`, the hull of the samples after
//! a split time. A target is capturable when it lies in `A` but not in `B`,
//! and the trigger fires once that has held continuously for the dwell
//! window.

pub mod hull;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netdyn::{
    corner_launch_state, integrate_net, launch_initial_state, IntegratorConfig, LaunchParams,
    NetParams, NetTopology, Scheme,
};
use crate::world::Pose;

pub use hull::{ConvexPolytope, HalfSpace};

/// Half-space tolerance for containment tests (m). Points on the boundary
/// count as inside.
pub const GEOMETRY_TOLERANCE: f64 = 1e-6;

/// Default dwell window (s).
pub const DWELL_WINDOW: f64 = 0.5;

/// How the four corner paths are predicted.
#[derive(Debug, Clone, Copy)]
pub enum CornerMode<'a> {
    /// Gravity plus quadratic drag, corners independent.
    Ballistic,
    /// Ballistic, plus an inextensible reach limit: a corner can get no
    /// farther than `reach` from the corners' centroid and rebounds off that
    /// limit with the configured restitution.
    Tethered,
    /// Corner rows of a full net rollout. Far too slow for real time; used
    /// to validate the lightweight modes.
    FullOracle {
        topo: &'a NetTopology,
        params: &'a NetParams,
        dt: f64,
    },
}

/// Where the envelope is cut into `A` and `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvelopeSplit {
    /// At the sample of maximum mouth area.
    PeakMouthArea,
    /// At the first sample after the peak where the corner spread drops
    /// below `fraction` of the largest spread seen.
    MouthClosure { fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvelopeConfig {
    /// Prediction horizon `T_env` (s).
    pub horizon: f64,
    /// Sample period `dt_env` (s).
    pub sample_dt: f64,
    /// Integration substeps per sample.
    pub substeps: usize,
    /// Quadratic damping of each corner relative to the corner centroid (1/m):
    /// `a = −k‖v − v̄‖(v − v̄)`.
    pub corner_drag: f64,
    pub gravity: f64,
    /// Reach limit for [`CornerMode::Tethered`] (m).
    pub reach: f64,
    /// Fraction of the outward radial speed kept after hitting the reach limit.
    pub restitution: f64,
    pub split: EnvelopeSplit,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        Self {
            horizon: 0.6,
            sample_dt: 0.012,
            substeps: 20,
            corner_drag: 0.3,
            gravity: 9.81,
            reach: 1.57,
            restitution: 0.5,
            split: EnvelopeSplit::MouthClosure { fraction: 0.5 },
        }
    }
}

impl EnvelopeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.sample_dt > 0.0 && self.substeps > 0) {
            return Err(Error::InvalidConfig(
                "envelope horizon, sample_dt and substeps must be positive".into(),
            ));
        }
        if !(self.corner_drag >= 0.0 && self.gravity >= 0.0 && self.reach > 0.0) {
            return Err(Error::InvalidConfig(
                "corner_drag and gravity must be non-negative, reach positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.restitution) {
            return Err(Error::InvalidConfig("restitution must lie in [0, 1]".into()));
        }
        if let EnvelopeSplit::MouthClosure { fraction } = self.split {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::InvalidConfig(
                    "mouth-closure fraction must lie in (0, 1)".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Four time-sampled corner paths, all the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerTrajectories {
    pub times: Vec<f64>,
    /// `paths[q][k]`: corner `q` at `times[k]`.
    pub paths: [Vec<Vector3<f64>>; 4],
}

impl CornerTrajectories {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn sample(&self, k: usize) -> [Vector3<f64>; 4] {
        [
            self.paths[0][k],
            self.paths[1][k],
            self.paths[2][k],
            self.paths[3][k],
        ]
    }

    /// Area of the quadrilateral spanned by the corners at sample `k`.
    pub fn mouth_area(&self, k: usize) -> f64 {
        let c = self.sample(k);
        0.5 * (c[2] - c[0]).cross(&(c[3] - c[1])).norm()
    }

    /// Larger of the two corner diagonals at sample `k`.
    pub fn spread(&self, k: usize) -> f64 {
        let c = self.sample(k);
        (c[2] - c[0]).norm().max((c[3] - c[1]).norm())
    }
}

#[derive(Clone, Copy)]
struct Corner {
    p: Vector3<f64>,
    v: Vector3<f64>,
}

/// Quadratic drag acts on the velocity relative to the corner centroid, so
/// only the mouth shape is damped and the shape does not depend on aim.
fn corner_accel(v: &Vector3<f64>, g: &Vector3<f64>, drag: f64, v_ref: &Vector3<f64>) -> Vector3<f64> {
    let rel = v - v_ref;
    g - rel * (drag * rel.norm())
}

fn rk4_corner(c: &Corner, h: f64, g: &Vector3<f64>, drag: f64, v_ref: &Vector3<f64>) -> Corner {
    let k1v = corner_accel(&c.v, g, drag, v_ref);
    let k1p = c.v;
    let v2 = c.v + k1v * (0.5 * h);
    let k2v = corner_accel(&v2, g, drag, v_ref);
    let k2p = v2;
    let v3 = c.v + k2v * (0.5 * h);
    let k3v = corner_accel(&v3, g, drag, v_ref);
    let k3p = v3;
    let v4 = c.v + k3v * h;
    let k4v = corner_accel(&v4, g, drag, v_ref);
    let k4p = v4;
    Corner {
        p: c.p + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0),
        v: c.v + (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (h / 6.0),
    }
}

/// Keeps each corner within `reach` of the corner centroid. Corrections are
/// shared out so the centroid's position and velocity are untouched.
fn enforce_reach(corners: &mut [Corner; 4], reach: f64, restitution: f64) {
    for pass in 0..8 {
        let centroid_p = corners.iter().map(|c| c.p).sum::<Vector3<f64>>() / 4.0;
        let centroid_v = corners.iter().map(|c| c.v).sum::<Vector3<f64>>() / 4.0;
        let mut dp = [Vector3::zeros(); 4];
        let mut dv = [Vector3::zeros(); 4];
        let mut any = false;
        for (q, c) in corners.iter().enumerate() {
            let r = c.p - centroid_p;
            let dist = r.norm();
            if dist > reach * (1.0 + 1e-9) {
                any = true;
                let n = r / dist;
                dp[q] = -n * (dist - reach);
                let radial = (c.v - centroid_v).dot(&n);
                if pass == 0 && radial > 0.0 {
                    dv[q] = -n * ((1.0 + restitution) * radial);
                }
            }
        }
        if !any {
            return;
        }
        let mp = dp.iter().sum::<Vector3<f64>>() / 4.0;
        let mv = dv.iter().sum::<Vector3<f64>>() / 4.0;
        for (q, c) in corners.iter_mut().enumerate() {
            // Removing the mean makes the other corners absorb the reaction.
            c.p += dp[q] - mp;
            c.v += dv[q] - mv;
        }
    }
}

/// Predicts the four corner paths after a launch from `gun_pose`.
pub fn corner_trajectories(
    gun_pose: &Pose,
    launch: &LaunchParams,
    cfg: &EnvelopeConfig,
    mode: CornerMode<'_>,
) -> Result<CornerTrajectories> {
    cfg.validate()?;
    launch.validate()?;
    let n_samples = (cfg.horizon / cfg.sample_dt).round() as usize + 1;
    let times: Vec<f64> = (0..n_samples).map(|k| k as f64 * cfg.sample_dt).collect();

    if let CornerMode::FullOracle { topo, params, dt } = mode {
        let steps_per_sample = (cfg.sample_dt / dt).round().max(1.0) as usize;
        let s0 = launch_initial_state(gun_pose, launch, topo)?;
        let traj = integrate_net(
            &s0,
            topo,
            params,
            &IntegratorConfig {
                dt,
                duration: cfg.horizon,
                scheme: Scheme::SemiImplicitEuler,
                sample_every: steps_per_sample,
                divergence_bound: 1e6,
            },
        )?;
        let ids = topo.corner_nodes();
        let paths = ids.map(|i| traj.states.iter().map(|s| s.position(i)).collect::<Vec<_>>());
        return Ok(CornerTrajectories {
            times: traj.times,
            paths,
        });
    }

    let g = Vector3::new(0.0, 0.0, -cfg.gravity);
    let mut corners: [Corner; 4] = std::array::from_fn(|q| {
        let (p, v) = corner_launch_state(gun_pose, launch, q);
        Corner { p, v }
    });
    let h = cfg.sample_dt / cfg.substeps as f64;
    let mut paths: [Vec<Vector3<f64>>; 4] = std::array::from_fn(|_| Vec::with_capacity(n_samples));
    for (q, c) in corners.iter().enumerate() {
        paths[q].push(c.p);
    }
    for _ in 1..n_samples {
        for _ in 0..cfg.substeps {
            let v_ref = corners.iter().map(|c| c.v).sum::<Vector3<f64>>() / 4.0 + g * (0.5 * h);
            for c in corners.iter_mut() {
                *c = rk4_corner(c, h, &g, cfg.corner_drag, &v_ref);
            }
            if matches!(mode, CornerMode::Tethered) {
                enforce_reach(&mut corners, cfg.reach, cfg.restitution);
            }
        }
        for (q, c) in corners.iter().enumerate() {
            paths[q].push(c.p);
        }
    }
    Ok(CornerTrajectories { times, paths })
}

/// The A/B decomposition of a flying envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureEnvelope {
    pub a: ConvexPolytope,
    pub b: ConvexPolytope,
    /// Time of maximum mouth area (s).
    pub t_star: f64,
    /// Time at which `B` begins (s); equals `t_star` for a peak split.
    pub t_split: f64,
}

impl CaptureEnvelope {
    /// The envelope carried rigidly by `pose` (local → world).
    pub fn transformed(&self, pose: &Pose) -> Self {
        Self {
            a: self.a.transformed(pose),
            b: self.b.transformed(pose),
            ..*self
        }
    }

    pub fn write_text<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# t_star {} t_split {}", self.t_star, self.t_split)?;
        self.a.write_text("A", &mut w)?;
        self.b.write_text("B", &mut w)
    }
}

/// Cuts the envelope swept by `corners` into `A` and `B`.
pub fn build_envelope(
    corners: &CornerTrajectories,
    muzzle: &Vector3<f64>,
    split: EnvelopeSplit,
) -> Result<CaptureEnvelope> {
    if corners.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "envelope needs at least 3 samples, got {}",
            corners.len()
        )));
    }
    let peak = (0..corners.len())
        .max_by(|&a, &b| corners.mouth_area(a).total_cmp(&corners.mouth_area(b)))
        .expect("non-empty");
    let split_k = match split {
        EnvelopeSplit::PeakMouthArea => peak,
        EnvelopeSplit::MouthClosure { fraction } => {
            let max_spread = corners.spread(peak).max(
                (0..corners.len())
                    .map(|k| corners.spread(k))
                    .fold(0.0, f64::max),
            );
            (peak..corners.len())
                .find(|&k| corners.spread(k) < fraction * max_spread)
                .ok_or_else(|| {
                    Error::Degenerate(format!(
                        "mouth never closes below {fraction} of its peak spread within the horizon"
                    ))
                })?
        }
    };

    let mut all = vec![*muzzle];
    for k in 0..corners.len() {
        all.extend(corners.sample(k));
    }
    let a = ConvexPolytope::hull(&all)
        .map_err(|e| Error::Degenerate(format!("envelope A: {}", detail(e))))?;
    let late: Vec<Vector3<f64>> = (split_k..corners.len())
        .flat_map(|k| corners.sample(k))
        .collect();
    let b = ConvexPolytope::hull(&late).map_err(|e| {
        Error::Degenerate(format!(
            "envelope B from {} samples after t = {}: {}",
            corners.len() - split_k,
            corners.times[split_k],
            detail(e)
        ))
    })?;
    Ok(CaptureEnvelope {
        a,
        b,
        t_star: corners.times[peak],
        t_split: corners.times[split_k],
    })
}

fn detail(e: Error) -> String {
    match e {
        Error::Degenerate(m) => m,
        other => other.to_string(),
    }
}

/// Half-space containment with tolerance [`GEOMETRY_TOLERANCE`].
pub fn point_in_convex(p: &Vector3<f64>, poly: &ConvexPolytope) -> bool {
    if poly.halfspaces.is_empty() {
        log::warn!("containment test against an empty polytope");
        return false;
    }
    poly.contains(p, GEOMETRY_TOLERANCE)
}

/// In `A` and not in `B`.
pub fn is_capturable(p: &Vector3<f64>, env: &CaptureEnvelope) -> bool {
    point_in_convex(p, &env.a) && !point_in_convex(p, &env.b)
}

/// Envelope precomputed once in the gun frame and carried with the gun.
///
/// Valid as long as the gun's attitude relative to gravity is unchanged,
/// which holds for a level airframe that only yaws.
#[derive(Debug, Clone, PartialEq)]
pub struct GunEnvelope {
    /// Envelope expressed in the gun frame.
    pub local: CaptureEnvelope,
}

impl GunEnvelope {
    /// Builds the envelope for a gun with `gun_pose` and caches it in the
    /// gun's own frame.
    pub fn build(
        gun_pose: &Pose,
        launch: &LaunchParams,
        cfg: &EnvelopeConfig,
        mode: CornerMode<'_>,
    ) -> Result<Self> {
        let corners = corner_trajectories(gun_pose, launch, cfg, mode)?;
        let world = build_envelope(&corners, &gun_pose.position, cfg.split)?;
        Ok(Self {
            local: world.transformed(&gun_pose.inverse()),
        })
    }

    pub fn is_capturable(&self, p_world: &Vector3<f64>, gun_pose: &Pose) -> bool {
        is_capturable(&gun_pose.inverse_transform_point(p_world), &self.local)
    }
}

/// Per-agent dwell bookkeeping.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DwellState {
    /// Continuous in-region time (s).
    pub duration: f64,
    pub last_t: Option<f64>,
    streak_start: Option<f64>,
    fired: bool,
}

/// Advances the dwell filter with one sample. `fire` is true only on the
/// first sample of a streak whose duration reaches `window`.
///
/// A streak's duration runs from the last out-of-region sample, so a target
/// present for `n` consecutive samples at period `h` has dwelt `n·h`.
pub fn dwell_trigger(
    state: &DwellState,
    in_region: bool,
    t: f64,
    window: f64,
) -> Result<(DwellState, bool)> {
    if let Some(prev) = state.last_t {
        if t < prev {
            return Err(Error::NonMonotoneTime {
                previous: prev,
                current: t,
            });
        }
    }
    if !in_region {
        return Ok((
            DwellState {
                last_t: Some(t),
                ..DwellState::default()
            },
            false,
        ));
    }
    let start = state
        .streak_start
        .unwrap_or_else(|| state.last_t.unwrap_or(t));
    let duration = t - start;
    // Allow for round-off in sample times built by repeated addition.
    let reached = duration >= window - 1e-9;
    let fire = reached && !state.fired;
    Ok((
        DwellState {
            duration,
            last_t: Some(t),
            streak_start: Some(start),
            fired: state.fired || fire,
        },
        fire,
    ))
}
