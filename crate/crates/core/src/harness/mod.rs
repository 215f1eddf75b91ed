//! Scenario orchestration: the per-tick pipeline, metrics and traces.

pub mod batch;
pub mod config;
pub mod studies;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DVector, Vector3, Vector6};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::capture::{dwell_trigger, CornerMode, DwellState, GunEnvelope};
use crate::control::{
    desired_yaw, double_integrator_a, formation_reference, propagate_reference, MpcProblem, MpcSolver,
};
use crate::error::{Error, Result};
use crate::estimation::{stt_step, triangulate, EstimatorState, Network, SharePacket};
use crate::netdyn::{
    build_net, integrate_net, launch_initial_state, EnclosureCriteria, EnclosureOracle, EnclosureVerdict,
    IntegratorConfig, NetTopology, NetTrajectory, Scheme,
};
use crate::perception::{eliminate_neighbors, gimbal_pid_step, pixel_to_bearing, step_gimbal, synthesize_frame, PidState};
use crate::seed::{stream_rng, Stream};
use crate::world::{camera_pose, step_plant, wrap_angle, GimbalAngles, PursuerState, Pose};

pub use batch::{monte_carlo, summarize_verdicts, wilson_interval, BatchReport, BatchSummary, TrialOutcome};
pub use config::{load_config, Adjudication, ScenarioConfig};
pub use studies::{netdemo, validate_envelope, EnvelopeStudy, EnvelopeStudyReport, NetDemo, NetDemoReport};

/// Inclusive time span (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentMetrics {
    pub agent: usize,
    /// Over the final `rmse_window` seconds; `None` if the agent never
    /// initialized within it.
    pub position_rmse: Option<f64>,
    pub velocity_rmse: Option<f64>,
    /// Angle between optical axis and true line of sight (rad).
    pub gimbal_error_mean: f64,
    pub gimbal_error_max: f64,
    pub capturable_intervals: Vec<Interval>,
    pub capturable_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriggerEvent {
    pub t: f64,
    pub agent: usize,
    pub estimate: [f64; 3],
    pub true_position: [f64; 3],
}

/// Wall-clock per stage (s). Not deterministic; kept out of traces.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimes {
    pub perception: f64,
    pub estimation: f64,
    pub control: f64,
    pub capture: f64,
    pub adjudication: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub name: String,
    pub seed: u64,
    /// Simulated time actually covered (s).
    pub simulated: f64,
    pub agents: Vec<AgentMetrics>,
    pub triggers: Vec<TriggerEvent>,
    pub verdict: Option<EnclosureVerdict>,
    pub timings: StageTimes,
}

impl RunMetrics {
    pub fn mean_position_rmse(&self) -> Option<f64> {
        mean(self.agents.iter().map(|a| a.position_rmse))
    }

    pub fn mean_velocity_rmse(&self) -> Option<f64> {
        mean(self.agents.iter().map(|a| a.velocity_rmse))
    }

    pub fn captured(&self) -> bool {
        self.verdict.is_some_and(|v| v.captured)
    }
}

fn mean(it: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = it.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// CSV time series of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Traces {
    pub estimation: String,
    pub control: String,
    pub gimbal: String,
    pub capture: String,
}

impl Traces {
    fn new() -> Self {
        Self {
            estimation: "t,agent,px,py,pz,vx,vy,vz,true_px,true_py,true_pz,true_vx,true_vy,true_vz,pos_err,vel_err\n".into(),
            control: "t,agent,ux,uy,uz,u_norm,ref_err,yaw\n".into(),
            gimbal: "t,agent,pitch,yaw,axis_error\n".into(),
            capture: "t,agent,capturable,dwell,fire\n".into(),
        }
    }

    pub fn files(&self) -> [(&'static str, &str); 4] {
        [
            ("estimation.csv", &self.estimation),
            ("control.csv", &self.control),
            ("gimbal.csv", &self.gimbal),
            ("capture.csv", &self.capture),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub traces: Option<Traces>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub record_traces: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { record_traces: true }
    }
}

/// Writes the trace CSVs and `summary.json` (metrics without timings) plus
/// `timing.json` into `dir`.
pub fn emit_traces(out: &RunOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    if let Some(tr) = &out.traces {
        for (name, body) in tr.files() {
            std::fs::write(dir.join(name), body)?;
        }
    }
    let mut summary = serde_json::to_value(&out.metrics)
        .map_err(|e| Error::Io(format!("cannot encode summary: {e}")))?;
    let timings = summary
        .as_object_mut()
        .and_then(|o| o.remove("timings"))
        .unwrap_or_default();
    let pretty = |v: &serde_json::Value| serde_json::to_string_pretty(v).expect("json values always encode");
    std::fs::write(dir.join("summary.json"), pretty(&summary) + "\n")?;
    std::fs::write(dir.join("timing.json"), pretty(&timings) + "\n")?;
    Ok(())
}

struct Agent {
    state: PursuerState,
    est: Option<EstimatorState>,
    pid: PidState,
    gimbal_rate: GimbalAngles,
    accel: Vector3<f64>,
    yaw_cmd: f64,
    dwell: DwellState,
    launched: bool,
    /// Latest world bearing and the camera position it was taken from.
    obs: Option<(Vector3<f64>, Vector3<f64>)>,
    perception_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    // Metrics.
    pos_sq: f64,
    vel_sq: f64,
    rmse_samples: usize,
    gimbal_err_sum: f64,
    gimbal_err_max: f64,
    gimbal_samples: usize,
    intervals: Vec<Interval>,
    open_interval: Option<Interval>,
    capture_samples: usize,
    capturable_samples: usize,
}

/// Tilts `g` by the small angles `n.0` and `n.1` about two axes
/// perpendicular to it.
fn tilt_bearing(g: &Vector3<f64>, n: (f64, f64)) -> Vector3<f64> {
    let helper = if g.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = g.cross(&helper).normalize();
    let e2 = g.cross(&e1);
    (g + e1 * n.0 + e2 * n.1).normalize()
}

fn normal_pair<R: Rng>(rng: &mut R, sigma: f64) -> (f64, f64) {
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    (sigma * a, sigma * b)
}

fn abort(tick: u64, module: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| Error::Aborted {
        tick,
        module,
        source: Box::new(e),
    }
}

/// Net rollout from a gun at rest, reused by geometric adjudication.
struct CachedRollout {
    traj: NetTrajectory,
    oracle: EnclosureOracle,
    gun: Pose,
}

struct Adjudicator<'a> {
    cfg: &'a ScenarioConfig,
    topo: NetTopology,
    cached: Option<CachedRollout>,
}

impl<'a> Adjudicator<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self> {
        let topo = build_net(cfg.net.nodes_per_side, &cfg.net.materials)?;
        let cached = if cfg.capture.adjudication == Adjudication::Geometric {
            let gun = Pose::new(Vector3::zeros(), cfg.gun.mount().orientation);
            let traj = rollout(cfg, &topo, &gun, &Vector3::zeros())?;
            let oracle = EnclosureOracle::new(&traj, &topo, self_criteria(cfg));
            Some(CachedRollout { traj, oracle, gun })
        } else {
            None
        };
        Ok(Self { cfg, topo, cached })
    }

    fn judge(&self, gun_pose: &Pose, pursuer: &PursuerState, t_fire: f64) -> Result<Option<EnclosureVerdict>> {
        let target = |tau: f64| self.cfg.target.state_at(t_fire + tau).map(|s| s.position);
        match self.cfg.capture.adjudication {
            Adjudication::None => Ok(None),
            Adjudication::Full => {
                let traj = rollout(self.cfg, &self.topo, gun_pose, &pursuer.velocity)?;
                let samples = traj.times.iter().map(|&tau| target(tau)).collect::<Result<Vec<_>>>()?;
                let oracle = EnclosureOracle::new(&traj, &self.topo, self_criteria(self.cfg));
                oracle.verdict(&samples).map(Some)
            }
            Adjudication::Geometric => {
                let c = self.cached.as_ref().expect("built for geometric adjudication");
                // Carry the target path into the cached gun's frame: remove
                // the muzzle drift and the yaw of the real gun.
                let yaw_only = Pose::new(gun_pose.position, pursuer.body_pose().orientation);
                let samples = c
                    .traj
                    .times
                    .iter()
                    .map(|&tau| {
                        let p = target(tau)? - pursuer.velocity * tau;
                        Ok(c.gun.position + yaw_only.inverse_transform_point(&p))
                    })
                    .collect::<Result<Vec<_>>>()?;
                c.oracle.verdict(&samples).map(Some)
            }
        }
    }
}

fn self_criteria(cfg: &ScenarioConfig) -> EnclosureCriteria {
    EnclosureCriteria {
        closure_fraction: cfg.net.closure_fraction,
        ..EnclosureCriteria::default()
    }
}

fn rollout(cfg: &ScenarioConfig, topo: &NetTopology, gun: &Pose, carrier_velocity: &Vector3<f64>) -> Result<NetTrajectory> {
    let mut s0 = launch_initial_state(gun, &cfg.launch, topo)?;
    s0.add_uniform_velocity(carrier_velocity);
    integrate_net(
        &s0,
        topo,
        &cfg.net.params,
        &IntegratorConfig {
            dt: cfg.net.dt,
            duration: cfg.net.horizon,
            scheme: Scheme::SemiImplicitEuler,
            sample_every: ((0.005 / cfg.net.dt).round() as usize).max(1),
            divergence_bound: 1e6,
        },
    )
}

/// Runs one scenario and records traces.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutput> {
    run_scenario_with(cfg, RunOptions::default())
}

pub fn run_scenario_with(cfg: &ScenarioConfig, opts: RunOptions) -> Result<RunOutput> {
    let plan = cfg.validate()?;
    let wall = Instant::now();
    let mut times = StageTimes::default();
    let n = cfg.n_pursuers;
    let seed = cfg.seed;
    let cam = cfg.camera.model()?;
    let spec = cfg.formation_spec();
    let stt = cfg.stt_params();
    let gun_mount = cfg.gun.mount();
    let solver = MpcSolver::new(MpcProblem::from_config(&cfg.mpc, 3, cfg.plant.a_max))?;
    let a_mpc = double_integrator_a(3, cfg.mpc.dt);
    let mut network = Network::new(cfg.network.clone(), n, stream_rng(seed, Stream::Network, 0))?;

    let (envelope, adjudicator) = if cfg.capture.enabled {
        let gun_at_rest = Pose::new(Vector3::zeros(), gun_mount.orientation);
        (
            Some(GunEnvelope::build(&gun_at_rest, &cfg.launch, &cfg.envelope, CornerMode::Tethered)?),
            Some(Adjudicator::new(cfg)?),
        )
    } else {
        (None, None)
    };

    let truth0 = cfg.target.state_at(0.0)?;
    let mut agents: Vec<Agent> = (0..n)
        .map(|i| {
            let mut place = stream_rng(seed, Stream::Placement, i as u64);
            let dir = tilt_bearing(&Vector3::z(), normal_pair(&mut place, 1.0));
            let pos = truth0.position + spec.offset(i) + dir * cfg.init.position_error;
            let to_target = truth0.position - pos;
            let yaw = to_target.y.atan2(to_target.x);
            let mut state = PursuerState::at_rest(i, pos, yaw);
            let cam_pos = state.body_pose().transform_point(&cam.mount_offset);
            let dir_body = state.body_pose().inverse_transform_vector(&(truth0.position - cam_pos));
            state.gimbal = GimbalAngles::pointing_at(&dir_body);
            Agent {
                state,
                est: None,
                pid: PidState::default(),
                gimbal_rate: GimbalAngles::default(),
                accel: Vector3::zeros(),
                yaw_cmd: yaw,
                dwell: DwellState::default(),
                launched: false,
                obs: None,
                perception_rng: stream_rng(seed, Stream::Perception, i as u64),
                noise_rng: stream_rng(seed, Stream::BearingNoise, i as u64),
                pos_sq: 0.0,
                vel_sq: 0.0,
                rmse_samples: 0,
                gimbal_err_sum: 0.0,
                gimbal_err_max: 0.0,
                gimbal_samples: 0,
                intervals: Vec::new(),
                open_interval: None,
                capture_samples: 0,
                capturable_samples: 0,
            }
        })
        .collect();

    let mut traces = opts.record_traces.then(Traces::new);
    let mut triggers = Vec::new();
    let mut verdict = None;
    let rmse_from = cfg.timing.duration - cfg.metrics.rmse_window;
    let mut last_t = 0.0;

    for tick in 0..=plan.total {
        let t = tick as f64 * cfg.timing.sim_dt;
        last_t = t;
        let truth = cfg.target.state_at(t).map_err(abort(tick, "world"))?;
        let positions: Vec<Vector3<f64>> = agents.iter().map(|a| a.state.position).collect();

        if tick % plan.gimbal == 0 {
            let t0 = Instant::now();
            for (i, ag) in agents.iter_mut().enumerate() {
                let cam_pose = camera_pose(&ag.state, &cam);
                let others: Vec<Vector3<f64>> = positions
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, p)| *p)
                    .collect();
                let frame = synthesize_frame(&truth.position, &others, &cam_pose, &cam, &cfg.detector, &mut ag.perception_rng);
                let pick = eliminate_neighbors(&frame, &others, &cam_pose, &cam, cfg.detector.target_diameter, cfg.detector.overlap_threshold)
                    .map_err(abort(tick, "perception"))?;
                // Drawn every frame so the stream does not depend on visibility.
                let noise = normal_pair(&mut ag.noise_rng, cfg.noise.bearing_sigma);
                let aim = match pick {
                    Some(det) => {
                        let b = pixel_to_bearing(&det, &cam, &cam_pose, t, i).map_err(abort(tick, "perception"))?;
                        let g = tilt_bearing(&b.direction, noise);
                        ag.obs = Some((g, cam_pose.position));
                        Some(g)
                    }
                    None => {
                        ag.obs = None;
                        ag.est.map(|e| (e.position() - cam_pose.position).normalize())
                    }
                };
                let error = match aim {
                    Some(g) => {
                        let want = GimbalAngles::pointing_at(&ag.state.body_pose().inverse_transform_vector(&g));
                        GimbalAngles::new(want.pitch - ag.state.gimbal.pitch, wrap_angle(want.yaw - ag.state.gimbal.yaw))
                    }
                    None => GimbalAngles::default(),
                };
                let (rate, pid) = gimbal_pid_step(&error, &cfg.gimbal, &ag.pid, cfg.timing.gimbal_dt).map_err(abort(tick, "perception"))?;
                ag.gimbal_rate = rate;
                ag.pid = pid;

                let axis = cam_pose.transform_vector(&Vector3::z());
                let axis_err = axis.angle(&(truth.position - cam_pose.position));
                ag.gimbal_err_sum += axis_err;
                ag.gimbal_err_max = ag.gimbal_err_max.max(axis_err);
                ag.gimbal_samples += 1;
                if let Some(tr) = traces.as_mut() {
                    if tick % plan.estimator == 0 {
                        let _ = writeln!(tr.gimbal, "{t:.3},{i},{:.6},{:.6},{axis_err:.6}", ag.state.gimbal.pitch, ag.state.gimbal.yaw);
                    }
                }
            }
            times.perception += t0.elapsed().as_secs_f64();
        }

        if tick % plan.estimator == 0 {
            let t0 = Instant::now();
            let step = tick / plan.estimator;
            let outbox: Vec<SharePacket> = agents
                .iter()
                .enumerate()
                .map(|(i, ag)| SharePacket {
                    sender: i,
                    step,
                    bearing: ag.obs.map(|o| o.0),
                    sensor_pos: ag.obs.map_or(ag.state.position, |o| o.1),
                    prior: ag.est.map(|e| e.prior(&stt)),
                })
                .collect();
            let inboxes = network.exchange(&outbox, step).map_err(abort(tick, "estimation"))?;
            for (i, ag) in agents.iter_mut().enumerate() {
                let own = &outbox[i];
                ag.est = match ag.est {
                    Some(e) => Some(stt_step(&e, own, &inboxes[i], &stt).map_err(abort(tick, "estimation"))?),
                    None => {
                        let lines: Vec<_> = std::iter::once(own)
                            .chain(&inboxes[i])
                            .filter_map(|p| p.bearing.map(|g| (g, p.sensor_pos)))
                            .collect();
                        triangulate(&lines).ok().map(|p| EstimatorState::at(&p))
                    }
                };
                ag.obs = None;
                if let Some(e) = ag.est {
                    let pe = (e.position() - truth.position).norm();
                    let ve = (e.velocity() - truth.velocity).norm();
                    if t >= rmse_from - 1e-9 {
                        ag.pos_sq += pe * pe;
                        ag.vel_sq += ve * ve;
                        ag.rmse_samples += 1;
                    }
                    if let Some(tr) = traces.as_mut() {
                        let x = e.x_hat;
                        let _ = writeln!(
                            tr.estimation,
                            "{t:.3},{i},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{pe:.6},{ve:.6}",
                            x[0], x[1], x[2], x[3], x[4], x[5],
                            truth.position.x, truth.position.y, truth.position.z,
                            truth.velocity.x, truth.velocity.y, truth.velocity.z
                        );
                    }
                }
            }
            times.estimation += t0.elapsed().as_secs_f64();
        }

        let mut stop = false;
        if tick % plan.control == 0 {
            for (i, ag) in agents.iter_mut().enumerate() {
                let t0 = Instant::now();
                let x0 = DVector::from_iterator(6, ag.state.position.iter().chain(ag.state.velocity.iter()).copied());
                let mut ref_err = f64::NAN;
                match ag.est {
                    Some(e) => {
                        let r0 = formation_reference(&e.x_hat, &spec, i).map_err(abort(tick, "control"))?;
                        ref_err = (r0.fixed_rows::<3>(0) - ag.state.position).norm();
                        let reference = propagate_reference(&DVector::from_column_slice(r0.as_slice()), &a_mpc, cfg.mpc.horizon)
                            .map_err(abort(tick, "control"))?;
                        let sol = solver.solve(&x0, &reference).map_err(abort(tick, "control"))?;
                        ag.accel = Vector3::new(sol.command[0], sol.command[1], sol.command[2]);
                        if let Some(y) = desired_yaw(&ag.state.position, &e.x_hat) {
                            ag.yaw_cmd = y;
                        }
                    }
                    None => {
                        // Hold station until an estimate exists.
                        ag.accel = (-ag.state.velocity).map(|c| c.clamp(-cfg.plant.a_max, cfg.plant.a_max));
                    }
                }
                if let Some(tr) = traces.as_mut() {
                    let u = ag.accel;
                    let _ = writeln!(tr.control, "{t:.3},{i},{:.6},{:.6},{:.6},{:.6},{ref_err:.6},{:.6}", u.x, u.y, u.z, u.norm(), ag.yaw_cmd);
                }
                times.control += t0.elapsed().as_secs_f64();

                let (Some(env), Some(e)) = (envelope.as_ref(), ag.est) else {
                    continue;
                };
                if stop {
                    continue;
                }
                let t0 = Instant::now();
                let gun_pose = ag.state.body_pose().compose(&gun_mount);
                let inside = env.is_capturable(&e.position(), &gun_pose);
                ag.capture_samples += 1;
                if inside {
                    ag.capturable_samples += 1;
                    match ag.open_interval.as_mut() {
                        Some(iv) => iv.end = t,
                        None => ag.open_interval = Some(Interval { start: t, end: t }),
                    }
                } else if let Some(iv) = ag.open_interval.take() {
                    ag.intervals.push(iv);
                }
                let armed = t >= cfg.capture.arm_time - 1e-9;
                let (dwell, fire) = dwell_trigger(&ag.dwell, inside && armed, t, cfg.capture.dwell_window)
                    .map_err(abort(tick, "capture"))?;
                ag.dwell = dwell;
                let fire = fire && !ag.launched;
                if let Some(tr) = traces.as_mut() {
                    let _ = writeln!(tr.capture, "{t:.3},{i},{},{:.3},{}", inside as u8, ag.dwell.duration, fire as u8);
                }
                times.capture += t0.elapsed().as_secs_f64();
                if fire {
                    ag.launched = true;
                    let p = e.position();
                    triggers.push(TriggerEvent {
                        t,
                        agent: i,
                        estimate: [p.x, p.y, p.z],
                        true_position: [truth.position.x, truth.position.y, truth.position.z],
                    });
                    log::info!("agent {i} fires at t = {t:.3} s, estimate {p:?}");
                    let t1 = Instant::now();
                    let judged = adjudicator
                        .as_ref()
                        .expect("built with capture enabled")
                        .judge(&gun_pose, &ag.state, t)
                        .map_err(abort(tick, "netdyn"))?;
                    times.adjudication += t1.elapsed().as_secs_f64();
                    if verdict.is_none() {
                        verdict = judged;
                    }
                    stop |= cfg.capture.stop_on_fire;
                }
            }
        }
        if stop || tick == plan.total {
            break;
        }

        for ag in agents.iter_mut() {
            ag.state = step_plant(&ag.state, &ag.accel, ag.yaw_cmd, cfg.timing.sim_dt, &cfg.plant).map_err(abort(tick, "world"))?;
            ag.state.gimbal = step_gimbal(&ag.state.gimbal, &ag.gimbal_rate, cfg.timing.sim_dt, cfg.camera.pitch_limit);
        }
    }

    times.total = wall.elapsed().as_secs_f64();
    let agents_metrics = agents
        .into_iter()
        .enumerate()
        .map(|(i, mut ag)| {
            if let Some(iv) = ag.open_interval.take() {
                ag.intervals.push(iv);
            }
            let k = ag.rmse_samples as f64;
            AgentMetrics {
                agent: i,
                position_rmse: (ag.rmse_samples > 0).then(|| (ag.pos_sq / k).sqrt()),
                velocity_rmse: (ag.rmse_samples > 0).then(|| (ag.vel_sq / k).sqrt()),
                gimbal_error_mean: ag.gimbal_err_sum / ag.gimbal_samples.max(1) as f64,
                gimbal_error_max: ag.gimbal_err_max,
                capturable_intervals: ag.intervals,
                capturable_fraction: ag.capturable_samples as f64 / ag.capture_samples.max(1) as f64,
            }
        })
        .collect();
    Ok(RunOutput {
        metrics: RunMetrics {
            name: cfg.name.clone(),
            seed,
            simulated: last_t,
            agents: agents_metrics,
            triggers,
            verdict,
            timings: times,
        },
        traces,
    })
}

/// `[p; v]` of a target state, as the estimator sees it.
pub fn state_vector(p: &Vector3<f64>, v: &Vector3<f64>) -> Vector6<f64> {
    Vector6::new(p.x, p.y, p.z, v.x, v.y, v.z)
}
