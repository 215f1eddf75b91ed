//! Scenario description, presets and TOML loading.

use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::capture::EnvelopeConfig;
use crate::control::{FormationSpec, MpcConfig};
use crate::error::{Error, Result};
use crate::estimation::{NetworkConfig, SttParams, Topology};
use crate::netdyn::{LaunchParams, NetMaterials, NetParams};
use crate::perception::{DetectorConfig, GimbalPidConfig};
use crate::world::{CameraModel, PlantLimits, Pose, TargetMotion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Timing {
    /// Plant integration step (s).
    pub sim_dt: f64,
    pub estimator_dt: f64,
    pub control_dt: f64,
    pub gimbal_dt: f64,
    pub duration: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            sim_dt: 1e-3,
            estimator_dt: 0.02,
            control_dt: 0.02,
            gimbal_dt: 0.01,
            duration: 30.0,
        }
    }
}

/// Tick counts derived from [`Timing`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickPlan {
    pub estimator: u64,
    pub control: u64,
    pub gimbal: u64,
    pub total: u64,
}

impl Timing {
    fn ticks(&self, period: f64, name: &str) -> Result<u64> {
        let n = (period / self.sim_dt).round();
        if !(n >= 1.0) || (n * self.sim_dt - period).abs() > 1e-9 * period.max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "{name} = {period} is not a positive integer multiple of sim_dt = {}",
                self.sim_dt
            )));
        }
        Ok(n as u64)
    }

    pub fn plan(&self) -> Result<TickPlan> {
        if !(self.sim_dt > 0.0 && self.duration > 0.0) {
            return Err(Error::InvalidConfig("sim_dt and duration must be positive".into()));
        }
        Ok(TickPlan {
            estimator: self.ticks(self.estimator_dt, "estimator_dt")?,
            control: self.ticks(self.control_dt, "control_dt")?,
            gimbal: self.ticks(self.gimbal_dt, "gimbal_dt")?,
            total: (self.duration / self.sim_dt).round() as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FormationConfig {
    pub radius: f64,
    pub altitude_offset: f64,
    /// Explicit phases (rad); evenly spaced when absent.
    pub phase_offsets: Option<Vec<f64>>,
}

impl Default for FormationConfig {
    fn default() -> Self {
        Self {
            radius: 3.0,
            altitude_offset: 3.0,
            phase_offsets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// True bearing noise σ_g (rad), applied as a random tilt of the bearing.
    pub bearing_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            bearing_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
    /// Gimbal centre in the body frame (m).
    pub mount_offset: [f64; 3],
    /// Pitch travel limit (rad).
    pub pitch_limit: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            width: 640.0,
            height: 480.0,
            mount_offset: [0.0, 0.0, -0.1],
            pitch_limit: 1.5,
        }
    }
}

impl CameraConfig {
    pub fn model(&self) -> Result<CameraModel> {
        let cam = CameraModel::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)?;
        let rot = cam.mount_rotation;
        Ok(cam.with_mount(Vector3::from(self.mount_offset), rot))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GunConfig {
    /// Muzzle position in the body frame (m).
    pub offset: [f64; 3],
    /// Fixed downward tilt of the gun axis (rad, positive down).
    pub pitch: f64,
}

impl Default for GunConfig {
    fn default() -> Self {
        Self {
            offset: [0.2, 0.0, -0.15],
            pitch: std::f64::consts::FRAC_PI_4,
        }
    }
}

impl GunConfig {
    /// Body-from-gun pose.
    pub fn mount(&self) -> Pose {
        Pose::new(
            Vector3::from(self.offset),
            Rotation3::from_axis_angle(&Vector3::y_axis(), self.pitch),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub nodes_per_side: usize,
    pub materials: NetMaterials,
    pub params: NetParams,
    /// Integrator step for adjudication rollouts (s).
    pub dt: f64,
    /// Adjudication rollout length (s).
    pub horizon: f64,
    /// Mouth-closure fraction for the enclosure oracle.
    pub closure_fraction: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            nodes_per_side: 19,
            materials: NetMaterials::default(),
            params: NetParams::default(),
            dt: 1e-4,
            horizon: 0.6,
            closure_fraction: 0.5,
        }
    }
}

/// How a fired launch is judged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adjudication {
    /// Full net rollout from the firing pursuer's state against the true
    /// target path.
    #[default]
    Full,
    /// A cached rollout from a gun at rest, with the target path expressed
    /// relative to the gun: enclosure geometry only.
    Geometric,
    /// Record the trigger, skip the verdict.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptureConfig {
    pub enabled: bool,
    pub dwell_window: f64,
    /// Capture checks before this time (s) count as out of region, so the
    /// earliest launch is `arm_time` plus the dwell window, less one period.
    pub arm_time: f64,
    pub adjudication: Adjudication,
    /// End the run at the first trigger.
    pub stop_on_fire: bool,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            dwell_window: crate::capture::DWELL_WINDOW,
            arm_time: 0.0,
            adjudication: Adjudication::Full,
            stop_on_fire: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Pursuers start at their formation slots around the true initial
    /// target, displaced by this distance in a random direction (m).
    pub position_error: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            position_error: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// RMSE is taken over the final window of the run (s).
    pub rmse_window: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { rmse_window: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub n_pursuers: usize,
    pub timing: Timing,
    pub formation: FormationConfig,
    pub target: TargetMotion,
    pub noise: NoiseConfig,
    pub detector: DetectorConfig,
    pub camera: CameraConfig,
    pub gimbal: GimbalPidConfig,
    pub network: NetworkConfig,
    pub stt: SttParams,
    pub mpc: MpcConfig,
    pub plant: PlantLimits,
    pub gun: GunConfig,
    pub launch: LaunchParams,
    pub envelope: EnvelopeConfig,
    pub net: NetConfig,
    pub capture: CaptureConfig,
    pub init: InitConfig,
    pub metrics: MetricsConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::sim4()
    }
}

impl ScenarioConfig {
    /// Four pursuers around a target circling at 3 m/s on a 10 m radius.
    pub fn sim4() -> Self {
        Self {
            name: "sim4".into(),
            seed: 1,
            n_pursuers: 4,
            timing: Timing::default(),
            formation: FormationConfig::default(),
            target: TargetMotion::Circle {
                radius: 10.0,
                speed: 3.0,
                center: [0.0, 0.0, 0.0],
                altitude: 10.0,
            },
            noise: NoiseConfig::default(),
            detector: DetectorConfig::default(),
            camera: CameraConfig::default(),
            gimbal: GimbalPidConfig::default(),
            network: NetworkConfig {
                topology: Topology::Ring,
                ..NetworkConfig::default()
            },
            stt: SttParams::default(),
            mpc: MpcConfig::default(),
            plant: PlantLimits::default(),
            gun: GunConfig::default(),
            launch: LaunchParams::default(),
            envelope: EnvelopeConfig::default(),
            net: NetConfig::default(),
            capture: CaptureConfig {
                // Launch at 20.50 s when the target is held throughout.
                arm_time: 20.02,
                ..CaptureConfig::default()
            },
            init: InitConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }

    /// Three pursuers, target at 4 m/s on a 10 m circle.
    pub fn exp3() -> Self {
        Self {
            name: "exp3".into(),
            n_pursuers: 3,
            target: TargetMotion::Circle {
                radius: 10.0,
                speed: 4.0,
                center: [0.0, 0.0, 0.0],
                altitude: 10.0,
            },
            ..Self::sim4()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "sim4" => Ok(Self::sim4()),
            "exp3" => Ok(Self::exp3()),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset `{other}` (known: sim4, exp3)"
            ))),
        }
    }

    pub fn formation_spec(&self) -> FormationSpec {
        let mut spec = FormationSpec::uniform(
            self.n_pursuers,
            self.formation.radius,
            self.formation.altitude_offset,
        );
        if let Some(p) = &self.formation.phase_offsets {
            spec.phase_offsets = p.clone();
        }
        spec
    }

    /// Estimator parameters with the period taken from the timing section.
    pub fn stt_params(&self) -> SttParams {
        SttParams {
            dt: self.timing.estimator_dt,
            ..self.stt
        }
    }

    /// Checks everything that can be checked before the first tick.
    pub fn validate(&self) -> Result<TickPlan> {
        if self.n_pursuers == 0 {
            return Err(Error::InvalidConfig("n_pursuers must be at least 1".into()));
        }
        let plan = self.timing.plan()?;
        if plan.estimator % plan.gimbal != 0 {
            return Err(Error::InvalidConfig(
                "estimator_dt must be a multiple of gimbal_dt".into(),
            ));
        }
        if !(self.noise.bearing_sigma >= 0.0) {
            return Err(Error::InvalidConfig("bearing_sigma must be ≥ 0".into()));
        }
        self.formation_spec().validate()?;
        self.target.validate()?;
        self.detector.validate()?;
        self.camera.model()?;
        if !(self.camera.pitch_limit > 0.0) {
            return Err(Error::InvalidConfig("camera pitch_limit must be positive".into()));
        }
        self.network.topology.validate(self.n_pursuers)?;
        if !(0.0..=1.0).contains(&self.network.drop_prob) {
            return Err(Error::InvalidConfig("drop_prob must lie in [0, 1]".into()));
        }
        self.stt_params().validate()?;
        crate::control::MpcProblem::from_config(&self.mpc, 3, self.plant.a_max).validate()?;
        if !(self.plant.a_max > 0.0 && self.plant.v_max > 0.0 && self.plant.yaw_rate_max > 0.0) {
            return Err(Error::InvalidConfig("plant limits must be positive".into()));
        }
        self.launch.validate()?;
        self.envelope.validate()?;
        self.net.params.validate()?;
        if self.net.nodes_per_side < 2 || !(self.net.dt > 0.0 && self.net.horizon > 0.0) {
            return Err(Error::InvalidConfig(
                "net nodes_per_side must be ≥ 2, dt and horizon positive".into(),
            ));
        }
        if !(self.capture.dwell_window > 0.0 && self.metrics.rmse_window > 0.0) {
            return Err(Error::InvalidConfig(
                "dwell_window and rmse_window must be positive".into(),
            ));
        }
        Ok(plan)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| line_col(text, s.start))
                .unwrap_or((0, 0));
            Error::ConfigParse {
                line,
                column,
                message: e.message().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(format!("cannot serialize config: {e}")))
    }
}

/// 1-based line and column of byte `offset`.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ScenarioConfig::from_toml_str(&text)
}
