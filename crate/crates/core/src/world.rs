//! Frames, camera geometry, target motion and the pursuer plant.
//!
//! Conventions: the world frame is ENU with gravity along -z. The body frame
//! is x-forward, y-left, z-up and the airframe is kept level, so the body
//! orientation is a pure yaw. Camera frames follow the pinhole convention:
//! optical axis +z, pixel u to the right, pixel v down.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite3, Error, Result};

/// Rigid pose, world-from-local.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: Rotation3<f64>,
}

impl Pose {
    pub fn new(position: Vector3<f64>, orientation: Rotation3<f64>) -> Self {
        Self {
            position,
            orientation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vector3::zeros(), Rotation3::identity())
    }

    /// Maps a point from the local frame into the world frame.
    pub fn transform_point(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * local + self.position
    }

    /// Maps a world point into the local frame.
    pub fn inverse_transform_point(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse() * (world - self.position)
    }

    pub fn transform_vector(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * local
    }

    pub fn inverse_transform_vector(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse() * world
    }

    /// `self ∘ other`: `other` is expressed in `self`'s local frame.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.transform_point(&other.position),
            orientation: self.orientation * other.orientation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.inverse();
        Pose {
            position: -(inv * self.position),
            orientation: inv,
        }
    }

    /// Distance of the orientation from SO(3): `‖RᵀR − I‖` plus `|det R − 1|`.
    pub fn orthonormality_defect(&self) -> f64 {
        let r = self.orientation.matrix();
        (r.transpose() * r - Matrix3::identity()).norm() + (r.determinant() - 1.0).abs()
    }
}

/// Gimbal pitch and yaw in radians. Roll is identically zero.
///
/// Yaw rotates about the body z-axis, pitch about the resulting y-axis;
/// positive pitch tilts a forward axis downward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GimbalAngles {
    pub pitch: f64,
    pub yaw: f64,
}

impl GimbalAngles {
    pub fn new(pitch: f64, yaw: f64) -> Self {
        Self { pitch, yaw }
    }

    /// Body-from-gimbal rotation.
    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), self.pitch)
    }

    /// Angles that point the gimbal's forward (+x) axis along `dir_body`.
    pub fn pointing_at(dir_body: &Vector3<f64>) -> Self {
        let horizontal = dir_body.x.hypot(dir_body.y);
        Self {
            pitch: (-dir_body.z).atan2(horizontal),
            yaw: dir_body.y.atan2(dir_body.x),
        }
    }
}

/// Maps camera-frame axes onto a forward-looking body: optical axis along
/// body +x, image right along body -y, image down along body -z.
pub fn forward_camera_mount() -> Rotation3<f64> {
    Rotation3::from_matrix_unchecked(Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    ))
}

/// Pinhole camera on a two-axis gimbal.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    /// Upper-triangular intrinsic matrix in pixels.
    pub intrinsics: Matrix3<f64>,
    /// Gimbal centre in the body frame (m).
    pub mount_offset: Vector3<f64>,
    /// Gimbal-from-camera rotation at zero gimbal angles.
    pub mount_rotation: Rotation3<f64>,
    pub width: f64,
    pub height: f64,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        let cam = Self {
            intrinsics: Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0),
            mount_offset: Vector3::zeros(),
            mount_rotation: forward_camera_mount(),
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_mount(mut self, offset: Vector3<f64>, rotation: Rotation3<f64>) -> Self {
        self.mount_offset = offset;
        self.mount_rotation = rotation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "camera focal lengths must be positive, got fx={}, fy={}",
                k[(0, 0)],
                k[(1, 1)]
            )));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(Error::InvalidConfig(
                "intrinsics must be upper triangular with K[2,2] = 1".into(),
            ));
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::InvalidConfig("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn focal(&self) -> f64 {
        0.5 * (self.intrinsics[(0, 0)] + self.intrinsics[(1, 1)])
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.intrinsics[(0, 2)], self.intrinsics[(1, 2)])
    }

    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        (0.0..self.width).contains(&u) && (0.0..self.height).contains(&v)
    }
}

impl Default for CameraModel {
    /// 640×480 with a 400 px focal length (about 77° horizontal field of view).
    fn default() -> Self {
        Self::new(400.0, 400.0, 320.0, 240.0, 640.0, 480.0).expect("default camera is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

impl TargetState {
    pub fn to_vector(&self) -> nalgebra::Vector6<f64> {
        let p = &self.position;
        let v = &self.velocity;
        nalgebra::Vector6::new(p.x, p.y, p.z, v.x, v.y, v.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PursuerState {
    pub id: usize,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub yaw: f64,
    pub gimbal: GimbalAngles,
}

impl PursuerState {
    pub fn at_rest(id: usize, position: Vector3<f64>, yaw: f64) -> Self {
        Self {
            id,
            position,
            velocity: Vector3::zeros(),
            yaw,
            gimbal: GimbalAngles::default(),
        }
    }

    pub fn body_pose(&self) -> Pose {
        Pose::new(
            self.position,
            Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantLimits {
    pub a_max: f64,
    pub v_max: f64,
    pub yaw_rate_max: f64,
}

impl Default for PlantLimits {
    fn default() -> Self {
        Self {
            a_max: 5.0,
            v_max: 10.0,
            yaw_rate_max: 2.0,
        }
    }
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

/// Advances the saturated double-integrator plant by `dt`.
pub fn step_plant(
    state: &PursuerState,
    accel: &Vector3<f64>,
    yaw_cmd: f64,
    dt: f64,
    limits: &PlantLimits,
) -> Result<PursuerState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    ensure_finite3(accel, "acceleration command")?;
    if !yaw_cmd.is_finite() {
        return Err(Error::InvalidInput("yaw command is not finite".into()));
    }

    let a = accel.map(|c| c.clamp(-limits.a_max, limits.a_max));
    let position = state.position + state.velocity * dt + a * (0.5 * dt * dt);
    let mut velocity = state.velocity + a * dt;
    let speed = velocity.norm();
    if speed > limits.v_max {
        velocity *= limits.v_max / speed;
    }

    let max_turn = limits.yaw_rate_max * dt;
    let turn = wrap_angle(yaw_cmd - state.yaw).clamp(-max_turn, max_turn);

    Ok(PursuerState {
        position,
        velocity,
        yaw: wrap_angle(state.yaw + turn),
        ..*state
    })
}

/// Point on a horizontal circle traversed counter-clockwise at constant speed,
/// starting at `center + (radius, 0, altitude)`.
pub fn circle_target(
    t: f64,
    radius: f64,
    speed: f64,
    center: &Vector3<f64>,
    altitude: f64,
) -> Result<TargetState> {
    if !(radius > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "circle radius must be positive, got {radius}"
        )));
    }
    if !(speed >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "circle speed must be non-negative, got {speed}"
        )));
    }
    let omega = speed / radius;
    let (s, c) = (omega * t).sin_cos();
    Ok(TargetState {
        position: center + Vector3::new(radius * c, radius * s, altitude),
        velocity: Vector3::new(-speed * s, speed * c, 0.0),
    })
}

/// Target trajectory families available to scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetMotion {
    Circle {
        radius: f64,
        speed: f64,
        center: [f64; 3],
        altitude: f64,
    },
    Static {
        position: [f64; 3],
    },
    Linear {
        start: [f64; 3],
        velocity: [f64; 3],
    },
}

impl TargetMotion {
    pub fn validate(&self) -> Result<()> {
        match self {
            TargetMotion::Circle { radius, speed, .. } => {
                circle_target(0.0, *radius, *speed, &Vector3::zeros(), 0.0).map(|_| ())
            }
            TargetMotion::Static { position } => {
                ensure_finite3(&Vector3::from(*position), "static target position")
                    .map_err(|e| Error::InvalidConfig(e.to_string()))
            }
            TargetMotion::Linear { start, velocity } => {
                ensure_finite3(&Vector3::from(*start), "linear target start")
                    .and_then(|_| {
                        ensure_finite3(&Vector3::from(*velocity), "linear target velocity")
                    })
                    .map_err(|e| Error::InvalidConfig(e.to_string()))
            }
        }
    }

    pub fn state_at(&self, t: f64) -> Result<TargetState> {
        match self {
            TargetMotion::Circle {
                radius,
                speed,
                center,
                altitude,
            } => circle_target(t, *radius, *speed, &Vector3::from(*center), *altitude),
            TargetMotion::Static { position } => Ok(TargetState {
                position: Vector3::from(*position),
                velocity: Vector3::zeros(),
            }),
            TargetMotion::Linear { start, velocity } => {
                let v = Vector3::from(*velocity);
                Ok(TargetState {
                    position: Vector3::from(*start) + v * t,
                    velocity: v,
                })
            }
        }
    }
}

/// World pose of the camera: body pose, then mount offset, then gimbal yaw
/// and pitch, then the fixed camera mount rotation.
pub fn camera_pose(pursuer: &PursuerState, cam: &CameraModel) -> Pose {
    let body = pursuer.body_pose();
    Pose {
        position: body.transform_point(&cam.mount_offset),
        orientation: body.orientation * pursuer.gimbal.rotation() * cam.mount_rotation,
    }
}
