//! Synthetic detections, pixel/bearing conversion, neighbor rejection and
//! gimbal tracking.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{CameraModel, GimbalAngles, Pose};

/// Depth below which a point counts as behind the camera.
const MIN_DEPTH: f64 = 1e-9;

/// One bounding box from the (synthetic) detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// Box centre (px).
    pub center: Vector2<f64>,
    pub width: f64,
    pub height: f64,
    pub confidence: f64,
    /// Ground-truth label, only for metrics inside the crate.
    pub(crate) is_outlier: bool,
}

impl Detection {
    pub fn new(center: Vector2<f64>, width: f64, height: f64, confidence: f64) -> Self {
        Self {
            center,
            width,
            height,
            confidence,
            is_outlier: false,
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.center.x - 0.5 * self.width,
            self.center.x + 0.5 * self.width,
            self.center.y - 0.5 * self.height,
            self.center.y + 0.5 * self.height,
        )
    }

    /// Fraction of this box's area covered by `other`.
    pub fn overlap_ratio(&self, other: &Detection) -> f64 {
        let (ax0, ax1, ay0, ay1) = self.bounds();
        let (bx0, bx1, by0, by1) = other.bounds();
        let w = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let h = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        w * h / (self.width * self.height)
    }
}

/// Unit line-of-sight in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bearing {
    pub direction: Vector3<f64>,
    pub timestamp: f64,
    pub agent: usize,
}

/// Settings of the synthetic detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Gaussian pixel noise on the box centre (px).
    pub noise_px: f64,
    /// Physical size of the target and of every pursuer airframe (m).
    pub target_diameter: f64,
    /// Probability per frame of one spurious box anywhere in the image.
    pub outlier_rate: f64,
    /// Overlap ratio above which a box is blamed on a neighbor.
    pub overlap_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            noise_px: 0.0,
            target_diameter: 0.5,
            outlier_rate: 0.0,
            overlap_threshold: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_px >= 0.0 && self.target_diameter > 0.0) {
            return Err(Error::InvalidConfig(
                "noise_px must be ≥ 0 and target_diameter > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::InvalidConfig("outlier_rate must lie in [0, 1]".into()));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return Err(Error::InvalidConfig(
                "overlap_threshold must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Pinhole projection of a world point; `None` behind the camera.
fn project_point(p: &Vector3<f64>, cam_pose: &Pose, cam: &CameraModel) -> Option<(Vector2<f64>, f64)> {
    let pc = cam_pose.inverse_transform_point(p);
    let range = pc.norm();
    if range == 0.0 {
        return None;
    }
    let g = pc / range;
    if g.z <= MIN_DEPTH {
        return None;
    }
    let px = cam.intrinsics * (g / g.z);
    Some((Vector2::new(px.x, px.y), range))
}

fn square_box(center: Vector2<f64>, cam: &CameraModel, diameter: f64, range: f64) -> Detection {
    let side = cam.focal() * diameter / range;
    Detection::new(center, side, side, 1.0)
}

/// Detector output for one object at `position`, or `None` when it is behind
/// the camera or its (noisy) centre falls outside the image.
pub fn synthesize_detection<R: Rng + ?Sized>(
    position: &Vector3<f64>,
    cam_pose: &Pose,
    cam: &CameraModel,
    noise_px: f64,
    diameter: f64,
    rng: &mut R,
) -> Option<Detection> {
    // Draw first so the stream advances the same way whether or not the
    // target is visible.
    let (nu, nv) = if noise_px > 0.0 {
        let n = Normal::new(0.0, noise_px).expect("noise_px is finite and positive");
        (n.sample(rng), n.sample(rng))
    } else {
        (0.0, 0.0)
    };
    let confidence = rng.random_range(0.5..1.0);
    let (center, range) = project_point(position, cam_pose, cam)?;
    let center = center + Vector2::new(nu, nv);
    if !cam.in_bounds(center.x, center.y) {
        return None;
    }
    Some(Detection {
        confidence,
        ..square_box(center, cam, diameter, range)
    })
}

/// All boxes in one frame: the target, every visible neighbor airframe and,
/// with probability `outlier_rate`, one spurious box.
pub fn synthesize_frame<R: Rng + ?Sized>(
    target: &Vector3<f64>,
    neighbors: &[Vector3<f64>],
    cam_pose: &Pose,
    cam: &CameraModel,
    cfg: &DetectorConfig,
    rng: &mut R,
) -> Vec<Detection> {
    let mut out = Vec::new();
    out.extend(synthesize_detection(
        target,
        cam_pose,
        cam,
        cfg.noise_px,
        cfg.target_diameter,
        rng,
    ));
    for n in neighbors {
        if let Some(mut d) =
            synthesize_detection(n, cam_pose, cam, cfg.noise_px, cfg.target_diameter, rng)
        {
            d.is_outlier = true;
            out.push(d);
        }
    }
    let spurious = rng.random_bool(cfg.outlier_rate);
    let (u, v, side, conf) = (
        rng.random_range(0.0..cam.width),
        rng.random_range(0.0..cam.height),
        rng.random_range(4.0..40.0),
        rng.random_range(0.5..1.0),
    );
    if spurious {
        out.push(Detection {
            is_outlier: true,
            ..Detection::new(Vector2::new(u, v), side, side, conf)
        });
    }
    out
}

/// Back-projects a box centre to a world-frame unit bearing.
pub fn pixel_to_bearing(
    det: &Detection,
    cam: &CameraModel,
    cam_pose: &Pose,
    timestamp: f64,
    agent: usize,
) -> Result<Bearing> {
    cam.validate()?;
    let k_inv = cam
        .intrinsics
        .try_inverse()
        .ok_or_else(|| Error::InvalidConfig("camera intrinsics are singular".into()))?;
    let ray = k_inv * Vector3::new(det.center.x, det.center.y, 1.0);
    Ok(Bearing {
        direction: cam_pose.transform_vector(&ray).normalize(),
        timestamp,
        agent,
    })
}

/// Image position of a neighbor; `None` when it is behind the camera.
pub fn project_neighbor(
    neighbor_pos: &Vector3<f64>,
    cam_pose: &Pose,
    cam: &CameraModel,
) -> Option<Vector2<f64>> {
    project_point(neighbor_pos, cam_pose, cam).map(|(c, _)| c)
}

/// Drops every box that a projected neighbor covers by more than
/// `overlap_threshold` of its area and returns the most confident survivor.
///
/// A neighbor projects to a square of side `focal · diameter / range`.
pub fn eliminate_neighbors(
    detections: &[Detection],
    neighbors: &[Vector3<f64>],
    cam_pose: &Pose,
    cam: &CameraModel,
    neighbor_diameter: f64,
    overlap_threshold: f64,
) -> Result<Option<Detection>> {
    if !(overlap_threshold > 0.0 && overlap_threshold <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "overlap threshold must lie in (0, 1], got {overlap_threshold}"
        )));
    }
    let masks: Vec<Detection> = neighbors
        .iter()
        .filter_map(|n| project_point(n, cam_pose, cam))
        .map(|(c, range)| square_box(c, cam, neighbor_diameter, range))
        .collect();
    let mut best: Option<Detection> = None;
    for d in detections {
        if masks.iter().any(|m| d.overlap_ratio(m) > overlap_threshold) {
            continue;
        }
        if best.is_none_or(|b| d.confidence > b.confidence) {
            best = Some(*d);
        }
    }
    Ok(best)
}

/// Gimbal angle error that would centre the pixel `center`.
pub fn pixel_angle_error(center: &Vector2<f64>, cam: &CameraModel) -> GimbalAngles {
    let (cx, cy) = cam.principal_point();
    GimbalAngles {
        pitch: ((center.y - cy) / cam.intrinsics[(1, 1)]).atan(),
        yaw: -((center.x - cx) / cam.intrinsics[(0, 0)]).atan(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GimbalPidConfig {
    pub pitch: PidGains,
    pub yaw: PidGains,
    /// Bound on each integrator state (rad·s).
    pub integrator_limit: f64,
    /// Gimbal rate limit (rad/s).
    pub rate_limit: f64,
}

impl Default for GimbalPidConfig {
    fn default() -> Self {
        let g = PidGains {
            kp: 6.0,
            ki: 0.5,
            kd: 0.05,
        };
        Self {
            pitch: g,
            yaw: g,
            integrator_limit: 0.5,
            rate_limit: 3.0,
        }
    }
}

/// Per-agent PID memory.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PidState {
    pub integral: GimbalAngles,
    pub prev_error: Option<GimbalAngles>,
}

fn pid_axis(e: f64, prev: Option<f64>, integral: &mut f64, g: &PidGains, cfg: &GimbalPidConfig, dt: f64) -> f64 {
    *integral = (*integral + e * dt).clamp(-cfg.integrator_limit, cfg.integrator_limit);
    let de = prev.map_or(0.0, |p| (e - p) / dt);
    (g.kp * e + g.ki * *integral + g.kd * de).clamp(-cfg.rate_limit, cfg.rate_limit)
}

/// One PID update per axis; returns pitch and yaw rate commands (rad/s).
pub fn gimbal_pid_step(
    error: &GimbalAngles,
    cfg: &GimbalPidConfig,
    state: &PidState,
    dt: f64,
) -> Result<(GimbalAngles, PidState)> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let mut next = *state;
    let pitch = pid_axis(
        error.pitch,
        state.prev_error.map(|p| p.pitch),
        &mut next.integral.pitch,
        &cfg.pitch,
        cfg,
        dt,
    );
    let yaw = pid_axis(
        error.yaw,
        state.prev_error.map(|p| p.yaw),
        &mut next.integral.yaw,
        &cfg.yaw,
        cfg,
        dt,
    );
    next.prev_error = Some(*error);
    Ok((GimbalAngles { pitch, yaw }, next))
}

/// Integrates gimbal rates; pitch stays within ±`pitch_limit`.
pub fn step_gimbal(angles: &GimbalAngles, rates: &GimbalAngles, dt: f64, pitch_limit: f64) -> GimbalAngles {
    GimbalAngles {
        pitch: (angles.pitch + rates.pitch * dt).clamp(-pitch_limit, pitch_limit),
        yaw: crate::world::wrap_angle(angles.yaw + rates.yaw * dt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Rotation3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Camera looking along world +z with image axes on world x and y.
    fn axis_pose() -> Pose {
        Pose::identity()
    }

    /// Independent pinhole projection written out by hand.
    fn pinhole(p: &Vector3<f64>, fx: f64, fy: f64, cx: f64, cy: f64) -> Vector2<f64> {
        Vector2::new(fx * p.x / p.z + cx, fy * p.y / p.z + cy)
    }

    fn cam() -> CameraModel {
        CameraModel::new(410.0, 390.0, 300.0, 250.0, 640.0, 480.0).unwrap()
    }

    #[test]
    fn on_axis_target_hits_principal_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = synthesize_detection(&Vector3::new(0.0, 0.0, 7.0), &axis_pose(), &cam(), 0.0, 0.5, &mut rng)
            .unwrap();
        assert_close!(d.center.x, 300.0, 1e-12);
        assert_close!(d.center.y, 250.0, 1e-12);
        assert_close!(d.width, 400.0 * 0.5 / 7.0, 1e-12);
        assert!(synthesize_detection(&Vector3::new(0.0, 0.0, -7.0), &axis_pose(), &cam(), 0.0, 0.5, &mut rng)
            .is_none());
    }

    #[test]
    fn projection_matches_hand_oracle() {
        let pose = Pose::new(
            Vector3::new(0.3, -0.2, 1.0),
            Rotation3::from_euler_angles(0.1, -0.2, 0.3),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let local = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(3.0..9.0));
            let world = pose.transform_point(&local);
            let expect = pinhole(&local, 410.0, 390.0, 300.0, 250.0);
            let got = project_neighbor(&world, &pose, &cam()).unwrap();
            assert!((got - expect).norm() < 1e-9);
            if let Some(d) = synthesize_detection(&world, &pose, &cam(), 0.0, 0.5, &mut rng) {
                assert!((d.center - expect).norm() < 1e-9);
            }
        }
        assert!(project_neighbor(&pose.transform_point(&Vector3::new(0.0, 0.0, -1.0)), &pose, &cam()).is_none());
    }

    #[test]
    fn principal_point_is_optical_axis() {
        let d = Detection::new(Vector2::new(300.0, 250.0), 10.0, 10.0, 1.0);
        let b = pixel_to_bearing(&d, &cam(), &axis_pose(), 0.0, 0).unwrap();
        assert!((b.direction - Vector3::z()).norm() < 1e-15);
    }

    #[test]
    fn yawed_camera_rotates_bearing() {
        let d = Detection::new(Vector2::new(420.0, 130.0), 10.0, 10.0, 1.0);
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
        let b0 = pixel_to_bearing(&d, &cam(), &axis_pose(), 0.0, 0).unwrap();
        let b1 = pixel_to_bearing(&d, &cam(), &Pose::new(Vector3::zeros(), r), 0.0, 0).unwrap();
        assert!((r * b0.direction - b1.direction).norm() < 1e-12);
        assert!((b1.direction.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_intrinsics_rejected() {
        let mut c = cam();
        c.intrinsics = Matrix3::zeros();
        let d = Detection::new(Vector2::new(1.0, 1.0), 1.0, 1.0, 1.0);
        assert!(matches!(pixel_to_bearing(&d, &c, &axis_pose(), 0.0, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn neighbor_on_detection_is_removed() {
        let n = Vector3::new(0.5, 0.2, 6.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = synthesize_detection(&n, &axis_pose(), &cam(), 0.0, 0.5, &mut rng).unwrap();
        assert_eq!(eliminate_neighbors(&[d], &[n], &axis_pose(), &cam(), 0.5, 0.5).unwrap(), None);
        assert_eq!(eliminate_neighbors(&[d], &[], &axis_pose(), &cam(), 0.5, 0.5).unwrap(), Some(d));
        assert!(eliminate_neighbors(&[d], &[], &axis_pose(), &cam(), 0.5, 0.0).is_err());
    }

    #[test]
    fn partial_overlap_hand_computed() {
        // Neighbor on the axis at 4 m with 0.5 m diameter: a 50 px square
        // centred on the principal point (focal = 400).
        let c = cam();
        let n = Vector3::new(0.0, 0.0, 4.0);
        // 20×20 box spanning u ∈ [309, 329] against a mask edge at 325:
        // 16 of its 20 columns covered, overlap 0.8.
        let overlapping = Detection::new(Vector2::new(300.0 + 25.0 - 6.0, 250.0), 20.0, 20.0, 0.99);
        let clear = Detection::new(Vector2::new(100.0, 100.0), 20.0, 20.0, 0.6);
        let mask = square_box(Vector2::new(300.0, 250.0), &c, 0.5, 4.0);
        assert_close!(overlapping.overlap_ratio(&mask), 0.8, 1e-12);
        let got = eliminate_neighbors(&[overlapping, clear], &[n], &axis_pose(), &c, 0.5, 0.5).unwrap();
        assert_eq!(got, Some(clear));
        let got = eliminate_neighbors(&[overlapping, clear], &[n], &axis_pose(), &c, 0.5, 0.9).unwrap();
        assert_eq!(got, Some(overlapping));
    }

    #[test]
    fn outliers_are_injected_at_full_rate() {
        let cfg = DetectorConfig {
            outlier_rate: 1.0,
            ..DetectorConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame = synthesize_frame(&Vector3::new(0.0, 0.0, 5.0), &[], &axis_pose(), &cam(), &cfg, &mut rng);
        assert_eq!(frame.len(), 2);
        assert!(!frame[0].is_outlier && frame[1].is_outlier);
    }

    #[test]
    fn pid_basics() {
        let cfg = GimbalPidConfig::default();
        let (u, _) = gimbal_pid_step(&GimbalAngles::default(), &cfg, &PidState::default(), 0.01).unwrap();
        assert_eq!(u, GimbalAngles::default());
        let p_only = GimbalPidConfig {
            pitch: PidGains { kp: 2.0, ki: 0.0, kd: 0.0 },
            yaw: PidGains { kp: 3.0, ki: 0.0, kd: 0.0 },
            ..cfg
        };
        let mut st = PidState::default();
        for _ in 0..5 {
            let (u, s) = gimbal_pid_step(&GimbalAngles::new(0.1, -0.2), &p_only, &st, 0.01).unwrap();
            st = s;
            assert_close!(u.pitch, 0.2, 1e-15);
            assert_close!(u.yaw, -0.6, 1e-15);
        }
        let (u, s) = gimbal_pid_step(&GimbalAngles::new(10.0, 0.0), &cfg, &PidState::default(), 0.01).unwrap();
        assert_eq!(u.pitch, cfg.rate_limit);
        let mut s = s;
        for _ in 0..1000 {
            s = gimbal_pid_step(&GimbalAngles::new(10.0, 0.0), &cfg, &s, 0.01).unwrap().1;
        }
        assert_eq!(s.integral.pitch, cfg.integrator_limit);
        assert!(gimbal_pid_step(&GimbalAngles::default(), &cfg, &PidState::default(), 0.0).is_err());
    }

    #[test]
    fn pi_loop_removes_step_error() {
        // s² + kp·s + ki with a double root at −5.
        let cfg = GimbalPidConfig {
            pitch: PidGains { kp: 10.0, ki: 25.0, kd: 0.0 },
            yaw: PidGains { kp: 10.0, ki: 25.0, kd: 0.0 },
            ..GimbalPidConfig::default()
        };
        let reference = GimbalAngles::new(0.4, -0.7);
        let mut angles = GimbalAngles::default();
        let mut st = PidState::default();
        let dt = 0.01;
        for _ in 0..500 {
            let err = GimbalAngles::new(reference.pitch - angles.pitch, reference.yaw - angles.yaw);
            let (rate, s) = gimbal_pid_step(&err, &cfg, &st, dt).unwrap();
            st = s;
            angles = step_gimbal(&angles, &rate, dt, 1.5);
        }
        assert!((angles.pitch - reference.pitch).abs() < 1e-4);
        assert!((angles.yaw - reference.yaw).abs() < 1e-4);
    }

    #[test]
    fn pixel_error_recenters_forward_camera() {
        // With the forward mount, a target up-left of centre needs positive
        // yaw and negative pitch.
        let c = CameraModel::default();
        let e = pixel_angle_error(&Vector2::new(200.0, 100.0), &c);
        assert!(e.yaw > 0.0 && e.pitch < 0.0);
    }
}
