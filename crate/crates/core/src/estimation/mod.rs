//! Pseudo-linear bearing measurements and the distributed spatial-temporal
//! triangulation (STT) estimator.
//!
//! The estimand is `x = [p; v]`, target position and velocity in the world
//! frame. Each agent fuses its own bearing, its neighbors' bearings and its
//! neighbors' priors.

pub mod network;

use nalgebra::{Matrix3, Matrix3x6, Matrix6, SymmetricEigen, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use network::{Network, NetworkConfig, Topology};

/// `I − g gᵀ` for the normalized `g`.
pub fn projective_matrix(g: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let n = g.norm();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "bearing must be a non-zero finite vector, got {g:?}"
        )));
    }
    let u = g / n;
    Ok(Matrix3::identity() - u * u.transpose())
}

/// `z = H x` with `H = [P_g 0]` and `z = P_g s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLinearMeasurement {
    pub z: Vector3<f64>,
    pub h: Matrix3x6<f64>,
}

impl PseudoLinearMeasurement {
    pub fn residual(&self, x: &Vector6<f64>) -> Vector3<f64> {
        self.z - self.h * x
    }
}

pub fn pseudo_linear(g: &Vector3<f64>, sensor_pos: &Vector3<f64>) -> Result<PseudoLinearMeasurement> {
    let p = projective_matrix(g)?;
    let mut h = Matrix3x6::zeros();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(&p);
    Ok(PseudoLinearMeasurement {
        z: p * sensor_pos,
        h,
    })
}

/// Constant-velocity transition over `dt`.
pub fn transition(dt: f64) -> Matrix6<f64> {
    let mut a = Matrix6::identity();
    a.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(Matrix3::identity() * dt));
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SttParams {
    /// Measurement gain `c`.
    pub c: f64,
    /// Prior discount `γ₁`. Values above 1 forget old information, which the
    /// constant-velocity model needs to follow a manoeuvring target.
    pub gamma1: f64,
    pub gamma2: f64,
    /// Bearing noise σ (rad); the measurement weight is `I/σ²`.
    pub bearing_sigma: f64,
    /// Estimator period (s). Scenarios set it from their timing section.
    #[serde(skip, default = "default_stt_dt")]
    pub dt: f64,
}

fn default_stt_dt() -> f64 {
    0.02
}

impl Default for SttParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma1: 1.2,
            gamma2: 1.0,
            bearing_sigma: 0.01,
            dt: default_stt_dt(),
        }
    }
}

impl SttParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c", self.c),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("bearing_sigma", self.bearing_sigma),
            ("dt", self.dt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn r_w(&self) -> Matrix3<f64> {
        Matrix3::identity() / (self.bearing_sigma * self.bearing_sigma)
    }

    pub fn a(&self) -> Matrix6<f64> {
        transition(self.dt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorState {
    pub x_hat: Vector6<f64>,
    pub m_hat: Matrix6<f64>,
    pub step: u64,
}

impl EstimatorState {
    /// Starts at rest at `position` with `M̂ = I`.
    pub fn at(position: &Vector3<f64>) -> Self {
        let mut x_hat = Vector6::zeros();
        x_hat.fixed_rows_mut::<3>(0).copy_from(position);
        Self {
            x_hat,
            m_hat: Matrix6::identity(),
            step: 0,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.x_hat.fixed_rows::<3>(0).into()
    }

    pub fn velocity(&self) -> Vector3<f64> {
        self.x_hat.fixed_rows::<3>(3).into()
    }

    /// The prior `A x̂` this agent would share next step.
    pub fn prior(&self, params: &SttParams) -> Vector6<f64> {
        params.a() * self.x_hat
    }
}

/// What one agent broadcasts per step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharePacket {
    pub sender: usize,
    pub step: u64,
    /// World-frame unit bearing; absent when the target was not detected.
    pub bearing: Option<Vector3<f64>>,
    pub sensor_pos: Vector3<f64>,
    /// Sender's prior `x̂⁻`; absent until the sender has initialized.
    pub prior: Option<Vector6<f64>>,
}

fn spd_inverse(m: &Matrix6<f64>, what: &str) -> Result<Matrix6<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    sym.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| {
            let min_eig = SymmetricEigen::new(sym).eigenvalues.min();
            Error::Numerical {
                module: "estimation",
                detail: format!("{what} is not positive definite (min eigenvalue {min_eig:e})"),
            }
        })
}

/// One STT update for the agent owning `state`.
///
/// `own` carries this agent's bearing; its prior field is ignored since the
/// prior is recomputed from `state`. Neighbor bearings enter the measurement
/// sum and neighbor priors the consensus mean. With no bearing at all the
/// step reduces to prediction.
pub fn stt_step(
    state: &EstimatorState,
    own: &SharePacket,
    neighbors: &[SharePacket],
    params: &SttParams,
) -> Result<EstimatorState> {
    params.validate()?;
    let a = params.a();
    let r_w = params.r_w();
    let x_prior = a * state.x_hat;
    let m_prior = spd_inverse(&(a * state.m_hat * a.transpose()), "A M Aᵀ")? / params.gamma1;

    let mut e_meas = Vector6::zeros();
    let mut info = Matrix6::zeros();
    for p in std::iter::once(own).chain(neighbors) {
        if let Some(g) = p.bearing {
            let m = pseudo_linear(&g, &p.sensor_pos)?;
            let ht_r = m.h.transpose() * r_w;
            e_meas += ht_r * m.residual(&x_prior);
            info += ht_r * m.h;
        }
    }

    let priors: Vec<&Vector6<f64>> = neighbors.iter().filter_map(|p| p.prior.as_ref()).collect();
    let e_cons = if priors.is_empty() {
        Vector6::zeros()
    } else {
        priors.iter().map(|xj| *xj - x_prior).sum::<Vector6<f64>>() / priors.len() as f64
    };

    let s = info * params.c + Matrix6::identity();
    let m_hat = spd_inverse(&(m_prior * params.gamma2 + s), "γ₂M⁻ + S")?;
    let m_hat = (m_hat + m_hat.transpose()) * 0.5;
    let x_hat = x_prior + m_hat * (e_meas * params.c + e_cons);
    if !x_hat.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical {
            module: "estimation",
            detail: format!("non-finite estimate at step {}", state.step + 1),
        });
    }
    Ok(EstimatorState {
        x_hat,
        m_hat,
        step: state.step + 1,
    })
}

/// Least-squares intersection of bearing lines `(g, sensor)`.
///
/// Fails when the lines are (nearly) parallel.
pub fn triangulate(lines: &[(Vector3<f64>, Vector3<f64>)]) -> Result<Vector3<f64>> {
    let mut lhs = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for (g, s) in lines {
        let p = projective_matrix(g)?;
        lhs += p;
        rhs += p * s;
    }
    let min_eig = SymmetricEigen::new(lhs).eigenvalues.min();
    // Two lines separated by angle θ give a smallest eigenvalue of about
    // (1 − cos θ); demand roughly a degree of parallax.
    if lines.len() < 2 || min_eig < 1e-4 {
        return Err(Error::Degenerate(format!(
            "bearing lines are too close to parallel to triangulate ({} lines, min eigenvalue {min_eig:e})",
            lines.len()
        )));
    }
    lhs.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| Error::Degenerate("triangulation system is singular".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit<R: Rng>(rng: &mut R) -> Vector3<f64> {
        loop {
            let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if v.norm() > 0.1 && v.norm() < 1.0 {
                return v.normalize();
            }
        }
    }

    #[test]
    fn projector_basics() {
        let p = projective_matrix(&Vector3::x()).unwrap();
        assert_eq!(p, Matrix3::from_diagonal(&Vector3::new(0.0, 1.0, 1.0)));
        assert!(matches!(projective_matrix(&Vector3::zeros()), Err(Error::InvalidInput(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let g = unit(&mut rng);
            let mut eig: Vec<f64> = SymmetricEigen::new(projective_matrix(&g).unwrap()).eigenvalues.iter().copied().collect();
            eig.sort_by(f64::total_cmp);
            assert_close!(eig[0], 0.0, 1e-12);
            assert_close!(eig[1], 1.0, 1e-12);
            assert_close!(eig[2], 1.0, 1e-12);
        }
    }

    #[test]
    fn pseudo_linear_examples() {
        let m = pseudo_linear(&Vector3::new(0.3, 0.4, 0.5), &Vector3::zeros()).unwrap();
        assert_eq!(m.z, Vector3::zeros());
        let m = pseudo_linear(&Vector3::x(), &Vector3::zeros()).unwrap();
        let x = Vector6::new(5.0, 0.0, 0.0, 1.0, 2.0, 3.0);
        assert!(m.residual(&x).norm() < 1e-15);
    }

    /// Dense-algebra restatement of one update with c = γ₁ = γ₂ = 1 and a
    /// single agent.
    #[test]
    fn single_agent_step_matches_direct_algebra() {
        let params = SttParams {
            c: 1.0,
            gamma1: 1.0,
            gamma2: 1.0,
            bearing_sigma: 0.5,
            dt: 0.1,
        };
        let state = EstimatorState {
            x_hat: Vector6::new(1.0, 2.0, 0.5, 0.1, -0.2, 0.0),
            m_hat: Matrix6::identity() * 2.0,
            step: 3,
        };
        let sensor = Vector3::new(-3.0, 1.0, 2.0);
        let target = Vector3::new(4.0, 3.0, 1.0);
        let g = (target - sensor).normalize();
        let own = SharePacket { sender: 0, step: 4, bearing: Some(g), sensor_pos: sensor, prior: None };
        let next = stt_step(&state, &own, &[], &params).unwrap();

        let a = transition(0.1);
        let xm = a * state.x_hat;
        let mm = (a * state.m_hat * a.transpose()).try_inverse().unwrap();
        let pg = Matrix3::identity() - g * g.transpose();
        let mut h = Matrix3x6::zeros();
        h.fixed_view_mut::<3, 3>(0, 0).copy_from(&pg);
        let r = Matrix3::identity() * 4.0;
        let s = h.transpose() * r * h + Matrix6::identity();
        let m = (mm + s).try_inverse().unwrap();
        let x = xm + m * (h.transpose() * r * (pg * sensor - h * xm));
        assert!((next.x_hat - x).norm() < 1e-10);
        assert!((next.m_hat - m).norm() < 1e-10);
        assert_eq!(next.step, 4);
    }

    #[test]
    fn consistent_packets_are_a_fixed_point() {
        let params = SttParams::default();
        let state = EstimatorState::at(&Vector3::new(3.0, 1.0, 2.0));
        let prior = state.prior(&params);
        let target: Vector3<f64> = prior.fixed_rows::<3>(0).into();
        let packets: Vec<SharePacket> = (0..3)
            .map(|j| {
                let s = Vector3::new(j as f64, -2.0, 0.5 * j as f64);
                SharePacket { sender: j + 1, step: 1, bearing: Some((target - s).normalize()), sensor_pos: s, prior: Some(prior) }
            })
            .collect();
        let own_s = Vector3::new(-1.0, 4.0, 0.0);
        let own = SharePacket { sender: 0, step: 1, bearing: Some((target - own_s).normalize()), sensor_pos: own_s, prior: None };
        let next = stt_step(&state, &own, &packets, &params).unwrap();
        assert!((next.x_hat - prior).norm() < 1e-9);
    }

    #[test]
    fn prediction_only_step() {
        let params = SttParams::default();
        let mut state = EstimatorState::at(&Vector3::zeros());
        state.x_hat[3] = 1.0;
        let own = SharePacket { sender: 0, step: 1, bearing: None, sensor_pos: Vector3::zeros(), prior: None };
        let next = stt_step(&state, &own, &[], &params).unwrap();
        assert_close!(next.x_hat[0], params.dt, 1e-15);
        assert!(next.m_hat.cholesky().is_some());
    }

    #[test]
    fn non_spd_covariance_is_reported() {
        let mut state = EstimatorState::at(&Vector3::zeros());
        state.m_hat = -Matrix6::identity();
        let own = SharePacket { sender: 0, step: 1, bearing: None, sensor_pos: Vector3::zeros(), prior: None };
        let err = stt_step(&state, &own, &[], &SttParams::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical { module: "estimation", .. }), "{err}");
    }

    #[test]
    fn triangulation() {
        let t = Vector3::new(2.0, 5.0, 1.0);
        let sensors = [Vector3::zeros(), Vector3::new(4.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 3.0)];
        let lines: Vec<_> = sensors.iter().map(|s| ((t - s).normalize(), *s)).collect();
        assert!((triangulate(&lines).unwrap() - t).norm() < 1e-9);
        assert!(triangulate(&lines[..1]).is_err());
        let parallel = [(Vector3::x(), Vector3::zeros()), (Vector3::x(), Vector3::y())];
        assert!(matches!(triangulate(&parallel), Err(Error::Degenerate(_))));
    }
}
