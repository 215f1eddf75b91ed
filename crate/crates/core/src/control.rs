//! Surrounding-formation references and closed-form MPC.
//!
//! The MPC works in any spatial dimension `d` (3 in the simulator). The state
//! is `[p; v]` of length `2d`, the input an acceleration of length `d`, and
//! the model the exact discretization of a double integrator.

use std::ops::AddAssign;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormationSpec {
    pub n_agents: usize,
    /// Horizontal distance from the target (m).
    pub radius: f64,
    /// Height above the target (m).
    pub altitude_offset: f64,
    pub phase_offsets: Vec<f64>,
}

impl FormationSpec {
    /// `n` agents evenly spaced on the circle, agent 0 at phase 0.
    pub fn uniform(n: usize, radius: f64, altitude_offset: f64) -> Self {
        Self {
            n_agents: n,
            radius,
            altitude_offset,
            phase_offsets: (0..n)
                .map(|i| std::f64::consts::TAU * i as f64 / n as f64)
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) || !self.altitude_offset.is_finite() {
            return Err(Error::InvalidConfig(
                "formation radius must be positive and altitude_offset finite".into(),
            ));
        }
        if self.phase_offsets.len() != self.n_agents {
            return Err(Error::InvalidConfig(format!(
                "{} phase offsets for {} agents",
                self.phase_offsets.len(),
                self.n_agents
            )));
        }
        for (i, a) in self.phase_offsets.iter().enumerate() {
            for b in &self.phase_offsets[..i] {
                if crate::world::wrap_angle(a - b).abs() < 1e-9 {
                    return Err(Error::InvalidConfig(format!(
                        "phase offsets {a} and {b} coincide modulo 2π"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Offset of `agent` from the target.
    pub fn offset(&self, agent: usize) -> Vector3<f64> {
        let (s, c) = self.phase_offsets[agent].sin_cos();
        Vector3::new(self.radius * c, self.radius * s, self.altitude_offset)
    }
}

/// Desired state of `agent`: the estimate shifted by the agent's offset,
/// with the estimate's velocity.
pub fn formation_reference(
    target_est: &Vector6<f64>,
    spec: &FormationSpec,
    agent: usize,
) -> Result<Vector6<f64>> {
    if agent >= spec.n_agents || agent >= spec.phase_offsets.len() {
        return Err(Error::InvalidInput(format!(
            "agent {agent} outside a formation of {}",
            spec.n_agents
        )));
    }
    let mut x = *target_est;
    x.fixed_rows_mut::<3>(0).add_assign(&spec.offset(agent));
    Ok(x)
}

/// Double-integrator `A` for dimension `d`.
pub fn double_integrator_a(d: usize, dt: f64) -> DMatrix<f64> {
    let mut a = DMatrix::identity(2 * d, 2 * d);
    for i in 0..d {
        a[(i, d + i)] = dt;
    }
    a
}

/// Double-integrator `B` for dimension `d` (zero-order-hold acceleration).
pub fn double_integrator_b(d: usize, dt: f64) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(2 * d, d);
    for i in 0..d {
        b[(i, i)] = 0.5 * dt * dt;
        b[(d + i, i)] = dt;
    }
    b
}

/// `x(1..=K)` with `x(k+1) = A x(k)`.
pub fn propagate_reference(x0: &DVector<f64>, a: &DMatrix<f64>, k: usize) -> Result<Vec<DVector<f64>>> {
    if k == 0 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    if a.nrows() != x0.len() || !a.is_square() {
        return Err(Error::InvalidConfig("transition and state sizes differ".into()));
    }
    let mut out = Vec::with_capacity(k);
    let mut x = x0.clone();
    for _ in 0..k {
        x = a * x;
        out.push(x.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal of `Q`.
    pub q: f64,
    /// Diagonal of `R_u`.
    pub r_u: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.1,
            q: 1.0,
            r_u: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    pub horizon: usize,
    pub dt: f64,
    /// Position weight, `d × d`, positive semidefinite.
    pub q: DMatrix<f64>,
    /// Input weight, `d × d`, positive definite.
    pub r_u: DMatrix<f64>,
    pub a_max: f64,
}

impl MpcProblem {
    pub fn from_config(cfg: &MpcConfig, d: usize, a_max: f64) -> Self {
        Self {
            horizon: cfg.horizon,
            dt: cfg.dt,
            q: DMatrix::identity(d, d) * cfg.q,
            r_u: DMatrix::identity(d, d) * cfg.r_u,
            a_max,
        }
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.horizon == 0 || !(self.dt > 0.0) || !(self.a_max > 0.0) {
            return Err(Error::InvalidConfig(
                "MPC horizon, dt and a_max must be positive".into(),
            ));
        }
        if !self.q.is_square() || self.r_u.shape() != (d, d) || d == 0 {
            return Err(Error::InvalidConfig("Q and R_u must both be d × d".into()));
        }
        let qs = (&self.q + self.q.transpose()) * 0.5;
        if qs.symmetric_eigenvalues().min() < -1e-12 {
            return Err(Error::InvalidConfig("Q must be positive semidefinite".into()));
        }
        if Cholesky::new((&self.r_u + self.r_u.transpose()) * 0.5).is_none() {
            return Err(Error::InvalidConfig("R_u must be positive definite".into()));
        }
        Ok(())
    }
}

/// Condensed MPC with the normal matrix factored once.
///
/// Stacking `P = Φ x₀ + Γ U` for the predicted positions `p(1..=K)`, the
/// cost `‖P_ref − P‖²_Q̄ + ‖U‖²_R̄` is minimized by
/// `U = (ΓᵀQ̄Γ + R̄)⁻¹ ΓᵀQ̄ (P_ref − Φ x₀)`.
#[derive(Debug, Clone)]
pub struct MpcSolver {
    pub problem: MpcProblem,
    phi: DMatrix<f64>,
    gamma_t_q: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// Optimal `u(0..K)`.
    pub inputs: Vec<DVector<f64>>,
    /// `u(0)` after componentwise clipping to `a_max`.
    pub command: DVector<f64>,
    pub objective: f64,
}

impl MpcSolver {
    pub fn new(problem: MpcProblem) -> Result<Self> {
        problem.validate()?;
        let d = problem.dim();
        let k = problem.horizon;
        let a = double_integrator_a(d, problem.dt);
        let b = double_integrator_b(d, problem.dt);

        // Position rows of A^j and of A^j B.
        let mut a_pow = vec![DMatrix::identity(2 * d, 2 * d)];
        for j in 1..=k {
            a_pow.push(&a * &a_pow[j - 1]);
        }
        let mut phi = DMatrix::zeros(k * d, 2 * d);
        let mut gamma = DMatrix::zeros(k * d, k * d);
        for row in 0..k {
            phi.view_mut((row * d, 0), (d, 2 * d))
                .copy_from(&a_pow[row + 1].rows(0, d));
            for col in 0..=row {
                let blk = &a_pow[row - col] * &b;
                gamma
                    .view_mut((row * d, col * d), (d, d))
                    .copy_from(&blk.rows(0, d));
            }
        }
        let mut q_bar = DMatrix::zeros(k * d, k * d);
        let mut r_bar = DMatrix::zeros(k * d, k * d);
        for i in 0..k {
            q_bar.view_mut((i * d, i * d), (d, d)).copy_from(&problem.q);
            r_bar.view_mut((i * d, i * d), (d, d)).copy_from(&problem.r_u);
        }
        let gamma_t_q = gamma.transpose() * &q_bar;
        let h = &gamma_t_q * &gamma + r_bar;
        let h = (&h + h.transpose()) * 0.5;
        let chol = Cholesky::new(h).ok_or_else(|| Error::Numerical {
            module: "control",
            detail: "MPC normal matrix is not positive definite".into(),
        })?;
        Ok(Self {
            problem,
            phi,
            gamma_t_q,
            chol,
        })
    }

    /// `reference` holds `x_exp(1..=K)` as full states.
    pub fn solve(&self, x0: &DVector<f64>, reference: &[DVector<f64>]) -> Result<MpcSolution> {
        let d = self.problem.dim();
        let k = self.problem.horizon;
        if x0.len() != 2 * d {
            return Err(Error::InvalidConfig(format!(
                "state has length {}, expected {}",
                x0.len(),
                2 * d
            )));
        }
        if reference.len() != k || reference.iter().any(|r| r.len() != 2 * d) {
            return Err(Error::InvalidConfig(format!(
                "reference must hold {k} states of length {}",
                2 * d
            )));
        }
        let mut p_ref = DVector::zeros(k * d);
        for (i, r) in reference.iter().enumerate() {
            p_ref.rows_mut(i * d, d).copy_from(&r.rows(0, d));
        }
        let rhs = &self.gamma_t_q * (p_ref - &self.phi * x0);
        let u = self.chol.solve(&rhs);
        let inputs: Vec<DVector<f64>> = (0..k).map(|i| u.rows(i * d, d).into_owned()).collect();
        let command = inputs[0].map(|c| c.clamp(-self.problem.a_max, self.problem.a_max));
        let objective = objective(&self.problem, x0, reference, &inputs)?;
        Ok(MpcSolution {
            inputs,
            command,
            objective,
        })
    }
}

/// One-shot solve; builds the solver each call.
pub fn mpc_solve(x0: &DVector<f64>, reference: &[DVector<f64>], prob: &MpcProblem) -> Result<MpcSolution> {
    MpcSolver::new(prob.clone())?.solve(x0, reference)
}

/// The tracking cost of `inputs` by forward simulation.
pub fn objective(
    prob: &MpcProblem,
    x0: &DVector<f64>,
    reference: &[DVector<f64>],
    inputs: &[DVector<f64>],
) -> Result<f64> {
    let d = prob.dim();
    if inputs.len() != reference.len() {
        return Err(Error::InvalidConfig("inputs and reference lengths differ".into()));
    }
    let a = double_integrator_a(d, prob.dt);
    let b = double_integrator_b(d, prob.dt);
    let mut x = x0.clone();
    let mut cost = 0.0;
    for (u, r) in inputs.iter().zip(reference) {
        cost += (u.transpose() * &prob.r_u * u)[(0, 0)];
        x = &a * x + &b * u;
        let e = r.rows(0, d) - x.rows(0, d);
        cost += (e.transpose() * &prob.q * e)[(0, 0)];
    }
    Ok(cost)
}

/// Heading that points the body +x axis at the estimate; `None` when the
/// target is (nearly) straight overhead or below.
pub fn desired_yaw(pursuer_pos: &Vector3<f64>, target_est: &Vector6<f64>) -> Option<f64> {
    let dx = target_est[0] - pursuer_pos.x;
    let dy = target_est[1] - pursuer_pos.y;
    if dx.hypot(dy) <= 1e-6 {
        return None;
    }
    Some(dy.atan2(dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{step_plant, PlantLimits, PursuerState};

    #[test]
    fn uniform_triangle() {
        let spec = FormationSpec::uniform(3, 6.0, 0.0);
        let x = Vector6::new(1.0, 2.0, 3.0, 0.5, -0.5, 0.1);
        let refs: Vec<_> = (0..3).map(|i| formation_reference(&x, &spec, i).unwrap()).collect();
        for i in 0..3 {
            let o = spec.offset(i);
            assert_close!(o.xy().norm(), 6.0, 1e-12);
            let o2 = spec.offset((i + 1) % 3);
            assert_close!(o.xy().angle(&o2.xy()), std::f64::consts::TAU / 3.0, 1e-12);
            assert_eq!(refs[i].fixed_rows::<3>(3), x.fixed_rows::<3>(3));
        }
        let centroid: Vector3<f64> = refs.iter().map(|r| Vector3::new(r[0], r[1], r[2])).sum::<Vector3<f64>>() / 3.0;
        assert!((centroid - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
        assert!(formation_reference(&x, &spec, 3).is_err());
        let mut dup = spec.clone();
        dup.phase_offsets[1] = std::f64::consts::TAU;
        assert!(dup.validate().is_err());
    }

    #[test]
    fn reference_rollout() {
        let a = double_integrator_a(3, 0.1);
        let x0 = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let traj = propagate_reference(&x0, &a, 10).unwrap();
        assert_close!(traj[9][0], 1.0, 1e-12);
        let still = DVector::from_vec(vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        assert!(propagate_reference(&still, &a, 5).unwrap().iter().all(|x| *x == still));
        assert!(propagate_reference(&still, &a, 0).is_err());
    }

    #[test]
    fn on_reference_input_is_zero() {
        let prob = MpcProblem::from_config(&MpcConfig::default(), 3, 5.0);
        let x0 = DVector::from_vec(vec![1.0, -2.0, 3.0, 0.0, 0.0, 0.0]);
        let reference = vec![x0.clone(); prob.horizon];
        let sol = mpc_solve(&x0, &reference, &prob).unwrap();
        assert!(sol.inputs.iter().all(|u| u.norm() < 1e-12));
    }

    #[test]
    fn scalar_single_step_by_hand() {
        let (dt, q, r) = (0.2, 3.0, 0.5);
        let prob = MpcProblem {
            horizon: 1,
            dt,
            q: DMatrix::from_element(1, 1, q),
            r_u: DMatrix::from_element(1, 1, r),
            a_max: 100.0,
        };
        let (p0, v0, p_exp) = (0.3, -1.2, 2.0);
        let b = 0.5 * dt * dt;
        let u = b * q * (p_exp - (p0 + dt * v0)) / (b * b * q + r);
        let sol = mpc_solve(
            &DVector::from_vec(vec![p0, v0]),
            &[DVector::from_vec(vec![p_exp, 0.0])],
            &prob,
        )
        .unwrap();
        assert_close!(sol.inputs[0][0], u, 1e-12);
    }

    #[test]
    fn command_is_clipped() {
        let prob = MpcProblem::from_config(&MpcConfig::default(), 3, 2.0);
        let x0 = DVector::zeros(6);
        let far = DVector::from_vec(vec![100.0, -100.0, 0.0, 0.0, 0.0, 0.0]);
        let sol = mpc_solve(&x0, &vec![far; prob.horizon], &prob).unwrap();
        assert!(sol.inputs[0][0] > 2.0);
        assert_eq!(sol.command[0], 2.0);
        assert_eq!(sol.command[1], -2.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut prob = MpcProblem::from_config(&MpcConfig::default(), 3, 2.0);
        let solver = MpcSolver::new(prob.clone()).unwrap();
        assert!(solver.solve(&DVector::zeros(4), &vec![DVector::zeros(6); 20]).is_err());
        assert!(solver.solve(&DVector::zeros(6), &vec![DVector::zeros(6); 19]).is_err());
        prob.r_u = DMatrix::zeros(3, 3);
        assert!(MpcSolver::new(prob).is_err());
    }

    #[test]
    fn closed_loop_reaches_static_reference() {
        let prob = MpcProblem::from_config(&MpcConfig::default(), 3, PlantLimits::default().a_max);
        let solver = MpcSolver::new(prob).unwrap();
        let goal = DVector::from_vec(vec![4.0, -3.0, 2.0, 0.0, 0.0, 0.0]);
        let reference = vec![goal.clone(); solver.problem.horizon];
        let mut s = PursuerState::at_rest(0, Vector3::zeros(), 0.0);
        for _ in 0..500 {
            let x0 = DVector::from_iterator(6, s.position.iter().chain(s.velocity.iter()).copied());
            let u = solver.solve(&x0, &reference).unwrap().command;
            s = step_plant(&s, &Vector3::new(u[0], u[1], u[2]), 0.0, 0.02, &PlantLimits::default()).unwrap();
        }
        assert!((s.position - Vector3::new(4.0, -3.0, 2.0)).norm() < 0.05);
    }

    #[test]
    fn yaw_examples() {
        let t = |x, y| Vector6::new(x, y, 0.0, 0.0, 0.0, 0.0);
        assert_close!(desired_yaw(&Vector3::zeros(), &t(5.0, 0.0)).unwrap(), 0.0, 1e-15);
        assert_close!(desired_yaw(&Vector3::zeros(), &t(0.0, 5.0)).unwrap(), std::f64::consts::FRAC_PI_2, 1e-15);
        assert!(desired_yaw(&Vector3::new(1.0, 1.0, 0.0), &t(1.0, 1.0)).is_none());
    }
}
