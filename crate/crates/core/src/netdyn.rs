//! Full flying-net dynamics.
//!
//! The net is a square grid of `Ns × Ns` knot nodes joined by threads, plus
//! four corner masses each tied to a grid corner by a corner thread. Every
//! node is a point mass; threads are piecewise Kelvin-Voigt elements that
//! only ever pull. The state is `s = [r; v]` with all positions first and all
//! velocities after, `6N` entries in total.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::capture::hull::ConvexPolytope;
use crate::error::{Error, Result};
use crate::world::Pose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Knot,
    Corner,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thread {
    pub i: usize,
    pub j: usize,
    pub rest_length: f64,
    pub radius: f64,
}

/// Net geometry and material inputs to [`build_net`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetMaterials {
    /// Knot-to-knot rest length (m).
    pub mesh_pitch: f64,
    /// Rest length of each corner thread (m).
    pub corner_thread_length: f64,
    pub thread_radius: f64,
    /// Thread material density (kg/m³).
    pub thread_density: f64,
    pub knot_mass: f64,
    pub corner_mass: f64,
}

impl Default for NetMaterials {
    fn default() -> Self {
        Self {
            mesh_pitch: 0.1,
            corner_thread_length: 0.3,
            thread_radius: 0.5e-3,
            thread_density: 950.0,
            knot_mass: 0.2e-3,
            corner_mass: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetTopology {
    pub nodes_per_side: usize,
    pub kinds: Vec<NodeKind>,
    pub threads: Vec<Thread>,
    pub masses: Vec<f64>,
    /// Thread indices incident to each node.
    pub adjacency: Vec<Vec<usize>>,
    pub materials: NetMaterials,
}

impl NetTopology {
    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn knot_index(&self, row: usize, col: usize) -> usize {
        row * self.nodes_per_side + col
    }

    /// Node indices of the four corner masses, ordered counter-clockwise
    /// starting from the (row 0, col 0) quadrant.
    pub fn corner_nodes(&self) -> [usize; 4] {
        let base = self.nodes_per_side * self.nodes_per_side;
        [base, base + 1, base + 2, base + 3]
    }

    /// Grid corners the corner masses hang from, same order as [`corner_nodes`](Self::corner_nodes).
    pub fn anchor_knots(&self) -> [usize; 4] {
        let n = self.nodes_per_side - 1;
        [
            self.knot_index(0, 0),
            self.knot_index(0, n),
            self.knot_index(n, n),
            self.knot_index(n, 0),
        ]
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Diagonal between opposite corner masses with the net fully spread.
    pub fn nominal_mouth_diagonal(&self) -> f64 {
        let side = (self.nodes_per_side - 1) as f64 * self.materials.mesh_pitch;
        side * std::f64::consts::SQRT_2 + 2.0 * self.materials.corner_thread_length
    }

    pub fn thread_between(&self, i: usize, j: usize) -> Option<usize> {
        self.adjacency.get(i)?.iter().copied().find(|&t| {
            let th = &self.threads[t];
            (th.i == i && th.j == j) || (th.i == j && th.j == i)
        })
    }
}

/// Builds the `Ns × Ns` grid plus four corner masses (`N = Ns² + 4`).
pub fn build_net(nodes_per_side: usize, materials: &NetMaterials) -> Result<NetTopology> {
    if nodes_per_side < 2 {
        return Err(Error::InvalidConfig(format!(
            "net needs at least 2 nodes per side, got {nodes_per_side}"
        )));
    }
    let m = materials;
    for (name, v) in [
        ("mesh_pitch", m.mesh_pitch),
        ("corner_thread_length", m.corner_thread_length),
        ("thread_radius", m.thread_radius),
        ("thread_density", m.thread_density),
        ("knot_mass", m.knot_mass),
        ("corner_mass", m.corner_mass),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "net material {name} must be positive, got {v}"
            )));
        }
    }

    let ns = nodes_per_side;
    let n_knots = ns * ns;
    let n = n_knots + 4;
    let mut kinds = vec![NodeKind::Knot; n_knots];
    kinds.extend([NodeKind::Corner; 4]);

    let mut threads = Vec::with_capacity(2 * ns * (ns - 1) + 4);
    let grid = |t: &mut Vec<Thread>, i, j| {
        t.push(Thread {
            i,
            j,
            rest_length: m.mesh_pitch,
            radius: m.thread_radius,
        })
    };
    for row in 0..ns {
        for col in 0..ns {
            let i = row * ns + col;
            if col + 1 < ns {
                grid(&mut threads, i, i + 1);
            }
            if row + 1 < ns {
                grid(&mut threads, i, i + ns);
            }
        }
    }

    let mut topo = NetTopology {
        nodes_per_side: ns,
        kinds,
        threads,
        masses: vec![0.0; n],
        adjacency: vec![Vec::new(); n],
        materials: *m,
    };
    for (c, anchor) in topo.corner_nodes().into_iter().zip(topo.anchor_knots()) {
        topo.threads.push(Thread {
            i: anchor,
            j: c,
            rest_length: m.corner_thread_length,
            radius: m.thread_radius,
        });
    }

    for (t, th) in topo.threads.iter().enumerate() {
        topo.adjacency[th.i].push(t);
        topo.adjacency[th.j].push(t);
    }

    // Each node carries half of every incident thread plus its lumped mass.
    for i in 0..n {
        let half_threads: f64 = topo.adjacency[i]
            .iter()
            .map(|&t| 0.5 * thread_mass(&topo.threads[t], m.thread_density))
            .sum();
        let lumped = match topo.kinds[i] {
            NodeKind::Knot => m.knot_mass,
            NodeKind::Corner => m.corner_mass,
        };
        topo.masses[i] = half_threads + lumped;
    }
    Ok(topo)
}

/// `ρ π r² l₀`.
pub fn thread_mass(thread: &Thread, density: f64) -> f64 {
    density * std::f64::consts::PI * thread.radius * thread.radius * thread.rest_length
}

/// How external (aerodynamic) forces are modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DragModel {
    /// `Σ_j C_d ‖v_ij‖ v_ij` over incident threads, with `v_ij = v_j − v_i`.
    #[default]
    RelativeThread,
    /// Conventional per-node air drag `−C_d ‖v_i‖ v_i`.
    AbsoluteNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetParams {
    /// Young's modulus of the thread material (Pa).
    pub youngs_modulus: f64,
    pub damping_ratio: f64,
    /// First natural frequency of the net (rad/s).
    pub first_natural_frequency: f64,
    pub drag_coefficient: f64,
    /// Gravitational acceleration magnitude (m/s²), applied along -z.
    pub gravity: f64,
    pub drag_model: DragModel,
}

impl Default for NetParams {
    fn default() -> Self {
        Self {
            youngs_modulus: 0.5e9,
            damping_ratio: 0.05,
            first_natural_frequency: 2.0 * std::f64::consts::PI * 100.0,
            drag_coefficient: 1e-4,
            gravity: 9.81,
            drag_model: DragModel::RelativeThread,
        }
    }
}

impl NetParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("youngs_modulus", self.youngs_modulus),
            ("first_natural_frequency", self.first_natural_frequency),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("damping_ratio", self.damping_ratio),
            ("drag_coefficient", self.drag_coefficient),
            ("gravity", self.gravity),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// `k = E π r² / l₀`.
    pub fn stiffness(&self, thread: &Thread) -> f64 {
        self.youngs_modulus * std::f64::consts::PI * thread.radius * thread.radius
            / thread.rest_length
    }

    /// `c = 2 ξ k / ω₁`.
    pub fn damping(&self, thread: &Thread) -> f64 {
        2.0 * self.damping_ratio * self.stiffness(thread) / self.first_natural_frequency
    }

    fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, -self.gravity)
    }
}

/// Stacked net state `[r₁ … r_N, v₁ … v_N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    pub s: Vec<f64>,
}

impl NetState {
    pub fn zeros(nodes: usize) -> Self {
        Self {
            s: vec![0.0; 6 * nodes],
        }
    }

    pub fn from_parts(positions: &[Vector3<f64>], velocities: &[Vector3<f64>]) -> Result<Self> {
        if positions.len() != velocities.len() {
            return Err(Error::InvalidInput(format!(
                "{} positions but {} velocities",
                positions.len(),
                velocities.len()
            )));
        }
        let mut st = Self::zeros(positions.len());
        for (i, (p, v)) in positions.iter().zip(velocities).enumerate() {
            st.set_position(i, p);
            st.set_velocity(i, v);
        }
        Ok(st)
    }

    pub fn node_count(&self) -> usize {
        self.s.len() / 6
    }

    #[inline]
    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.s[3 * i], self.s[3 * i + 1], self.s[3 * i + 2])
    }

    #[inline]
    pub fn velocity(&self, i: usize) -> Vector3<f64> {
        let o = 3 * self.node_count() + 3 * i;
        Vector3::new(self.s[o], self.s[o + 1], self.s[o + 2])
    }

    pub fn set_position(&mut self, i: usize, p: &Vector3<f64>) {
        self.s[3 * i..3 * i + 3].copy_from_slice(p.as_slice());
    }

    pub fn set_velocity(&mut self, i: usize, v: &Vector3<f64>) {
        let o = 3 * self.node_count() + 3 * i;
        self.s[o..o + 3].copy_from_slice(v.as_slice());
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        (0..self.node_count()).map(|i| self.position(i)).collect()
    }

    /// Adds `v` to every node velocity (e.g. the carrier's own motion at launch).
    pub fn add_uniform_velocity(&mut self, v: &Vector3<f64>) {
        for i in 0..self.node_count() {
            let vi = self.velocity(i) + v;
            self.set_velocity(i, &vi);
        }
    }

    fn check_len(&self, topo: &NetTopology) -> Result<()> {
        if self.s.len() != 6 * topo.node_count() {
            return Err(Error::InvalidInput(format!(
                "state has {} entries, topology needs {}",
                self.s.len(),
                6 * topo.node_count()
            )));
        }
        Ok(())
    }
}

/// Counters for conditions the force model resolves silently.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForceDiagnostics {
    /// Thread evaluations skipped because the end nodes coincided.
    pub coincident_nodes: u64,
}

const COINCIDENT_EPS: f64 = 1e-12;

/// Kelvin-Voigt tension of `thread` acting on its `i` end. The force on the
/// `j` end is the negation.
#[inline]
fn thread_tension_on_i(
    thread: &Thread,
    k: f64,
    c: f64,
    state: &NetState,
    diag: &mut ForceDiagnostics,
) -> Vector3<f64> {
    let d = state.position(thread.j) - state.position(thread.i);
    let l = d.norm();
    if l < COINCIDENT_EPS {
        diag.coincident_nodes += 1;
        return Vector3::zeros();
    }
    if l <= thread.rest_length {
        return Vector3::zeros();
    }
    let e = d / l;
    // Signed elongation rate: positive while the thread is lengthening.
    let v_e = (state.velocity(thread.j) - state.velocity(thread.i)).dot(&e);
    let t = k * (l - thread.rest_length) + c * v_e;
    if t > 0.0 {
        e * t
    } else {
        Vector3::zeros()
    }
}

/// Tension exerted on node `i` by the thread joining it to node `j`.
pub fn tension(
    i: usize,
    j: usize,
    state: &NetState,
    topo: &NetTopology,
    params: &NetParams,
) -> Result<Vector3<f64>> {
    state.check_len(topo)?;
    let t = topo
        .thread_between(i, j)
        .ok_or_else(|| Error::InvalidInput(format!("nodes {i} and {j} share no thread")))?;
    let th = &topo.threads[t];
    let mut diag = ForceDiagnostics::default();
    let on_i = thread_tension_on_i(th, params.stiffness(th), params.damping(th), state, &mut diag);
    Ok(if th.i == i { on_i } else { -on_i })
}

/// External (aerodynamic) force on node `i`.
pub fn drag_force(
    i: usize,
    state: &NetState,
    topo: &NetTopology,
    params: &NetParams,
) -> Vector3<f64> {
    let cd = params.drag_coefficient;
    match params.drag_model {
        DragModel::RelativeThread => topo.adjacency[i]
            .iter()
            .map(|&t| {
                let th = &topo.threads[t];
                let other = if th.i == i { th.j } else { th.i };
                let v_ij = state.velocity(other) - state.velocity(i);
                v_ij * (cd * v_ij.norm())
            })
            .sum(),
        DragModel::AbsoluteNode => {
            let v = state.velocity(i);
            -v * (cd * v.norm())
        }
    }
}

/// Precomputed per-thread coefficients; the hot loop of every integrator.
#[derive(Debug, Clone)]
pub struct NetModel<'a> {
    pub topo: &'a NetTopology,
    pub params: NetParams,
    stiffness: Vec<f64>,
    damping: Vec<f64>,
    inv_mass: Vec<f64>,
    pub diagnostics: ForceDiagnostics,
}

impl<'a> NetModel<'a> {
    pub fn new(topo: &'a NetTopology, params: &NetParams) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            topo,
            params: *params,
            stiffness: topo.threads.iter().map(|t| params.stiffness(t)).collect(),
            damping: topo.threads.iter().map(|t| params.damping(t)).collect(),
            inv_mass: topo.masses.iter().map(|m| 1.0 / m).collect(),
            diagnostics: ForceDiagnostics::default(),
        })
    }

    /// Net force on every node: tension + external + gravity. Accumulation
    /// runs in thread order, so results are bitwise reproducible.
    pub fn forces_into(&mut self, state: &NetState, out: &mut [Vector3<f64>]) {
        let n = self.topo.node_count();
        debug_assert_eq!(out.len(), n);
        let g = self.params.gravity_vector();
        for (f, m) in out.iter_mut().zip(&self.topo.masses) {
            *f = g * *m;
        }
        let cd = self.params.drag_coefficient;
        for (t, th) in self.topo.threads.iter().enumerate() {
            let on_i = thread_tension_on_i(
                th,
                self.stiffness[t],
                self.damping[t],
                state,
                &mut self.diagnostics,
            );
            out[th.i] += on_i;
            out[th.j] -= on_i;
            if cd > 0.0 && self.params.drag_model == DragModel::RelativeThread {
                let v_ij = state.velocity(th.j) - state.velocity(th.i);
                let f = v_ij * (cd * v_ij.norm());
                out[th.i] += f;
                out[th.j] -= f;
            }
        }
        if cd > 0.0 && self.params.drag_model == DragModel::AbsoluteNode {
            for (i, f) in out.iter_mut().enumerate() {
                let v = state.velocity(i);
                *f -= v * (cd * v.norm());
            }
        }
    }

    /// Per-node sum of thread tensions only.
    pub fn tension_forces_into(&mut self, state: &NetState, out: &mut [Vector3<f64>]) {
        out.iter_mut().for_each(|f| *f = Vector3::zeros());
        for (t, th) in self.topo.threads.iter().enumerate() {
            let on_i = thread_tension_on_i(
                th,
                self.stiffness[t],
                self.damping[t],
                state,
                &mut self.diagnostics,
            );
            out[th.i] += on_i;
            out[th.j] -= on_i;
        }
    }

    /// Total of the per-node tension forces over the whole net, and the sum
    /// of their magnitudes as a scale for relative comparisons.
    pub fn internal_force_sum(&mut self, state: &NetState) -> (Vector3<f64>, f64) {
        let mut per_node = vec![Vector3::zeros(); self.topo.node_count()];
        self.tension_forces_into(state, &mut per_node);
        let total = per_node.iter().sum();
        let scale = per_node.iter().map(|f| f.norm()).sum();
        (total, scale)
    }

    /// `ṡ = [v; M⁻¹(T + F_ext + G)]`.
    pub fn derivative_into(
        &mut self,
        state: &NetState,
        forces: &mut [Vector3<f64>],
        out: &mut [f64],
    ) {
        let n = self.topo.node_count();
        self.forces_into(state, forces);
        out[..3 * n].copy_from_slice(&state.s[3 * n..]);
        for i in 0..n {
            let a = forces[i] * self.inv_mass[i];
            out[3 * n + 3 * i..3 * n + 3 * i + 3].copy_from_slice(a.as_slice());
        }
    }

    /// Explicit stability estimate for the stiffest thread under
    /// semi-implicit Euler: `dt < 2 / ω_max`, with damping folded in.
    pub fn dt_max(&self) -> f64 {
        let mut worst = f64::INFINITY;
        for (t, th) in self.topo.threads.iter().enumerate() {
            // Reduced mass of the pair; a node can be pulled by up to four
            // threads at once; along one axis only two of them act.
            let inv_mu = self.inv_mass[th.i] + self.inv_mass[th.j];
            let k = 2.0 * self.stiffness[t] * inv_mu;
            let c = 2.0 * self.damping[t] * inv_mu;
            // Largest dt keeping |1 - c dt - k dt²| style recursion bounded.
            let dt = if c > 0.0 {
                (-c + (c * c + 4.0 * k).sqrt()) / k
            } else {
                2.0 / k.sqrt()
            };
            worst = worst.min(dt);
        }
        worst
    }

    pub fn kinetic_energy(&self, state: &NetState) -> f64 {
        self.topo
            .masses
            .iter()
            .enumerate()
            .map(|(i, m)| 0.5 * m * state.velocity(i).norm_squared())
            .sum()
    }

    pub fn potential_energy(&self, state: &NetState) -> f64 {
        self.topo
            .masses
            .iter()
            .enumerate()
            .map(|(i, m)| m * self.params.gravity * state.position(i).z)
            .sum()
    }

    /// `Σ ½ k (l − l₀)²` over taut threads.
    pub fn elastic_energy(&self, state: &NetState) -> f64 {
        self.topo
            .threads
            .iter()
            .enumerate()
            .map(|(t, th)| {
                let l = (state.position(th.j) - state.position(th.i)).norm();
                let stretch = (l - th.rest_length).max(0.0);
                0.5 * self.stiffness[t] * stretch * stretch
            })
            .sum()
    }

    pub fn mechanical_energy(&self, state: &NetState) -> f64 {
        self.kinetic_energy(state) + self.potential_energy(state) + self.elastic_energy(state)
    }
}

/// Evaluates `ṡ` for a single state.
pub fn net_derivative(state: &NetState, topo: &NetTopology, params: &NetParams) -> Result<Vec<f64>> {
    state.check_len(topo)?;
    if let Some(k) = state.s.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical {
            module: "netdyn",
            detail: format!("state entry {k} is not finite"),
        });
    }
    let mut model = NetModel::new(topo, params)?;
    let mut forces = vec![Vector3::zeros(); topo.node_count()];
    let mut out = vec![0.0; state.s.len()];
    model.derivative_into(state, &mut forces, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    SemiImplicitEuler,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub duration: f64,
    pub scheme: Scheme,
    /// Record every n-th step (the initial state is always recorded).
    pub sample_every: usize,
    /// Abort once any state entry exceeds this magnitude.
    pub divergence_bound: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            duration: 0.5,
            scheme: Scheme::SemiImplicitEuler,
            sample_every: 100,
            divergence_bound: 1e6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetTrajectory {
    pub times: Vec<f64>,
    pub states: Vec<NetState>,
    pub diagnostics: ForceDiagnostics,
    /// Stability bound violated by the requested step, if any.
    pub stability_warning: Option<String>,
}

impl NetTrajectory {
    pub fn final_state(&self) -> &NetState {
        self.states.last().expect("trajectory always holds the initial state")
    }

    /// Plain-text frames: one `t node x y z` row per node per sample.
    pub fn write_frames<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,node,x,y,z")?;
        for (t, st) in self.times.iter().zip(&self.states) {
            for i in 0..st.node_count() {
                let p = st.position(i);
                writeln!(w, "{t},{i},{},{},{}", p.x, p.y, p.z)?;
            }
        }
        Ok(())
    }
}

/// Fixed-step integration of the net ODE.
pub fn integrate_net(
    s0: &NetState,
    topo: &NetTopology,
    params: &NetParams,
    cfg: &IntegratorConfig,
) -> Result<NetTrajectory> {
    s0.check_len(topo)?;
    if !(cfg.dt > 0.0 && cfg.dt.is_finite()) {
        return Err(Error::InvalidConfig(format!("dt must be positive, got {}", cfg.dt)));
    }
    if !(cfg.duration >= 0.0) || cfg.sample_every == 0 {
        return Err(Error::InvalidConfig(
            "duration must be non-negative and sample_every at least 1".into(),
        ));
    }
    let mut model = NetModel::new(topo, params)?;
    let dt_max = model.dt_max();
    let stability_warning = (cfg.dt > dt_max).then(|| {
        let msg = format!(
            "net dt = {:e} s exceeds the explicit stability estimate {:e} s",
            cfg.dt, dt_max
        );
        log::warn!("{msg}");
        msg
    });

    let n = topo.node_count();
    let steps = (cfg.duration / cfg.dt).round() as usize;
    let mut state = s0.clone();
    let mut times = vec![0.0];
    let mut states = vec![state.clone()];
    let mut forces = vec![Vector3::zeros(); n];
    let dim = state.s.len();
    let mut k = [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]];
    let mut scratch = NetState::zeros(n);

    for step in 1..=steps {
        match cfg.scheme {
            Scheme::SemiImplicitEuler => {
                model.forces_into(&state, &mut forces);
                let (r, v) = state.s.split_at_mut(3 * n);
                for i in 0..n {
                    let a = forces[i] * model.inv_mass[i];
                    for c in 0..3 {
                        v[3 * i + c] += a[c] * cfg.dt;
                        r[3 * i + c] += v[3 * i + c] * cfg.dt;
                    }
                }
            }
            Scheme::Rk4 => {
                let h = cfg.dt;
                model.derivative_into(&state, &mut forces, &mut k[0]);
                for (stage, coef) in [(1usize, 0.5), (2, 0.5), (3, 1.0)] {
                    for d in 0..dim {
                        scratch.s[d] = state.s[d] + coef * h * k[stage - 1][d];
                    }
                    model.derivative_into(&scratch, &mut forces, &mut k[stage]);
                }
                for d in 0..dim {
                    state.s[d] += h / 6.0 * (k[0][d] + 2.0 * k[1][d] + 2.0 * k[2][d] + k[3][d]);
                }
            }
        }

        let t = step as f64 * cfg.dt;
        let max_abs = state.s.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if !max_abs.is_finite() || max_abs > cfg.divergence_bound {
            return Err(Error::Diverged { time: t, norm: max_abs });
        }
        if step % cfg.sample_every == 0 || step == steps {
            times.push(t);
            states.push(state.clone());
        }
    }

    Ok(NetTrajectory {
        times,
        states,
        diagnostics: model.diagnostics,
        stability_warning,
    })
}

/// Launch kinematics of the net gun.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LaunchParams {
    pub muzzle_speed: f64,
    /// Angle between each corner's launch direction and the gun axis (rad).
    pub spread_half_angle: f64,
    /// Knot launch speed as a fraction of the muzzle speed.
    pub bundle_speed_fraction: f64,
    /// Radius of the packed net bundle at the muzzle (m).
    pub bundle_radius: f64,
}

impl Default for LaunchParams {
    fn default() -> Self {
        Self {
            muzzle_speed: 25.0,
            spread_half_angle: 30f64.to_radians(),
            bundle_speed_fraction: 0.7,
            bundle_radius: 0.02,
        }
    }
}

impl LaunchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.muzzle_speed > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "muzzle_speed must be positive, got {}",
                self.muzzle_speed
            )));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.spread_half_angle) {
            return Err(Error::InvalidConfig(
                "spread_half_angle must lie in [0, π/2)".into(),
            ));
        }
        if !(self.bundle_speed_fraction >= 0.0 && self.bundle_radius > 0.0) {
            return Err(Error::InvalidConfig(
                "bundle_speed_fraction must be ≥ 0 and bundle_radius > 0".into(),
            ));
        }
        Ok(())
    }

    /// Launch velocity of corner `q` (0..4) in the gun frame, whose +x is the
    /// gun axis. Corner `q` heads out toward quadrant angle `π/4 + q·π/2`
    /// measured from gun +y toward gun +z.
    pub fn corner_velocity_gun_frame(&self, q: usize) -> Vector3<f64> {
        let (s, c) = self.spread_half_angle.sin_cos();
        let (qs, qc) = quadrant_angle(q).sin_cos();
        Vector3::new(c, s * qc, s * qs) * self.muzzle_speed
    }
}

/// Angle of corner `q` around the gun axis. Matches the grid layout used by
/// [`launch_initial_state`].
pub(crate) fn quadrant_angle(q: usize) -> f64 {
    // Grid corner (row 0, col 0) sits at (-y, -z): 225°, then ccw in (y, z).
    let base = 1.25 * std::f64::consts::PI;
    base + q as f64 * std::f64::consts::FRAC_PI_2
}

/// Packs the net into a bundle at the muzzle and assigns launch velocities.
///
/// The gun axis is the `+x` axis of `gun_pose`. Grid rows run along gun `+z`
/// and columns along gun `+y`, shrunk so that no thread starts taut.
pub fn launch_initial_state(
    gun_pose: &Pose,
    launch: &LaunchParams,
    topo: &NetTopology,
) -> Result<NetState> {
    launch.validate()?;
    let ns = topo.nodes_per_side;
    let mut state = NetState::zeros(topo.node_count());
    let half = 0.5 * (ns - 1) as f64;
    let knot_axis_velocity =
        gun_pose.transform_vector(&Vector3::x()) * (launch.muzzle_speed * launch.bundle_speed_fraction);
    let scale = launch.bundle_radius / (half * std::f64::consts::SQRT_2).max(1.0);

    for row in 0..ns {
        for col in 0..ns {
            let local = Vector3::new(0.0, (col as f64 - half) * scale, (row as f64 - half) * scale);
            let i = topo.knot_index(row, col);
            state.set_position(i, &gun_pose.transform_point(&local));
            state.set_velocity(i, &knot_axis_velocity);
        }
    }
    for (q, c) in topo.corner_nodes().into_iter().enumerate() {
        let (p, v) = corner_launch_state(gun_pose, launch, q);
        state.set_position(c, &p);
        state.set_velocity(c, &v);
    }
    Ok(state)
}

/// World position and velocity of corner mass `q` at the instant of launch.
pub fn corner_launch_state(gun_pose: &Pose, launch: &LaunchParams, q: usize) -> (Vector3<f64>, Vector3<f64>) {
    let (qs, qc) = quadrant_angle(q).sin_cos();
    let r = 1.1 * launch.bundle_radius;
    let local = Vector3::new(0.0, r * qc, r * qs);
    (
        gun_pose.transform_point(&local),
        gun_pose.transform_vector(&launch.corner_velocity_gun_frame(q)),
    )
}

/// Largest distance between opposite corner masses.
pub fn corner_spread(state: &NetState, topo: &NetTopology) -> f64 {
    let c = topo.corner_nodes();
    let d02 = (state.position(c[0]) - state.position(c[2])).norm();
    let d13 = (state.position(c[1]) - state.position(c[3])).norm();
    d02.max(d13)
}

/// Criteria for calling a net rollout a capture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnclosureCriteria {
    /// Mouth counts as closed once the corner spread falls below this
    /// fraction of the nominal mouth diagonal.
    pub closure_fraction: f64,
    /// Half-space tolerance for hull containment (m).
    pub tolerance: f64,
}

impl Default for EnclosureCriteria {
    fn default() -> Self {
        Self {
            closure_fraction: 0.5,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnclosureVerdict {
    /// Target inside the hull of all net nodes at some sample.
    pub enclosed: bool,
    pub first_enclosure_time: Option<f64>,
    /// Mouth closed at or after the first enclosure.
    pub mouth_closed: bool,
    pub captured: bool,
}

/// Hull of every net node at each sample of a rollout, reusable across many
/// target queries.
#[derive(Debug, Clone)]
pub struct EnclosureOracle {
    pub times: Vec<f64>,
    hulls: Vec<Option<ConvexPolytope>>,
    /// Latest sample index at which the mouth is closed, if any.
    closed_after: Vec<bool>,
    pub criteria: EnclosureCriteria,
}

impl EnclosureOracle {
    pub fn new(traj: &NetTrajectory, topo: &NetTopology, criteria: EnclosureCriteria) -> Self {
        let hulls = traj
            .states
            .iter()
            .map(|st| ConvexPolytope::hull(&st.positions()).ok())
            .collect();
        let limit = criteria.closure_fraction * topo.nominal_mouth_diagonal();
        let closed: Vec<bool> = traj
            .states
            .iter()
            .map(|st| corner_spread(st, topo) < limit)
            .collect();
        // closed_after[k]: mouth closed at some sample ≥ k.
        let mut closed_after = vec![false; closed.len()];
        let mut any = false;
        for k in (0..closed.len()).rev() {
            any |= closed[k];
            closed_after[k] = any;
        }
        Self {
            times: traj.times.clone(),
            hulls,
            closed_after,
            criteria,
        }
    }

    /// Verdict against a target sampled at the rollout's sample times.
    pub fn verdict(&self, target: &[Vector3<f64>]) -> Result<EnclosureVerdict> {
        if target.len() != self.times.len() {
            return Err(Error::InvalidInput(format!(
                "target has {} samples, net trajectory has {}",
                target.len(),
                self.times.len()
            )));
        }
        Ok(self.verdict_by(|k| target[k]))
    }

    /// Verdict against a stationary target.
    pub fn verdict_static(&self, target: &Vector3<f64>) -> EnclosureVerdict {
        self.verdict_by(|_| *target)
    }

    fn verdict_by(&self, target: impl Fn(usize) -> Vector3<f64>) -> EnclosureVerdict {
        let first = self.hulls.iter().enumerate().find_map(|(k, h)| {
            h.as_ref()
                .filter(|h| h.contains(&target(k), self.criteria.tolerance))
                .map(|_| k)
        });
        let mouth_closed = first.is_some_and(|k| self.closed_after[k]);
        EnclosureVerdict {
            enclosed: first.is_some(),
            first_enclosure_time: first.map(|k| self.times[k]),
            mouth_closed,
            captured: first.is_some() && mouth_closed,
        }
    }
}

/// Capture verdict of a sampled net rollout against a target sampled at the
/// same instants.
pub fn enclosure_oracle(
    traj: &NetTrajectory,
    topo: &NetTopology,
    target: &[Vector3<f64>],
    criteria: EnclosureCriteria,
) -> Result<EnclosureVerdict> {
    EnclosureOracle::new(traj, topo, criteria).verdict(target)
}
