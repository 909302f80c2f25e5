//! Safe skills: initiation, termination, the per-step CBF/CLF program and the
//! deterministic action map from `(observation, phi)` to a control.
//!
//! Decision vector of every program: `[u0, u1, slack_0, ...]`. Road controls are
//! `(a, tan(delta))`; planar double-integrator controls are `(ax, ay)`.

use crate::barriers::{derivatives, desired_heading_from_lateral_error, hocbf_row, clf_row, BarrierError, BarrierKind, ClfKind, ClfTarget, Lane, Target};
use crate::config::SkillsSection;
use crate::dynamics::{control_bounds, AgentState, Control, DynamicsParams, Model};
use crate::qpcore::{kkt_differentials, parameter_grads, solve, QPError, QPSolution, QPSpec, QPStatus};
use crate::worlds::{wrap, Observation};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SkillError {
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error(transparent)]
    Qp(#[from] QPError),
    #[error("phi has {got} entries, layout needs {need}")]
    PhiShape { need: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Catalog {
    Road,
    Planar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillId {
    Cruise,
    Accelerate,
    Yield,
    LaneChangeLeft,
    LaneChangeRight,
    SpeedUp,
    SlowDown,
    TurnLeft,
    TurnRight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub barriers: Vec<BarrierKind>,
    pub clfs: Vec<ClfKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillSpec {
    pub id: SkillId,
    pub catalog: Catalog,
    pub t_max: usize,
    /// m/s for speed skills, rad for turns, lanes for lane changes, 0 for cruise.
    pub delta: f64,
    pub intrinsic: [f64; 4],
    pub progress_bonus: f64,
    pub recipe: Recipe,
}

pub fn catalog(kind: Catalog, cfg: &SkillsSection) -> Vec<SkillSpec> {
    let mk = |id, delta, barriers: &[BarrierKind], clfs: &[ClfKind]| SkillSpec {
        id,
        catalog: kind,
        t_max: cfg.t_max,
        delta,
        intrinsic: cfg.intrinsic,
        progress_bonus: cfg.progress_bonus,
        recipe: Recipe { barriers: barriers.to_vec(), clfs: clfs.to_vec() },
    };
    use BarrierKind::*;
    use ClfKind::*;
    match kind {
        Catalog::Road => {
            let b = [InterAgent, RoadBoundary];
            vec![
                mk(SkillId::Cruise, 0.0, &b, &[Velocity]),
                mk(SkillId::Accelerate, cfg.dv, &b, &[Velocity]),
                mk(SkillId::Yield, cfg.dv, &b, &[Velocity]),
                mk(SkillId::LaneChangeLeft, 1.0, &b, &[Velocity, Heading]),
                mk(SkillId::LaneChangeRight, 1.0, &b, &[Velocity, Heading]),
            ]
        }
        Catalog::Planar => {
            let b = [InterAgent, StaticObstacle];
            vec![
                mk(SkillId::SpeedUp, cfg.dv_planar, &b, &[VelocityVector]),
                mk(SkillId::SlowDown, cfg.dv_planar, &b, &[VelocityVector]),
                mk(SkillId::TurnLeft, cfg.dtheta, &b, &[VelocityVector]),
                mk(SkillId::TurnRight, cfg.dtheta, &b, &[VelocityVector]),
            ]
        }
    }
}

/// Layout of the learnable program parameters. Every entry lies in
/// `(eps_phi, phi_max]`.
///
/// Road: `[H_a, H_w, F_a, F_w, g_agent, g_edge1, g_edge2, rate_v, rate_psi, e_v, e_psi]`.
/// Planar: `[H_1, H_2, F_1, F_2, g_agent1, g_agent2, g_obs1, g_obs2, rate_v, e_v]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiVector {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiRange {
    pub lo: f64,
    pub hi: f64,
}

impl PhiRange {
    pub fn new(lo: f64, hi: f64) -> Self {
        PhiRange { lo, hi }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }
}

impl Default for PhiRange {
    fn default() -> Self {
        PhiRange { lo: 0.01, hi: 10.0 }
    }
}

impl Catalog {
    pub fn phi_dim(self) -> usize {
        match self {
            Catalog::Road => 11,
            Catalog::Planar => 10,
        }
    }

    /// Starting point of the low-level policy; the linear terms sit at the
    /// midpoint so they start out neutral.
    pub fn default_phi(self, range: PhiRange) -> PhiVector {
        let m = range.mid();
        let values = match self {
            Catalog::Road => vec![1.0, 1.0, m, m, 2.0, 1.5, 1.5, 2.0, 2.0, 5.0, 5.0],
            Catalog::Planar => vec![1.0, 1.0, m, m, 0.5, 0.5, 0.5, 0.5, 2.0, 5.0],
        };

        PhiVector { values: values.into_iter().map(|v| range.clamp(v)).collect() }
    }

    fn barrier_gains(self, kind: BarrierKind) -> [usize; 2] {
        match (self, kind) {
            (Catalog::Road, BarrierKind::InterAgent | BarrierKind::StaticObstacle) => [4, 4],
            (Catalog::Road, BarrierKind::RoadBoundary) => [5, 6],
            (Catalog::Planar, BarrierKind::InterAgent | BarrierKind::RoadBoundary) => [4, 5],
            (Catalog::Planar, BarrierKind::StaticObstacle) => [6, 7],
        }
    }

    /// `(rate index, slack-weight index)` of a CLF.
    fn clf_entries(self, kind: ClfKind) -> (usize, usize) {
        match (self, kind) {
            (Catalog::Road, ClfKind::Heading) => (8, 10),
            (Catalog::Road, _) => (7, 9),
            (Catalog::Planar, _) => (8, 9),
        }
    }
}

impl SkillSpec {
    /// Entries of phi that influence this skill's program.
    pub fn active_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.catalog.phi_dim()];
        for i in 0..4 {
            m[i] = true;
        }
        for &k in &self.recipe.barriers {
            for i in self.catalog.barrier_gains(k) {
                m[i] = true;
            }
        }
        for &c in &self.recipe.clfs {
            let (r, e) = self.catalog.clf_entries(c);
            m[r] = true;
            m[e] = true;
        }
        m
    }
}

/// Live bookkeeping of a running skill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillRuntime {
    pub skill: SkillId,
    pub t_start: usize,
    pub init_pos: [f64; 2],
    pub v_des: f64,
    pub v_vec_des: Option<[f64; 2]>,
    /// Target lane of a lane change.
    pub lane: Option<Lane>,
}

impl SkillRuntime {
    pub fn elapsed(&self, t: usize) -> usize {
        t.saturating_sub(self.t_start)
    }
}

fn planar_direction(obs: &Observation) -> f64 {
    let k = &obs.kin;
    if k.speed.abs() > 0.05 && obs.state.model() == Model::DoubleIntegrator {
        return k.vel[1].atan2(k.vel[0]);
    }
    if obs.state.model() == Model::BicycleCartesian {
        return k.heading;
    }
    match obs.goal_point {
        Some(g) => (g[1] - k.pos[1]).atan2(g[0] - k.pos[0]),
        None => 0.0,
    }
}

fn lane_change_target(spec: &SkillSpec, obs: &Observation) -> Option<Lane> {
    if obs.on_ramp || obs.corridor.is_none() {
        return None;
    }
    let i = obs.lane_index as isize + if spec.id == SkillId::LaneChangeLeft { 1 } else { -1 };
    if i < 0 {
        return None;
    }
    obs.main_lanes.get(i as usize).copied()
}

pub fn is_initiable(spec: &SkillSpec, obs: &Observation) -> bool {
    let v = obs.kin.speed.abs();
    match spec.id {
        SkillId::Cruise | SkillId::TurnLeft | SkillId::TurnRight => true,
        SkillId::Accelerate | SkillId::SpeedUp => v + spec.delta <= obs.speed_cap + 1e-9,
        SkillId::Yield | SkillId::SlowDown => v - spec.delta >= 0.0,
        SkillId::LaneChangeLeft | SkillId::LaneChangeRight => lane_change_target(spec, obs).is_some(),
    }
}

/// Start a skill from the current observation; targets are frozen here.
pub fn start(spec: &SkillSpec, obs: &Observation, cfg: &SkillsSection) -> SkillRuntime {
    let k = &obs.kin;
    let v0 = k.speed;
    let mut rt = SkillRuntime { skill: spec.id, t_start: obs.t, init_pos: k.pos, v_des: v0, v_vec_des: None, lane: None };
    match spec.id {
        SkillId::Cruise => {}
        SkillId::Accelerate => rt.v_des = (v0 + spec.delta).min(obs.speed_cap),
        SkillId::Yield => rt.v_des = (v0 - spec.delta).max(0.0),
        SkillId::LaneChangeLeft | SkillId::LaneChangeRight => rt.lane = lane_change_target(spec, obs),
        SkillId::SpeedUp | SkillId::SlowDown => {
            let th = planar_direction(obs);
            let s = if spec.id == SkillId::SpeedUp { v0.abs() + spec.delta } else { v0.abs() - spec.delta };
            let s = s.clamp(0.0, obs.speed_cap);
            rt.v_des = s;
            rt.v_vec_des = Some([s * th.cos(), s * th.sin()]);
        }
        SkillId::TurnLeft | SkillId::TurnRight => {
            let sign = if spec.id == SkillId::TurnLeft { 1.0 } else { -1.0 };
            let th = planar_direction(obs) + sign * spec.delta;
            rt.v_des = cfg.v_mag;
            rt.v_vec_des = Some([cfg.v_mag * th.cos(), cfg.v_mag * th.sin()]);
        }
    }
    rt
}

pub fn terminate(spec: &SkillSpec, rt: &SkillRuntime, obs: &Observation, t: usize, cfg: &SkillsSection) -> bool {
    if rt.elapsed(t) >= spec.t_max {
        return true;
    }
    let k = &obs.kin;
    match spec.id {
        SkillId::Cruise => (k.pos[0] - rt.init_pos[0]).hypot(k.pos[1] - rt.init_pos[1]) >= cfg.cruise_distance,
        SkillId::Accelerate | SkillId::Yield => (k.speed - rt.v_des).abs() <= cfg.tol_v + 1e-12,
        SkillId::LaneChangeLeft | SkillId::LaneChangeRight => match rt.lane {
            Some(l) => l.offset(k.pos).abs() <= cfg.tol_d,
            None => true,
        },
        _ => {
            let vd = rt.v_vec_des.unwrap_or([0.0, 0.0]);
            (k.vel[0] - vd[0]).hypot(k.vel[1] - vd[1]) <= cfg.tol_v + 1e-12
        }
    }
}

/// Lane whose center the skill steers toward.
fn steering_lane(rt: &SkillRuntime, obs: &Observation) -> Option<Lane> {
    rt.lane.or(obs.corridor)
}

/// Desired heading on the road: lane direction plus the lateral correction.
pub fn desired_heading(rt: &SkillRuntime, obs: &Observation, cfg: &SkillsSection) -> f64 {
    match steering_lane(rt, obs) {
        Some(l) => l.dir + desired_heading_from_lateral_error(-l.offset(obs.kin.pos), cfg.lateral_gain, cfg.heading_clamp),
        None => match rt.v_vec_des {
            Some(v) if v[0] != 0.0 || v[1] != 0.0 => v[1].atan2(v[0]),
            _ => obs.kin.heading,
        },
    }
}

/// Control box for the current state; acceleration is also limited so that a
/// single Euler step cannot leave the speed range.
pub fn control_box(state: &AgentState, params: &DynamicsParams) -> (Control, Control) {
    let (mut lo, mut hi) = control_bounds(state.model(), params);
    let dt = params.dt;
    match *state {
        AgentState::BicycleFrenet(s) => {
            lo[0] = lo[0].max((params.v_min - s.v) / dt);
            hi[0] = hi[0].min((params.v_max - s.v) / dt);
        }
        AgentState::BicycleCartesian(s) => {
            lo[0] = lo[0].max((params.v_min - s.v) / dt);
            hi[0] = hi[0].min((params.v_max - s.v) / dt);
        }
        AgentState::DoubleIntegrator(s) => {
            for (i, v) in [s.vx, s.vy].into_iter().enumerate() {
                lo[i] = lo[i].max((params.v_min - v) / dt);
                hi[i] = hi[i].min((params.v_max - v) / dt);
            }
        }
    }
    for i in 0..2 {
        if lo[i] > hi[i] {
            let m = 0.5 * (lo[i] + hi[i]);
            lo[i] = m;
            hi[i] = m;
        }
    }
    (lo, hi)
}

/// Brake toward zero velocity as hard as the box allows, no steering.
pub fn fallback_control(state: &AgentState, params: &DynamicsParams) -> Control {
    let (lo, hi) = control_box(state, params);
    let dt = params.dt;
    match *state {
        AgentState::BicycleFrenet(s) => [(-s.v / dt).clamp(lo[0], hi[0]), 0.0f64.clamp(lo[1], hi[1])],
        AgentState::BicycleCartesian(s) => [(-s.v / dt).clamp(lo[0], hi[0]), 0.0f64.clamp(lo[1], hi[1])],
        AgentState::DoubleIntegrator(s) => [(-s.vx / dt).clamp(lo[0], hi[0]), (-s.vy / dt).clamp(lo[1], hi[1])],
    }
}

/// Nominal control folded into the linear objective term.
fn nominal_control(rt: &SkillRuntime, obs: &Observation, params: &DynamicsParams, cfg: &SkillsSection) -> Control {
    match obs.state {
        AgentState::BicycleFrenet(s) if rt.lane.is_none() => {
            let (lo, hi) = control_box(&obs.state, params);
            let err = wrap(desired_heading(rt, obs, cfg) - s.psi);
            let w = params.wheelbase * cfg.heading_gain * err / s.v.max(1.0);
            [0.0, w.clamp(lo[1], hi[1])]
        }
        _ => [0.0, 0.0],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowSource {
    Barrier(BarrierKind),
    Clf(ClfKind),
}

/// Sparse derivative of the program data with respect to phi.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhiJacobian {
    /// Phi index feeding each diagonal entry of the quadratic term.
    pub hess: Vec<usize>,
    pub lin: Vec<Vec<(usize, f64)>>,
    pub h: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillQp {
    pub qp: QPSpec,
    pub hard_rows: usize,
    pub sources: Vec<RowSource>,
    /// Neighbor index (into the observation) of each hard row, if any.
    pub neighbors: Vec<Option<usize>>,
    pub jac: PhiJacobian,
}

pub fn build_qp(
    spec: &SkillSpec,
    rt: &SkillRuntime,
    obs: &Observation,
    phi: &PhiVector,
    params: &DynamicsParams,
    cfg: &SkillsSection,
    range: PhiRange,
) -> Result<SkillQp, SkillError> {
    let cat = spec.catalog;
    if phi.values.len() != cat.phi_dim() {
        return Err(SkillError::PhiShape { need: cat.phi_dim(), got: phi.values.len() });
    }
    let p = &phi.values;
    let ns = spec.recipe.clfs.len();
    let n = 2 + ns;
    let kin = &obs.kin;
    let (lo, hi) = control_box(&obs.state, params);

    let mut g_rows: Vec<Vec<f64>> = Vec::new();
    let mut h_vals = Vec::new();
    let mut h_jac = Vec::new();
    let mut sources = Vec::new();
    let mut neighbors = Vec::new();
    for inst in obs.barriers() {
        if !spec.recipe.barriers.contains(&inst.spec.kind) {
            continue;
        }
        let [i1, i2] = cat.barrier_gains(inst.spec.kind);
        let d = derivatives(&inst.spec, kin, &inst.target)?;
        let y = d.b - inst.spec.buffer;
        let mut bs = inst.spec;
        let (row, jac) = if bs.rel_degree == 1 {
            // The Euler update adds dt^2 (|rel_vel|^2 - r1^2 s^2) with s the speed
            // rate; -s^2 is bounded below by its chord over the box.
            let (s_lo, s_hi) = (0..2).fold((0.0, 0.0), |(a, b), i| {
                let (x, y) = (kin.speed_g[i] * lo[i], kin.speed_g[i] * hi[i]);
                (a + x.min(y), b + x.max(y))
            });
            let rv2 = match inst.target {
                Target::Entity { rel_vel, .. } => rel_vel[0] * rel_vel[0] + rel_vel[1] * rel_vel[1],
                _ => 0.0,
            };
            bs.disc_margin = 0.0;
            let mut row = hocbf_row(&bs, kin, &inst.target, &[p[i1]], n)?;
            let q = obs.dt * bs.r1 * bs.r1;
            for i in 0..2 {
                row.g_coeffs[i] += q * (s_lo + s_hi) * kin.speed_g[i];
            }
            row.h_rhs += obs.dt * rv2 + q * s_lo * s_hi;
            (row, vec![(i1, y)])
        } else {
            // Raise the first gain when needed so that zeta_1 starts nonnegative.
            let mut g1 = p[i1];
            let mut floored = false;
            if y > 0.0 && d.db_f + g1 * y < 0.0 {
                g1 = (-d.db_f / y * (1.0 + 1e-9)).min(range.hi);
                floored = true;
            }
            let g2 = p[i2];
            let mut row = hocbf_row(&bs, kin, &inst.target, &[g1, g2], n)?;
            let mut jac = Vec::new();
            if !floored {
                jac.push((i1, d.db_f + g2 * y));
            }
            jac.push((i2, d.db_f + g1 * y));
            if inst.shared {
                let k = match inst.target {
                    Target::Entity { rel_vel, .. } => 2.0 * (rel_vel[0] * rel_vel[0] + rel_vel[1] * rel_vel[1]),
                    _ => 0.0,
                };
                let x = row.h_rhs - d.ddb_f;
                row.h_rhs -= 0.5 * (k + x);
                for e in &mut jac {
                    e.1 *= 0.5;
                }
            }
            (row, jac)
        };
        g_rows.push(row.g_coeffs);
        h_vals.push(row.h_rhs);
        h_jac.push(jac);
        sources.push(RowSource::Barrier(inst.spec.kind));
        neighbors.push(inst.neighbor);
    }
    let hard = g_rows.len();

    for (j, &ck) in spec.recipe.clfs.iter().enumerate() {
        let (ri, _) = cat.clf_entries(ck);
        let target = match ck {
            ClfKind::Velocity => ClfTarget::Scalar(rt.v_des),
            ClfKind::Heading => ClfTarget::Scalar(desired_heading(rt, obs, cfg)),
            ClfKind::VelocityVector => ClfTarget::Vector(rt.v_vec_des.unwrap_or([0.0, 0.0])),
        };
        let row = clf_row(ck, kin, target, p[ri], 2 + j, n);
        // dh / d rate = -eta, recovered from the row at unit rate.
        let unit = clf_row(ck, kin, target, 1.0, 2 + j, n);
        let zero = clf_row(ck, kin, target, 0.0, 2 + j, n);
        h_jac.push(vec![(ri, unit.h_rhs - zero.h_rhs)]);
        g_rows.push(row.g_coeffs);
        h_vals.push(row.h_rhs);
        sources.push(RowSource::Clf(ck));
    }

    let m = g_rows.len();
    let g = DMatrix::from_fn(m, n, |i, j| g_rows[i][j]);
    let h = DVector::from_vec(h_vals);
    let mut hess_idx = vec![0, 1];
    for &ck in &spec.recipe.clfs {
        hess_idx.push(cat.clf_entries(ck).1);
    }
    let hess = DMatrix::from_fn(n, n, |i, j| if i == j { p[hess_idx[i]] } else { 0.0 });
    let u_nom = nominal_control(rt, obs, params, cfg);
    let mid = range.mid();
    let s = cfg.linear_scale;
    let mut lin = DVector::zeros(n);
    let mut lin_jac = vec![Vec::new(); n];
    for i in 0..2 {
        lin[i] = -2.0 * p[i] * u_nom[i] + s * (p[2 + i] - mid);
        lin_jac[i] = vec![(i, -2.0 * u_nom[i]), (2 + i, s)];
    }
    let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
    let mut ub = DVector::from_element(n, f64::INFINITY);
    for i in 0..2 {
        lb[i] = lo[i];
        ub[i] = hi[i];
    }
    Ok(SkillQp {
        qp: QPSpec { hess, lin, g, h, lb, ub },
        hard_rows: hard,
        sources,
        neighbors,
        jac: PhiJacobian { hess: hess_idx, lin: lin_jac, h: h_jac },
    })
}

/// Gradient of a loss with respect to phi, given its gradient with respect to
/// the decision vector, through the KKT system of an optimal program.
pub fn phi_gradient(program: &SkillQp, sol: &QPSolution, d_loss_dx: &[f64], phi_dim: usize) -> Result<Vec<f64>, SkillError> {
    let incoming = DVector::from_column_slice(d_loss_dx);
    let diff = kkt_differentials(&program.qp, sol, &incoming)?;
    let pg = parameter_grads(&program.qp, sol, &diff);
    let mut g = vec![0.0; phi_dim];
    for (i, &k) in program.jac.hess.iter().enumerate() {
        g[k] += pg.d_hess[(i, i)];
    }
    for (i, entries) in program.jac.lin.iter().enumerate() {
        for &(k, c) in entries {
            g[k] += pg.d_lin[i] * c;
        }
    }
    for (r, entries) in program.jac.h.iter().enumerate() {
        for &(k, c) in entries {
            g[k] += pg.d_h[r] * c;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyEventKind {
    Violation,
    InfeasibleQp,
    FallbackApplied,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyEvent {
    pub step: usize,
    pub agent: usize,
    pub kind: SafetyEventKind,
    pub min_barrier_value: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Act {
    pub control: Control,
    pub status: QPStatus,
    pub events: Vec<SafetyEvent>,
    pub program: SkillQp,
    pub solution: QPSolution,
}

impl Act {
    /// True when the control came from an optimal program, so the step is certified.
    pub fn certified(&self) -> bool {
        self.status == QPStatus::Optimal
    }
}

/// The deterministic low-level policy: solve the skill program, or brake when
/// the hard rows admit no control inside the box.
pub fn act(
    spec: &SkillSpec,
    rt: &SkillRuntime,
    obs: &Observation,
    phi: &PhiVector,
    params: &DynamicsParams,
    cfg: &SkillsSection,
    range: PhiRange,
) -> Result<Act, SkillError> {
    let program = build_qp(spec, rt, obs, phi, params, cfg, range)?;
    let solution = solve(&program.qp)?;
    let mut events = Vec::new();
    let control = if solution.status == QPStatus::Optimal {
        let (lo, hi) = control_box(&obs.state, params);
        [solution.primal[0].clamp(lo[0], hi[0]), solution.primal[1].clamp(lo[1], hi[1])]
    } else {
        let b = obs.min_barrier();
        for kind in [SafetyEventKind::InfeasibleQp, SafetyEventKind::FallbackApplied] {
            events.push(SafetyEvent { step: obs.t, agent: obs.agent, kind, min_barrier_value: b });
        }
        fallback_control(&obs.state, params)
    };
    Ok(Act { control, status: solution.status, events, program, solution })
}

/// Shaping reward of the running skill for the control just chosen.
pub fn intrinsic_reward(spec: &SkillSpec, rt: &SkillRuntime, obs: &Observation, u: Control, cfg: &SkillsSection) -> f64 {
    let [c1, c2, c3, c4] = spec.intrinsic;
    let k = &obs.kin;
    let effort = u[0] * u[0] + u[1] * u[1];
    let rel = |err: f64, target: f64| if target.abs() < 0.1 { err } else { err / target };
    let (ev, eh, e4, along) = match spec.catalog {
        Catalog::Road => {
            let ev = rel(k.speed - rt.v_des, rt.v_des);
            let eh = wrap(k.heading - desired_heading(rt, obs, cfg)) / PI;
            let lane = steering_lane(rt, obs);
            let d = lane.map(|l| l.offset(k.pos)).unwrap_or(0.0);
            let along = lane.map(|l| k.vel[0] * l.dir.cos() + k.vel[1] * l.dir.sin()).unwrap_or(0.0);
            (ev, eh, d, along)
        }
        Catalog::Planar => {
            let vd = rt.v_vec_des.unwrap_or([0.0, 0.0]);
            let ev = rel((k.vel[0] - vd[0]).hypot(k.vel[1] - vd[1]), rt.v_des);
            let th = if k.speed.abs() > 1e-6 && obs.state.model() == Model::DoubleIntegrator { k.vel[1].atan2(k.vel[0]) } else { k.heading };
            let th_des = if rt.v_des > 0.0 { vd[1].atan2(vd[0]) } else { th };
            let (eg, along) = match obs.goal_point {
                Some(g) => {
                    let gd = (g[1] - k.pos[1]).atan2(g[0] - k.pos[0]);
                    (wrap(th - gd) / PI, k.vel[0] * gd.cos() + k.vel[1] * gd.sin())
                }
                None => (0.0, 0.0),
            };
            (ev, wrap(th - th_des) / PI, eg, along)
        }
    };
    -c1 * effort - c2 * ev * ev - c3 * eh * eh - c4 * e4 * e4 + spec.progress_bonus * along * obs.dt
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RunConfig, WorldKind};
    use crate::dynamics::BicycleFrenetState;
    use crate::worlds::{make_world, Route, WorldState};

    fn road_world(states: &[(f64, f64, f64)]) -> WorldState {
        let mut c = RunConfig::default();
        c.world.num_agents = states.len();
        c.world.respawn = Some(false);
        c.world.spawn_attempts = 5000;
        let mut w = make_world(&c, 1).unwrap();
        for (id, &(p, d, v)) in states.iter().enumerate() {
            w.set_state(id, AgentState::BicycleFrenet(BicycleFrenetState { p, d, psi: 0.0, v }));
            w.agents[id].route = Route::Main;
        }
        w
    }

    fn road_spec(id: SkillId) -> SkillSpec {
        catalog(Catalog::Road, &SkillsSection::default()).into_iter().find(|s| s.id == id).unwrap()
    }

    #[test]
    fn catalogs() {
        let cfg = SkillsSection::default();
        let road: Vec<_> = catalog(Catalog::Road, &cfg).iter().map(|s| s.id).collect();
        assert_eq!(road, vec![SkillId::Cruise, SkillId::Accelerate, SkillId::Yield, SkillId::LaneChangeLeft, SkillId::LaneChangeRight]);
        let planar = catalog(Catalog::Planar, &cfg);
        assert_eq!(planar.len(), 4);
        for s in catalog(Catalog::Road, &cfg).iter().chain(&planar) {
            assert!(s.t_max > 0);
            assert!(s.id == SkillId::Cruise || s.delta > 0.0);
        }
    }

    #[test]
    fn initiation_rules() {
        let w = road_world(&[(10.0, 0.0, 10.0)]);
        let o = w.observe(0).unwrap();
        assert!(!is_initiable(&road_spec(SkillId::LaneChangeLeft), &o));
        assert!(!is_initiable(&road_spec(SkillId::LaneChangeRight), &o));
        assert!(is_initiable(&road_spec(SkillId::Cruise), &o));
        assert!(!is_initiable(&road_spec(SkillId::Accelerate), &o));
        assert!(is_initiable(&road_spec(SkillId::Yield), &o));
        let w = road_world(&[(10.0, 0.0, 0.5)]);
        assert!(!is_initiable(&road_spec(SkillId::Yield), &w.observe(0).unwrap()));
    }

    #[test]
    fn lane_changes_need_a_target_lane() {
        let mut c = RunConfig::default();
        c.world.num_agents = 1;
        c.world.main_lanes = 2;
        let mut w = make_world(&c, 1).unwrap();
        w.agents[0].route = Route::Main;
        w.set_state(0, AgentState::BicycleFrenet(BicycleFrenetState { p: 10.0, d: 3.5, psi: 0.0, v: 5.0 }));
        let o = w.observe(0).unwrap();
        assert_eq!(o.lane_index, 1);
        assert!(!is_initiable(&road_spec(SkillId::LaneChangeLeft), &o));
        assert!(is_initiable(&road_spec(SkillId::LaneChangeRight), &o));
    }

    #[test]
    fn termination_examples() {
        let cfg = SkillsSection::default();
        let spec = road_spec(SkillId::Accelerate);
        let w = road_world(&[(10.0, 0.0, 5.0)]);
        let o = w.observe(0).unwrap();
        let rt = start(&spec, &o, &cfg);
        assert_eq!(rt.v_des, 6.0);
        assert!(!terminate(&spec, &rt, &o, 0, &cfg));
        assert!(terminate(&spec, &rt, &o, spec.t_max, &cfg));
        let w2 = road_world(&[(10.0, 0.0, 6.0)]);
        assert!(terminate(&spec, &rt, &w2.observe(0).unwrap(), 1, &cfg));
    }

    #[test]
    fn cruise_program_shape() {
        let w = road_world(&[(10.0, 0.0, 5.0)]);
        let o = w.observe(0).unwrap();
        let spec = road_spec(SkillId::Cruise);
        let rt = start(&spec, &o, &SkillsSection::default());
        assert_eq!(rt.v_des, 5.0);
        let q = build_qp(&spec, &rt, &o, &Catalog::Road.default_phi(PhiRange::default()), &w.params, &SkillsSection::default(), PhiRange::default()).unwrap();
        assert_eq!(q.hard_rows, 2);
        assert_eq!(q.qp.m(), 3);
        assert_eq!(q.sources[2], RowSource::Clf(ClfKind::Velocity));
        assert_eq!(q.qp.n(), 3);
    }

    #[test]
    fn accelerate_with_neighbor_respects_rows() {
        let w = road_world(&[(10.0, 0.0, 5.0), (35.0, 0.0, 5.0)]);
        let o = w.observe(0).unwrap();
        let cfg = SkillsSection::default();
        let spec = road_spec(SkillId::Accelerate);
        let rt = start(&spec, &o, &cfg);
        assert_eq!(rt.v_des, 6.0);
        let a = act(&spec, &rt, &o, &Catalog::Road.default_phi(PhiRange::default()), &w.params, &cfg, PhiRange::default()).unwrap();
        assert_eq!(a.program.hard_rows, 3);
        assert_eq!(a.program.qp.m(), 4);
        assert!(a.certified());
        let x = &a.solution.primal;
        for i in 0..a.program.hard_rows {
            let r = a.program.qp.h[i] - (a.program.qp.g.row(i) * x)[0];
            assert!(r >= -1e-8);
        }
    }

    #[test]
    fn stationary_cruise_is_zero() {
        let w = road_world(&[(10.0, 0.0, 0.0)]);
        let o = w.observe(0).unwrap();
        let cfg = SkillsSection::default();
        let spec = road_spec(SkillId::Cruise);
        let rt = start(&spec, &o, &cfg);
        let a = act(&spec, &rt, &o, &Catalog::Road.default_phi(PhiRange::default()), &w.params, &cfg, PhiRange::default()).unwrap();
        assert!(a.control[0].abs() < 1e-9 && a.control[1].abs() < 1e-9, "{:?}", a.control);
    }

    #[test]
    fn contradictory_rows_fall_back() {
        // 4 m behind a stopped car at 10 m/s: braking cannot satisfy the row.
        let w = road_world(&[(10.0, 0.0, 10.0), (14.0, 0.0, 0.0)]);
        let o = w.observe(0).unwrap();
        let cfg = SkillsSection::default();
        let spec = road_spec(SkillId::Cruise);
        let rt = start(&spec, &o, &cfg);
        let a = act(&spec, &rt, &o, &Catalog::Road.default_phi(PhiRange::default()), &w.params, &cfg, PhiRange::default()).unwrap();
        assert_eq!(a.status, QPStatus::Infeasible);
        assert_eq!(a.control, [-5.0, 0.0]);
        let kinds: Vec<_> = a.events.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec![SafetyEventKind::InfeasibleQp, SafetyEventKind::FallbackApplied]);
    }

    #[test]
    fn planar_turn_tracks_rotated_velocity() {
        let mut c = RunConfig::for_world(WorldKind::Target);
        c.world.num_agents = 1;
        let w = make_world(&c, 4).unwrap();
        let o = w.observe(0).unwrap();
        let spec = catalog(Catalog::Planar, &c.skills).into_iter().find(|s| s.id == SkillId::TurnLeft).unwrap();
        let rt = start(&spec, &o, &c.skills);
        let g = o.goal_point.unwrap();
        let th = (g[1] - o.kin.pos[1]).atan2(g[0] - o.kin.pos[0]) + c.skills.dtheta;
        let vd = rt.v_vec_des.unwrap();
        assert!((vd[0] - 0.5 * th.cos()).abs() < 1e-12 && (vd[1] - 0.5 * th.sin()).abs() < 1e-12);
        let q = build_qp(&spec, &rt, &o, &Catalog::Planar.default_phi(PhiRange::default()), &w.params, &c.skills, PhiRange::default()).unwrap();
        assert_eq!(q.sources.last(), Some(&RowSource::Clf(ClfKind::VelocityVector)));
        assert_eq!(q.hard_rows, o.neighbors.len());
    }

    #[test]
    fn intrinsic_reward_examples() {
        let cfg = SkillsSection::default();
        let mut spec = road_spec(SkillId::Cruise);
        let w = road_world(&[(10.0, 0.0, 2.0)]);
        let o = w.observe(0).unwrap();
        let mut rt = start(&spec, &o, &cfg);
        assert_eq!(intrinsic_reward(&spec, &rt, &o, [0.0, 0.0], &cfg), 0.0);
        spec.intrinsic = [0.1, 0.0, 0.0, 0.0];
        assert!((intrinsic_reward(&spec, &rt, &o, [1.0, 0.0], &cfg) + 0.1).abs() < 1e-12);
        spec.intrinsic = [0.0, 1.0, 0.0, 0.0];
        rt.v_des = 1.0;
        assert!((intrinsic_reward(&spec, &rt, &o, [0.0, 0.0], &cfg) + 1.0).abs() < 1e-12);
        // Absolute error below 0.1 m/s target speed.
        rt.v_des = 0.05;
        assert!((intrinsic_reward(&spec, &rt, &o, [0.0, 0.0], &cfg) + 1.95f64.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn phi_masks() {
        let cfg = SkillsSection::default();
        let cruise = road_spec(SkillId::Cruise).active_mask();
        assert_eq!(cruise.iter().filter(|&&b| b).count(), 9);
        assert!(!cruise[8] && !cruise[10]);
        assert!(road_spec(SkillId::LaneChangeLeft).active_mask().iter().all(|&b| b));
        assert!(catalog(Catalog::Planar, &cfg)[0].active_mask().iter().all(|&b| b));
    }
}
