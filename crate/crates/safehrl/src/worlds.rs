//! Multi-agent worlds: a one-lane merge road (Frenet bicycle, straight global
//! frame) and the planar target/spread arenas.
//!
//! Merge geometry: the main road runs along `d = 0` for `p` in `[0, 200]`. The
//! ramp is a straight slanted lane of length 100 that meets the main center
//! line at `p = 120`; its angle is chosen so the two corridors overlap over the
//! last 30 m before the join. Ramp agents switch to the main corridor at the
//! join point.

use crate::barriers::{eval_barrier, BarrierKind, BarrierSpec, Lane, Target};
use crate::config::{RunConfig, WorldKind};
use crate::dynamics::{
    kinematics, step, AgentState, BicycleCartesianState, BicycleFrenetState, Control, DoubleIntegratorState,
    DynamicsError, DynamicsParams, Kinematics, Model,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAIN_LENGTH: f64 = 200.0;
pub const MERGE_POINT: f64 = 120.0;
pub const RAMP_LENGTH: f64 = 100.0;
pub const CONFLICT_LENGTH: f64 = 30.0;
/// Neighbor slots in the policy features.
pub const FEATURE_NEIGHBORS: usize = 4;
pub const EGO_FEATURES: usize = 8;
pub const NEIGHBOR_FEATURES: usize = 6;
pub const FEATURE_DIM: usize = EGO_FEATURES + FEATURE_NEIGHBORS * NEIGHBOR_FEATURES;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("no non-overlapping spawn placement after {0} attempts")]
    Spawn(usize),
    #[error("agent {0} is not alive")]
    DeadAgent(usize),
    #[error("missing control for agent {0}")]
    MissingControl(usize),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Main,
    Ramp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Alive,
    Success,
    Crash,
    OutOfRoad,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    None,
    Success,
    Crash,
    OutOfRoad,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub id: usize,
    /// Seat in the team; respawns reuse freed seats.
    pub slot: usize,
    pub state: AgentState,
    pub status: Status,
    pub route: Route,
    pub goal: [f64; 2],
    pub spawn_t: usize,
    pub steps: usize,
    pub energy: f64,
    pub last_progress: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frozen {
    pub source: usize,
    pub pos: [f64; 2],
    pub countdown: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub pos: [f64; 2],
    pub radius: f64,
}

/// Barrier constants an agent needs to build its rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierParams {
    pub r0: f64,
    pub r1: f64,
    pub obstacle_e: f64,
    pub buffer: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborKind {
    Agent,
    Frozen,
    Obstacle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub kind: NeighborKind,
    pub rel_pos: [f64; 2],
    pub rel_vel: [f64; 2],
    pub dist: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Goal {
    RouteEnd(f64),
    Point([f64; 2]),
    AnyOf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub agent: usize,
    pub slot: usize,
    pub t: usize,
    pub world: WorldKind,
    pub state: AgentState,
    pub kin: Kinematics,
    /// Drivable corridor (road only).
    pub corridor: Option<Lane>,
    pub main_lanes: Vec<Lane>,
    pub lane_index: usize,
    pub on_ramp: bool,
    pub neighbors: Vec<Neighbor>,
    pub goal: Goal,
    /// Nearest goal point in the planar worlds.
    pub goal_point: Option<[f64; 2]>,
    pub speed_cap: f64,
    pub sensing_radius: f64,
    pub barrier: BarrierParams,
    pub dt: f64,
}

/// One barrier an agent is responsible for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierInstance {
    pub spec: BarrierSpec,
    pub target: Target,
    pub neighbor: Option<usize>,
    /// Responsibility is split with a neighbor that runs the same rule.
    pub shared: bool,
}

impl Observation {
    /// Hard barriers of this agent: one per neighbor plus the corridor edges.
    pub fn barriers(&self) -> Vec<BarrierInstance> {
        let bp = self.barrier;
        let mut out = Vec::new();
        for (k, n) in self.neighbors.iter().enumerate() {
            let target = Target::Entity { rel_pos: n.rel_pos, rel_vel: n.rel_vel };
            let mut spec = match n.kind {
                NeighborKind::Obstacle => BarrierSpec::obstacle(bp.obstacle_e),
                _ => BarrierSpec::inter_agent(bp.r0, bp.r1),
            };
            spec.buffer = bp.buffer;
            let shared = n.kind == NeighborKind::Agent && spec.rel_degree == 2;
            out.push(BarrierInstance { spec, target, neighbor: Some(k), shared });
        }
        if let Some(lane) = self.corridor {
            for side in [1.0, -1.0] {
                let mut spec = BarrierSpec::boundary(side);
                spec.buffer = bp.buffer;
                out.push(BarrierInstance { spec, target: Target::Lane(lane), neighbor: None, shared: false });
            }
        }
        out
    }

    /// Smallest true barrier value (no buffer) over the agent's barriers.
    pub fn min_barrier(&self) -> Option<f64> {
        self.barriers()
            .iter()
            .filter_map(|b| {
                let mut s = b.spec;
                s.buffer = 0.0;
                eval_barrier(&s, &self.kin, &b.target).ok()
            })
            .reduce(f64::min)
    }

    /// Fixed-size policy input.
    pub fn features(&self) -> Vec<f64> {
        let mut f = self.ego_features().to_vec();
        let scale = self.sensing_radius;
        let vscale = self.speed_cap.max(1e-9);
        for k in 0..FEATURE_NEIGHBORS {
            match self.neighbors.get(k) {
                Some(n) => f.extend_from_slice(&[
                    n.rel_pos[0] / scale,
                    n.rel_pos[1] / scale,
                    n.rel_vel[0] / vscale,
                    n.rel_vel[1] / vscale,
                    if n.kind == NeighborKind::Agent { 0.0 } else { 1.0 },
                    1.0,
                ]),
                None => f.extend_from_slice(&[0.0; NEIGHBOR_FEATURES]),
            }
        }
        f
    }

    pub fn ego_features(&self) -> [f64; EGO_FEATURES] {
        let k = &self.kin;
        let vscale = self.speed_cap.max(1e-9);
        match self.corridor {
            Some(lane) => [
                k.speed / vscale,
                lane.offset(k.pos) / lane.half_width,
                wrap(k.heading - lane.dir),
                k.pos[0] / MAIN_LENGTH,
                if self.on_ramp { 1.0 } else { 0.0 },
                ((MERGE_POINT - k.pos[0]) / RAMP_LENGTH).clamp(-1.0, 1.0),
                self.lane_index as f64,
                1.0,
            ],
            None => {
                let g = self.goal_point.unwrap_or(k.pos);
                let dx = g[0] - k.pos[0];
                let dy = g[1] - k.pos[1];
                [
                    k.vel[0] / vscale,
                    k.vel[1] / vscale,
                    dx / self.sensing_radius,
                    dy / self.sensing_radius,
                    dx.hypot(dy) / self.sensing_radius,
                    k.heading.cos(),
                    k.heading.sin(),
                    1.0,
                ]
            }
        }
    }
}

pub fn wrap(a: f64) -> f64 {
    use std::f64::consts::PI;
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Per-agent record for the success/time/energy accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentOutcome {
    pub id: usize,
    pub status: Status,
    pub steps: usize,
    pub energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Census {
    pub spawned: usize,
    pub alive: usize,
    pub succeeded: usize,
    pub crashed: usize,
    pub out_of_road: usize,
    pub timed_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepEvents {
    pub events: Vec<(usize, Event)>,
    pub spawned: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub cfg: RunConfig,
    pub params: DynamicsParams,
    pub agents: Vec<Agent>,
    pub frozen: Vec<Frozen>,
    pub obstacles: Vec<Obstacle>,
    pub goals: Vec<[f64; 2]>,
    pub t: usize,
    rng: ChaCha8Rng,
}

fn ramp_angle(lane_width: f64) -> f64 {
    (lane_width / CONFLICT_LENGTH).atan()
}

fn ramp_lane(lane_width: f64) -> Lane {
    Lane { dir: ramp_angle(lane_width), anchor: [MERGE_POINT, 0.0], half_width: lane_width / 2.0 }
}

fn main_lane(i: usize, lane_width: f64) -> Lane {
    Lane::straight(i as f64 * lane_width, lane_width / 2.0)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl WorldState {
    pub fn new(cfg: &RunConfig, seed: u64) -> Result<Self, WorldError> {
        let mut w = WorldState {
            cfg: cfg.clone(),
            params: cfg.dynamics_params(),
            agents: Vec::new(),
            frozen: Vec::new(),
            obstacles: Vec::new(),
            goals: Vec::new(),
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        if !cfg.world.name.is_road() {
            w.place_planar_fixtures()?;
        }
        for slot in 0..cfg.world.num_agents {
            if !w.try_spawn(slot) {
                return Err(WorldError::Spawn(cfg.world.spawn_attempts));
            }
        }
        Ok(w)
    }

    pub fn kind(&self) -> WorldKind {
        self.cfg.world.name
    }

    pub fn barrier_params(&self) -> BarrierParams {
        let s = &self.cfg.safety;
        if self.kind().is_road() {
            BarrierParams { r0: s.r0, r1: s.r1, obstacle_e: 0.0, buffer: s.buffer_road }
        } else {
            let e = (s.obstacle_radius + s.agent_radius).powi(2);
            BarrierParams { r0: 2.0 * s.agent_radius, r1: 0.0, obstacle_e: e, buffer: s.buffer_planar }
        }
    }

    fn speed_cap(&self) -> f64 {
        if self.kind().is_road() {
            self.params.v_max
        } else {
            self.cfg.skills.planar_speed_cap
        }
    }

    pub fn alive(&self) -> impl Iterator<Item = &Agent> {
        self.agents.iter().filter(|a| a.status == Status::Alive)
    }

    pub fn alive_ids(&self) -> Vec<usize> {
        self.alive().map(|a| a.id).collect()
    }

    pub fn agent(&self, id: usize) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn census(&self) -> Census {
        let mut c = Census { spawned: self.agents.len(), ..Default::default() };
        for a in &self.agents {
            match a.status {
                Status::Alive => c.alive += 1,
                Status::Success => c.succeeded += 1,
                Status::Crash => c.crashed += 1,
                Status::OutOfRoad => c.out_of_road += 1,
                Status::Timeout => c.timed_out += 1,
            }
        }
        c
    }

    pub fn outcomes(&self) -> Vec<AgentOutcome> {
        self.agents
            .iter()
            .map(|a| AgentOutcome { id: a.id, status: a.status, steps: a.steps, energy: a.energy })
            .collect()
    }

    pub fn done(&self) -> bool {
        if self.t >= self.cfg.world.horizon {
            return true;
        }
        self.alive().next().is_none() && (!self.cfg.world.respawn() || self.agents.len() >= self.cfg.world.spawn_budget())
    }

    fn position(&self, a: &Agent) -> [f64; 2] {
        kinematics(&a.state, &self.params).map(|k| k.pos).unwrap_or([f64::NAN; 2])
    }

    /// Corridor an agent at `pos` on `route` must stay inside.
    pub fn corridor(&self, route: Route, pos: [f64; 2]) -> Option<(Lane, usize, bool)> {
        if !self.kind().is_road() {
            return None;
        }
        let w = self.cfg.world.lane_width;
        if route == Route::Ramp && pos[0] < MERGE_POINT {
            return Some((ramp_lane(w), 0, true));
        }
        let n = self.cfg.world.main_lanes;
        let i = ((pos[1] / w).round().max(0.0) as usize).min(n - 1);
        Some((main_lane(i, w), i, false))
    }

    fn place_planar_fixtures(&mut self) -> Result<(), WorldError> {
        let s = self.cfg.safety.clone();
        let arena = self.cfg.world.arena;
        let attempts = self.cfg.world.spawn_attempts;
        for _ in 0..self.cfg.world.num_obstacles {
            let pos = (0..attempts)
                .map(|_| [self.rng.gen_range(1.5..arena - 1.5), self.rng.gen_range(1.5..arena - 1.5)])
                .find(|p| self.obstacles.iter().all(|o| dist(*p, o.pos) >= 4.0 * s.obstacle_radius))
                .ok_or(WorldError::Spawn(attempts))?;
            self.obstacles.push(Obstacle { pos, radius: s.obstacle_radius });
        }
        if self.kind() == WorldKind::Spread {
            for _ in 0..self.cfg.world.num_agents {
                let g = self.free_point(1.0, &[]).ok_or(WorldError::Spawn(attempts))?;
                self.goals.push(g);
            }
        }
        Ok(())
    }

    /// A point clear of obstacles by `clear` and of `avoid` points by `clear`.
    fn free_point(&mut self, clear: f64, avoid: &[[f64; 2]]) -> Option<[f64; 2]> {
        let arena = self.cfg.world.arena;
        for _ in 0..self.cfg.world.spawn_attempts {
            let p = [self.rng.gen_range(0.5..arena - 0.5), self.rng.gen_range(0.5..arena - 0.5)];
            let ok_obs = self.obstacles.iter().all(|o| dist(p, o.pos) >= o.radius + clear);
            let ok_pts = avoid.iter().all(|q| dist(p, *q) >= clear);
            if ok_obs && ok_pts {
                return Some(p);
            }
        }
        None
    }

    /// Candidate passes when every barrier between it and the existing
    /// entities, seen from either side, is at least the spawn margin.
    fn spawn_ok(&self, cand: &AgentState) -> bool {
        let bp = self.barrier_params();
        let Ok(k) = kinematics(cand, &self.params) else { return false };
        let margin = if self.kind().is_road() {
            self.cfg.safety.spawn_margin
        } else {
            // Same margin scaled to the planar footprint.
            self.cfg.safety.spawn_margin * bp.r0 * bp.r0 / (self.cfg.safety.r0 * self.cfg.safety.r0)
        };
        let radius = |v: f64| bp.r0 + bp.r1 * v.max(0.0);
        for a in self.alive() {
            let Ok(ka) = kinematics(&a.state, &self.params) else { return false };
            let d2 = (k.pos[0] - ka.pos[0]).powi(2) + (k.pos[1] - ka.pos[1]).powi(2);
            let r = radius(k.speed).max(radius(ka.speed));
            if d2 - r * r < margin + bp.buffer {
                return false;
            }
        }
        for f in &self.frozen {
            let d2 = (k.pos[0] - f.pos[0]).powi(2) + (k.pos[1] - f.pos[1]).powi(2);
            let r = radius(k.speed);
            if d2 - r * r < margin + bp.buffer {
                return false;
            }
        }
        for o in &self.obstacles {
            let d2 = (k.pos[0] - o.pos[0]).powi(2) + (k.pos[1] - o.pos[1]).powi(2);
            if d2 - bp.obstacle_e < margin + bp.buffer {
                return false;
            }
        }
        true
    }

    fn try_spawn(&mut self, slot: usize) -> bool {
        for _ in 0..self.cfg.world.spawn_attempts {
            let (state, route, goal) = match self.kind() {
                WorldKind::Merge => {
                    let v = self.rng.gen_range(3.0..7.0);
                    let s = self.rng.gen_range(0.0..40.0);
                    if self.rng.gen_bool(0.5) {
                        let th = ramp_angle(self.cfg.world.lane_width);
                        let start = [MERGE_POINT - RAMP_LENGTH * th.cos(), -RAMP_LENGTH * th.sin()];
                        let st = BicycleFrenetState { p: start[0] + s * th.cos(), d: start[1] + s * th.sin(), psi: th, v };
                        (AgentState::BicycleFrenet(st), Route::Ramp, [MAIN_LENGTH, 0.0])
                    } else {
                        let lanes = self.cfg.world.main_lanes;
                        let i = self.rng.gen_range(0..lanes);
                        let d = i as f64 * self.cfg.world.lane_width;
                        (AgentState::BicycleFrenet(BicycleFrenetState { p: s, d, psi: 0.0, v }), Route::Main, [MAIN_LENGTH, d])
                    }
                }
                _ => {
                    let Some(p) = self.free_point(0.6, &[]) else { continue };
                    let goal = match self.kind() {
                        WorldKind::Target => {
                            let far = self.cfg.world.arena / 3.0;
                            let mut g = None;
                            for _ in 0..50 {
                                if let Some(q) = self.free_point(0.6, &[]) {
                                    if dist(p, q) >= far {
                                        g = Some(q);
                                        break;
                                    }
                                }
                            }
                            match g {
                                Some(g) => g,
                                None => continue,
                            }
                        }
                        _ => [f64::NAN, f64::NAN],
                    };
                    let state = match self.cfg.model() {
                        Model::BicycleCartesian => {
                            let th = self.rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                            AgentState::BicycleCartesian(BicycleCartesianState::new(p[0], p[1], th, 0.0))
                        }
                        _ => AgentState::DoubleIntegrator(DoubleIntegratorState { px: p[0], py: p[1], vx: 0.0, vy: 0.0 }),
                    };
                    (state, Route::Main, goal)
                }
            };
            if self.spawn_ok(&state) {
                let id = self.agents.len();
                self.agents.push(Agent {
                    id,
                    slot,
                    state,
                    status: Status::Alive,
                    route,
                    goal,
                    spawn_t: self.t,
                    steps: 0,
                    energy: 0.0,
                    last_progress: 0.0,
                });
                return true;
            }
        }
        false
    }

    pub fn observe(&self, id: usize) -> Result<Observation, WorldError> {
        self.agent(id).filter(|a| a.status == Status::Alive).ok_or(WorldError::DeadAgent(id))?;
        self.observe_any(id)
    }

    /// Observation regardless of status; terminated agents see the world as of
    /// their final state.
    pub fn observe_any(&self, id: usize) -> Result<Observation, WorldError> {
        let a = self.agent(id).ok_or(WorldError::DeadAgent(id))?;
        let kin = kinematics(&a.state, &self.params)?;
        let radius = self.cfg.world.sensing_radius();
        let mut neighbors = Vec::new();
        for o in self.alive().filter(|o| o.id != id) {
            let ko = kinematics(&o.state, &self.params)?;
            let rel_pos = [ko.pos[0] - kin.pos[0], ko.pos[1] - kin.pos[1]];
            let d = rel_pos[0].hypot(rel_pos[1]);
            if d <= radius {
                let rel_vel = [ko.vel[0] - kin.vel[0], ko.vel[1] - kin.vel[1]];
                neighbors.push(Neighbor { id: o.id, kind: NeighborKind::Agent, rel_pos, rel_vel, dist: d });
            }
        }
        for f in self.frozen.iter().filter(|f| f.source != id) {
            let rel_pos = [f.pos[0] - kin.pos[0], f.pos[1] - kin.pos[1]];
            let d = rel_pos[0].hypot(rel_pos[1]);
            if d <= radius {
                neighbors.push(Neighbor { id: f.source, kind: NeighborKind::Frozen, rel_pos, rel_vel: [-kin.vel[0], -kin.vel[1]], dist: d });
            }
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            let rel_pos = [o.pos[0] - kin.pos[0], o.pos[1] - kin.pos[1]];
            let d = rel_pos[0].hypot(rel_pos[1]);
            if d <= radius {
                neighbors.push(Neighbor { id: i, kind: NeighborKind::Obstacle, rel_pos, rel_vel: [-kin.vel[0], -kin.vel[1]], dist: d });
            }
        }
        neighbors.sort_by(|x, y| x.dist.total_cmp(&y.dist).then(x.id.cmp(&y.id)));
        let corridor = self.corridor(a.route, kin.pos);
        let w = self.cfg.world.lane_width;
        let (goal, goal_point) = match self.kind() {
            WorldKind::Merge => (Goal::RouteEnd(MAIN_LENGTH), None),
            WorldKind::Target => (Goal::Point(a.goal), Some(a.goal)),
            WorldKind::Spread => {
                let g = self.goals.iter().copied().min_by(|x, y| dist(*x, kin.pos).total_cmp(&dist(*y, kin.pos)));
                (Goal::AnyOf, g)
            }
        };
        Ok(Observation {
            agent: id,
            slot: a.slot,
            t: self.t,
            world: self.kind(),
            state: a.state,
            kin,
            corridor: corridor.map(|c| c.0),
            main_lanes: if self.kind().is_road() { (0..self.cfg.world.main_lanes).map(|i| main_lane(i, w)).collect() } else { Vec::new() },
            lane_index: corridor.map(|c| c.1).unwrap_or(0),
            on_ramp: corridor.map(|c| c.2).unwrap_or(false),
            neighbors,
            goal,
            goal_point,
            speed_cap: self.speed_cap(),
            sensing_radius: radius,
            barrier: self.barrier_params(),
            dt: self.params.dt,
        })
    }

    /// Own features followed by the ego features of every other seat (zeros
    /// for empty seats), for the centralized critic.
    pub fn joint_features(&self, obs: &Observation) -> Vec<f64> {
        let n = self.cfg.world.num_agents;
        let mut f = obs.features();
        let mut others = vec![[0.0; EGO_FEATURES]; n.saturating_sub(1)];
        for a in self.alive().filter(|a| a.id != obs.agent) {
            if let Ok(o) = self.observe(a.id) {
                let k = (a.slot + n - obs.slot - 1) % n;
                if k < others.len() {
                    others[k] = o.ego_features();
                }
            }
        }
        for o in others {
            f.extend_from_slice(&o);
        }
        f
    }

    pub fn joint_feature_dim(&self) -> usize {
        FEATURE_DIM + EGO_FEATURES * self.cfg.world.num_agents.saturating_sub(1)
    }

    fn progress_dir(&self, a: &Agent, pos: [f64; 2]) -> Option<[f64; 2]> {
        self.corridor(a.route, pos).map(|(lane, _, _)| [lane.dir.cos(), lane.dir.sin()])
    }

    fn goal_distance(&self, a: &Agent, pos: [f64; 2]) -> f64 {
        match self.kind() {
            WorldKind::Merge => MAIN_LENGTH - pos[0],
            WorldKind::Target => dist(pos, a.goal),
            WorldKind::Spread => self.goals.iter().map(|g| dist(pos, *g)).fold(f64::INFINITY, f64::min),
        }
    }

    /// Advance every alive agent by one step.
    pub fn step_world(&mut self, controls: &[(usize, Control)]) -> Result<StepEvents, WorldError> {
        let dt = self.params.dt;
        let ids = self.alive_ids();
        let mut next = Vec::with_capacity(ids.len());
        for &id in &ids {
            let u = controls.iter().find(|c| c.0 == id).map(|c| c.1).ok_or(WorldError::MissingControl(id))?;
            let a = self.agent(id).unwrap();
            let pos0 = self.position(a);
            let s = step(&a.state, u, &self.params)?.state;
            next.push((id, s, u, pos0));
        }
        for (id, s, u, pos0) in next {
            let pos1 = kinematics(&s, &self.params)?.pos;
            let idx = self.agents.iter().position(|a| a.id == id).unwrap();
            let progress = {
                let a = &self.agents[idx];
                match self.progress_dir(a, pos0) {
                    Some(dir) => dir[0] * (pos1[0] - pos0[0]) + dir[1] * (pos1[1] - pos0[1]),
                    None => self.goal_distance(a, pos0) - self.goal_distance(a, pos1),
                }
            };
            let a = &mut self.agents[idx];
            a.state = s;
            a.steps += 1;
            a.energy += (u[0] * u[0] + u[1] * u[1]) * dt;
            a.last_progress = progress;
        }
        for f in &mut self.frozen {
            f.countdown = f.countdown.saturating_sub(1);
        }
        self.frozen.retain(|f| f.countdown > 0);

        let tol = self.cfg.safety.audit_tol;
        let bp = self.barrier_params();
        let crash_r2 = bp.r0 * bp.r0;
        let mut events: Vec<(usize, Event)> = ids.iter().map(|&id| (id, Event::None)).collect();
        let pos: Vec<[f64; 2]> = ids.iter().map(|&id| self.position(self.agent(id).unwrap())).collect();
        for i in 0..ids.len() {
            for j in (i + 1)..ids.len() {
                let d2 = (pos[i][0] - pos[j][0]).powi(2) + (pos[i][1] - pos[j][1]).powi(2);
                if d2 - crash_r2 < -tol {
                    events[i].1 = Event::Crash;
                    events[j].1 = Event::Crash;
                }
            }
            for f in &self.frozen {
                let d2 = (pos[i][0] - f.pos[0]).powi(2) + (pos[i][1] - f.pos[1]).powi(2);
                if d2 - crash_r2 < -tol {
                    events[i].1 = Event::Crash;
                }
            }
            for o in &self.obstacles {
                let d2 = (pos[i][0] - o.pos[0]).powi(2) + (pos[i][1] - o.pos[1]).powi(2);
                if d2 - bp.obstacle_e < -tol {
                    events[i].1 = Event::Crash;
                }
            }
        }
        for (k, &id) in ids.iter().enumerate() {
            if events[k].1 != Event::None {
                continue;
            }
            let a = self.agent(id).unwrap();
            if let Some((lane, _, _)) = self.corridor(a.route, pos[k]) {
                if lane.half_width - lane.offset(pos[k]).abs() < -tol {
                    events[k].1 = Event::OutOfRoad;
                    continue;
                }
            }
            let reached = match self.kind() {
                WorldKind::Merge => pos[k][0] >= MAIN_LENGTH,
                _ => self.goal_distance(a, pos[k]) <= self.cfg.world.goal_tolerance,
            };
            if reached {
                events[k].1 = Event::Success;
            } else if a.steps >= self.cfg.world.agent_timeout || self.t + 1 >= self.cfg.world.horizon {
                events[k].1 = Event::Timeout;
            }
        }
        let linger = self.cfg.world.obstacle_linger;
        for (k, &(id, ev)) in events.iter().enumerate() {
            let idx = self.agents.iter().position(|a| a.id == id).unwrap();
            self.agents[idx].status = match ev {
                Event::None => Status::Alive,
                Event::Success => Status::Success,
                Event::Crash => Status::Crash,
                Event::OutOfRoad => Status::OutOfRoad,
                Event::Timeout => Status::Timeout,
            };
            if ev == Event::Crash && linger > 0 {
                self.frozen.push(Frozen { source: id, pos: pos[k], countdown: linger });
            }
        }
        self.t += 1;
        let mut spawned = Vec::new();
        if self.cfg.world.respawn() && self.t < self.cfg.world.horizon {
            let taken: Vec<usize> = self.alive().map(|a| a.slot).collect();
            for slot in 0..self.cfg.world.num_agents {
                if self.agents.len() >= self.cfg.world.spawn_budget() {
                    break;
                }
                if !taken.contains(&slot) && self.try_spawn(slot) {
                    spawned.push(self.agents.last().unwrap().id);
                }
            }
        }
        Ok(StepEvents { events, spawned })
    }

    /// Stage cost of the last step for the agents that acted in it.
    pub fn stage_cost(&self, controls: &[(usize, Control)]) -> f64 {
        controls.iter().map(|&(id, u)| self.agent_stage_cost(id, u)).sum()
    }

    pub fn agent_stage_cost(&self, id: usize, u: Control) -> f64 {
        let w = &self.cfg.world;
        let progress = self.agent(id).map(|a| a.last_progress).unwrap_or(0.0);
        w.w_time + w.w_energy * (u[0] * u[0] + u[1] * u[1]) - w.w_progress * progress
    }

    /// `-sum_j p * 1(b_j < 0) * b_j` over the agent's barriers at its current state.
    pub fn violation_penalty(&self, id: usize) -> f64 {
        let Ok(obs) = self.observe_any(id) else { return 0.0 };
        let p = self.cfg.safety.penalty;
        obs.barriers()
            .iter()
            .filter_map(|b| {
                let mut s = b.spec;
                s.buffer = 0.0;
                eval_barrier(&s, &obs.kin, &b.target).ok()
            })
            .map(|b| p * indicator(b) * b)
            .sum()
    }

    /// Per-agent extrinsic reward `-[l_i - sum_j p 1(b) b]`.
    pub fn agent_reward(&self, id: usize, u: Control) -> f64 {
        -(self.agent_stage_cost(id, u) - self.violation_penalty(id))
    }

    pub fn extrinsic_reward(&self, controls: &[(usize, Control)]) -> f64 {
        controls.iter().map(|&(id, u)| self.agent_reward(id, u)).sum()
    }

    /// Test hook: overwrite an agent's state.
    pub fn set_state(&mut self, id: usize, state: AgentState) {
        if let Some(a) = self.agents.iter_mut().find(|a| a.id == id) {
            a.state = state;
        }
    }

    /// Test hook: drop every agent except those listed (marked timed out).
    pub fn retain_agents(&mut self, keep: &[usize]) {
        for a in &mut self.agents {
            if !keep.contains(&a.id) && a.status == Status::Alive {
                a.status = Status::Timeout;
            }
        }
    }

    pub fn barrier_kinds(&self) -> Vec<BarrierKind> {
        if self.kind().is_road() {
            vec![BarrierKind::InterAgent, BarrierKind::RoadBoundary]
        } else {
            vec![BarrierKind::InterAgent, BarrierKind::StaticObstacle]
        }
    }
}

pub fn make_world(cfg: &RunConfig, seed: u64) -> Result<WorldState, WorldError> {
    WorldState::new(cfg, seed)
}

pub fn indicator(x: f64) -> f64 {
    if x < 0.0 {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub success_rate: f64,
    pub sw_time: f64,
    pub sw_energy: f64,
    /// False when nothing succeeded and the raw means are reported instead.
    pub weighted: bool,
    pub spawned: usize,
}

/// Success rate and success-weighted time (s) and energy over agent outcomes.
pub fn metrics(outcomes: &[AgentOutcome], dt: f64) -> Metrics {
    let n = outcomes.len();
    if n == 0 {
        return Metrics { success_rate: 0.0, sw_time: 0.0, sw_energy: 0.0, weighted: false, spawned: 0 };
    }
    let succ = outcomes.iter().filter(|o| o.status == Status::Success).count() as f64;
    let rate = succ / n as f64;
    let time = outcomes.iter().map(|o| o.steps as f64 * dt).sum::<f64>() / n as f64;
    let energy = outcomes.iter().map(|o| o.energy).sum::<f64>() / n as f64;
    if rate > 0.0 {
        Metrics { success_rate: rate, sw_time: time / rate, sw_energy: energy / rate, weighted: true, spawned: n }
    } else {
        Metrics { success_rate: 0.0, sw_time: time, sw_energy: energy, weighted: false, spawned: n }
    }
}
