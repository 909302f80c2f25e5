//! Run configuration. Every section has defaults; unknown keys are rejected.

use crate::dynamics::{DynamicsParams, Model};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    Merge,
    Target,
    Spread,
}

impl WorldKind {
    pub fn is_road(self) -> bool {
        self == WorldKind::Merge
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub name: WorldKind,
    pub num_agents: usize,
    pub dt: f64,
    /// Defaults to 30 m on the road and 3 units in the plane.
    pub sensing_radius: Option<f64>,
    pub lane_width: f64,
    pub main_lanes: usize,
    /// Continuous flow; defaults to on for merge and off for the planar worlds.
    pub respawn: Option<bool>,
    /// Total spawns per episode including the initial wave; defaults to `2 * num_agents`.
    pub spawn_budget: Option<usize>,
    pub spawn_attempts: usize,
    pub agent_timeout: usize,
    pub horizon: usize,
    pub obstacle_linger: usize,
    pub num_obstacles: usize,
    pub arena: f64,
    pub goal_tolerance: f64,
    pub w_time: f64,
    pub w_energy: f64,
    pub w_progress: f64,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            name: WorldKind::Merge,
            num_agents: 4,
            dt: 0.1,
            sensing_radius: None,
            lane_width: 3.5,
            main_lanes: 1,
            respawn: None,
            spawn_budget: None,
            spawn_attempts: 200,
            agent_timeout: 600,
            horizon: 1500,
            obstacle_linger: 10,
            num_obstacles: 2,
            arena: 8.0,
            goal_tolerance: 0.3,
            w_time: 0.1,
            w_energy: 0.01,
            w_progress: 1.0,
        }
    }
}

impl WorldSection {
    pub fn sensing_radius(&self) -> f64 {
        self.sensing_radius.unwrap_or(if self.name.is_road() { 30.0 } else { 3.0 })
    }

    pub fn respawn(&self) -> bool {
        self.respawn.unwrap_or(self.name.is_road())
    }

    pub fn spawn_budget(&self) -> usize {
        if self.respawn() {
            self.spawn_budget.unwrap_or(2 * self.num_agents).max(self.num_agents)
        } else {
            self.num_agents
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanarModel {
    DoubleIntegrator,
    BicycleCartesian,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DynamicsSection {
    pub planar_model: PlanarModel,
    pub wheelbase: Option<f64>,
    pub accel_min: Option<f64>,
    pub accel_max: Option<f64>,
    pub steer_max: Option<f64>,
    pub v_min: Option<f64>,
    pub v_max: Option<f64>,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            planar_model: PlanarModel::DoubleIntegrator,
            wheelbase: None,
            accel_min: None,
            accel_max: None,
            steer_max: None,
            v_min: None,
            v_max: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SafetySection {
    /// Road footprint radius and speed gain of `r(v) = r0 + r1 * max(v, 0)`.
    pub r0: f64,
    pub r1: f64,
    /// Planar agent body radius; two agents must stay `2 * agent_radius` apart.
    pub agent_radius: f64,
    pub obstacle_radius: f64,
    /// Tightening of the barrier inside the QP rows (road, plane).
    pub buffer_road: f64,
    pub buffer_planar: f64,
    pub penalty: f64,
    pub phi_max: f64,
    pub eps_phi: f64,
    /// Minimum barrier value for a spawn slot, relative to the row buffer.
    pub spawn_margin: f64,
    pub audit_tol: f64,
}

impl Default for SafetySection {
    fn default() -> Self {
        Self {
            r0: 5.0,
            r1: 1.0,
            agent_radius: 0.2,
            obstacle_radius: 0.5,
            buffer_road: 0.15,
            buffer_planar: 0.02,
            penalty: 10.0,
            phi_max: 10.0,
            eps_phi: 0.01,
            spawn_margin: 10.0,
            audit_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SkillsSection {
    pub t_max: usize,
    pub dv: f64,
    pub dv_planar: f64,
    pub dtheta: f64,
    /// Target speed of the planar turn skills and cap of the planar speed skills.
    pub v_mag: f64,
    pub planar_speed_cap: f64,
    pub tol_v: f64,
    pub tol_d: f64,
    pub cruise_distance: f64,
    pub intrinsic: [f64; 4],
    pub progress_bonus: f64,
    pub lateral_gain: f64,
    pub heading_clamp: f64,
    pub heading_gain: f64,
    /// Scale of the learnable linear objective term around its midpoint.
    pub linear_scale: f64,
}

impl Default for SkillsSection {
    fn default() -> Self {
        Self {
            t_max: 50,
            dv: 1.0,
            dv_planar: 0.25,
            dtheta: 0.3,
            v_mag: 0.5,
            planar_speed_cap: 1.0,
            tol_v: 0.1,
            tol_d: 0.1,
            cruise_distance: 10.0,
            intrinsic: [0.1, 1.0, 0.5, 0.5],
            progress_bonus: 0.0,
            lateral_gain: 0.4,
            heading_clamp: 0.5,
            heading_gain: 2.0,
            linear_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Score,
    Pathwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighLearner {
    Pg,
    Q,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Continue,
    Any,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One joint objective over the team reward.
    Off,
    /// Every agent slot is its own group.
    Singletons,
    /// Explicit partition of agent slots.
    Groups(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LearnSection {
    pub gamma: f64,
    pub lambda: f64,
    pub lr_high: f64,
    pub lr_low: f64,
    pub lr_critic: f64,
    pub iterations: usize,
    pub batch_episodes: usize,
    /// Stop training once this many environment steps were collected.
    pub max_env_steps: usize,
    pub estimator: Estimator,
    pub high_learner: HighLearner,
    pub grouping: Grouping,
    pub termination: Termination,
    pub hidden: usize,
    pub sigma: f64,
    pub high_epochs: usize,
    pub minibatch: usize,
    /// Trace decay across an agent's consecutive segments; 0 is the one-step advantage.
    pub gae_lambda: f64,
    pub normalize_advantages: bool,
    /// Entropy bonus on the skill distribution.
    pub entropy: f64,
    pub train_low: bool,
    pub eval_episodes: usize,
}

impl Default for LearnSection {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.3,
            lr_high: 3e-4,
            lr_low: 1e-4,
            lr_critic: 1e-3,
            iterations: 60,
            batch_episodes: 1,
            max_env_steps: 50_000,
            estimator: Estimator::Score,
            high_learner: HighLearner::Pg,
            grouping: Grouping::Singletons,
            termination: Termination::Continue,
            hidden: 64,
            sigma: 0.3,
            high_epochs: 1,
            minibatch: 64,
            gae_lambda: 0.0,
            normalize_advantages: false,
            entropy: 0.0,
            train_low: true,
            eval_episodes: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldSection,
    pub dynamics: DynamicsSection,
    pub safety: SafetySection,
    pub skills: SkillsSection,
    pub learn: LearnSection,
}

impl RunConfig {
    /// Defaults for a named world.
    pub fn for_world(name: WorldKind) -> Self {
        let mut c = Self::default();
        c.world.name = name;
        if name != WorldKind::Merge {
            c.world.num_agents = 3;
            c.world.horizon = 300;
            c.world.agent_timeout = 300;
        }
        c
    }

    pub fn model(&self) -> Model {
        match (self.world.name, self.dynamics.planar_model) {
            (WorldKind::Merge, _) => Model::BicycleFrenet,
            (_, PlanarModel::DoubleIntegrator) => Model::DoubleIntegrator,
            (_, PlanarModel::BicycleCartesian) => Model::BicycleCartesian,
        }
    }

    pub fn dynamics_params(&self) -> DynamicsParams {
        let mut p = if self.world.name.is_road() { DynamicsParams::road() } else { DynamicsParams::planar() };
        let d = &self.dynamics;
        p.dt = self.world.dt;
        if let Some(x) = d.wheelbase {
            p.wheelbase = x;
        }
        if let Some(x) = d.accel_min {
            p.accel_min = x;
        }
        if let Some(x) = d.accel_max {
            p.accel_max = x;
        }
        if let Some(x) = d.steer_max {
            p.steer_max = x;
            p.steer_min = -x;
        }
        if let Some(x) = d.v_min {
            p.v_min = x;
        }
        if let Some(x) = d.v_max {
            p.v_max = x;
        }
        p
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let w = &self.world;
        let pos = |key: &str, x: f64| if x > 0.0 && x.is_finite() { Ok(()) } else { Err(invalid(key, format!("must be positive, got {x}"))) };
        let nonneg = |key: &str, x: f64| if x >= 0.0 && x.is_finite() { Ok(()) } else { Err(invalid(key, format!("must be nonnegative, got {x}"))) };
        pos("world.dt", w.dt)?;
        pos("world.lane_width", w.lane_width)?;
        pos("world.arena", w.arena)?;
        pos("world.goal_tolerance", w.goal_tolerance)?;
        pos("world.sensing_radius", w.sensing_radius())?;
        if w.num_agents == 0 {
            return Err(invalid("world.num_agents", "need at least one agent"));
        }
        if w.main_lanes == 0 {
            return Err(invalid("world.main_lanes", "need at least one lane"));
        }
        if w.agent_timeout == 0 || w.horizon == 0 {
            return Err(invalid("world.horizon", "horizon and agent_timeout must be positive"));
        }
        for (k, x) in [("world.w_time", w.w_time), ("world.w_energy", w.w_energy), ("world.w_progress", w.w_progress)] {
            nonneg(k, x)?;
        }
        let s = &self.safety;
        pos("safety.r0", s.r0)?;
        nonneg("safety.r1", s.r1)?;
        pos("safety.agent_radius", s.agent_radius)?;
        pos("safety.obstacle_radius", s.obstacle_radius)?;
        nonneg("safety.buffer_road", s.buffer_road)?;
        nonneg("safety.buffer_planar", s.buffer_planar)?;
        pos("safety.penalty", s.penalty)?;
        pos("safety.eps_phi", s.eps_phi)?;
        if s.phi_max <= s.eps_phi {
            return Err(invalid("safety.phi_max", "must exceed eps_phi"));
        }
        nonneg("safety.audit_tol", s.audit_tol)?;
        let k = &self.skills;
        if k.t_max == 0 {
            return Err(invalid("skills.t_max", "must be at least 1"));
        }
        for (key, x) in [
            ("skills.dv", k.dv),
            ("skills.dv_planar", k.dv_planar),
            ("skills.dtheta", k.dtheta),
            ("skills.v_mag", k.v_mag),
            ("skills.planar_speed_cap", k.planar_speed_cap),
            ("skills.tol_v", k.tol_v),
            ("skills.tol_d", k.tol_d),
            ("skills.cruise_distance", k.cruise_distance),
        ] {
            pos(key, x)?;
        }
        if k.intrinsic.iter().any(|&c| !(c >= 0.0)) {
            return Err(invalid("skills.intrinsic", "coefficients must be nonnegative"));
        }
        nonneg("skills.progress_bonus", k.progress_bonus)?;
        let l = &self.learn;
        if !(l.gamma > 0.0 && l.gamma <= 1.0) {
            return Err(invalid("learn.gamma", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&l.lambda) {
            return Err(invalid("learn.lambda", "must lie in [0, 1]"));
        }
        for (key, x) in [("learn.lr_high", l.lr_high), ("learn.lr_low", l.lr_low), ("learn.lr_critic", l.lr_critic)] {
            nonneg(key, x)?;
        }
        nonneg("learn.sigma", l.sigma)?;
        nonneg("learn.entropy", l.entropy)?;
        if !(0.0..=1.0).contains(&l.gae_lambda) {
            return Err(invalid("learn.gae_lambda", "must lie in [0, 1]"));
        }
        if l.estimator == Estimator::Score && l.train_low && l.sigma == 0.0 {
            return Err(invalid("learn.sigma", "score-function estimator needs a positive exploration scale"));
        }
        if l.hidden == 0 || l.minibatch == 0 || l.batch_episodes == 0 {
            return Err(invalid("learn.hidden", "network and batch sizes must be positive"));
        }
        if let Grouping::Groups(groups) = &l.grouping {
            crate::learn::GroupPartition::new(groups.clone(), w.num_agents).map_err(|e| invalid("learn.grouping", e.to_string()))?;
        }
        Ok(())
    }

    /// Hex digest of the canonical serialization; stored in checkpoints.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parse and validate a TOML document; an empty document gives all defaults.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
    }

    #[test]
    fn lane_width_override() {
        let c = parse_config("[world]\nlane_width = 3.25\n").unwrap();
        assert_eq!(c.world.lane_width, 3.25);
    }

    #[test]
    fn negative_dt_rejected() {
        let e = parse_config("[world]\ndt = -0.1\n").unwrap_err();
        assert!(e.to_string().contains("world.dt"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(parse_config("[world]\nlanes = 2\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(parse_config("bogus = 1\n"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn parse_error_names_the_key() {
        let e = parse_config("[learn]\ngamma = \"high\"\n").unwrap_err();
        assert!(e.to_string().contains("gamma"), "{e}");
    }

    #[test]
    fn grouping_forms() {
        let c = parse_config("[learn]\ngrouping = \"off\"\n").unwrap();
        assert_eq!(c.learn.grouping, Grouping::Off);
        let c = parse_config("[learn]\ngrouping = { groups = [[0, 1], [2, 3]] }\n").unwrap();
        assert_eq!(c.learn.grouping, Grouping::Groups(vec![vec![0, 1], vec![2, 3]]));
        assert!(parse_config("[learn]\ngrouping = { groups = [[0, 1], [1, 2, 3]] }\n").is_err());
    }

    #[test]
    fn zero_sigma_with_score_estimator_rejected() {
        assert!(parse_config("[learn]\nsigma = 0.0\n").is_err());
        assert!(parse_config("[learn]\nsigma = 0.0\ntrain_low = false\n").is_ok());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
