//! One episode: skill selection, the per-step program, world stepping and the
//! bookkeeping both learners consume.

use super::stream;
use crate::config::{Estimator, Grouping, RunConfig, Termination};
use crate::dynamics::Control;
use crate::learn::{sample_phi, sample_skill, GroupPartition, HighPolicy, LearnError, LowPolicy, LowRecord};
use crate::qpcore::QPStatus;
use crate::skills::{act, catalog, intrinsic_reward, is_initiable, phi_gradient, start, terminate, Catalog, PhiRange, SafetyEvent, SafetyEventKind, SkillError, SkillId, SkillRuntime, SkillSpec};
use crate::smdp::{segment_return, SegmentTransition};
use crate::worlds::{make_world, AgentOutcome, Event, Observation, Status, WorldError};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Skill(#[from] SkillError),
    #[error(transparent)]
    Learn(#[from] LearnError),
}

pub enum HighMode<'a> {
    Random,
    Scripted,
    Policy { policy: &'a HighPolicy, greedy: bool },
}

pub enum LowMode<'a> {
    Default,
    Policy { policy: &'a LowPolicy, stochastic: bool },
}

pub struct RolloutSpec<'a> {
    pub high: HighMode<'a>,
    pub low: LowMode<'a>,
    /// Keep per-step records for the log.
    pub keep_steps: bool,
}

impl<'a> RolloutSpec<'a> {
    pub fn random() -> Self {
        RolloutSpec { high: HighMode::Random, low: LowMode::Default, keep_steps: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub agent: usize,
    pub slot: usize,
    pub skill: SkillId,
    pub decision: bool,
    pub control: Control,
    pub phi: Vec<f64>,
    pub r_h: f64,
    pub r_l: f64,
    pub status: QPStatus,
    pub min_barrier: Option<f64>,
}

/// Everything one agent did during an episode, indexed by its own step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgentStream {
    pub id: usize,
    pub slot: usize,
    pub spawn_t: usize,
    /// Own extrinsic reward.
    pub r_own: Vec<f64>,
    /// Reward the high level learns from (own or group sum).
    pub r_h: Vec<f64>,
    pub r_l: Vec<f64>,
    pub low: Vec<LowRecord>,
    pub segments: Vec<SegmentTransition>,
    /// Index into `segments` of the segment each step belongs to.
    pub step_segment: Vec<usize>,
    /// Local steps at which the running skill reported termination.
    pub terminations: Vec<usize>,
    pub decisions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub streams: Vec<AgentStream>,
    pub steps: Vec<StepRecord>,
    pub events: Vec<SafetyEvent>,
    pub outcomes: Vec<AgentOutcome>,
    pub env_steps: usize,
    pub agent_steps: usize,
    /// Smallest barrier value reached right after a certified step.
    pub min_certified_barrier: Option<f64>,
    pub certified_steps: usize,
    pub violations: usize,
    pub infeasible: usize,
    pub fallbacks: usize,
    pub crashes: usize,
    pub out_of_road: usize,
    pub dt: f64,
}

impl EpisodeLog {
    /// Per-slot reward streams over absolute time, for the group identities.
    pub fn slot_streams(&self, n: usize) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.env_steps]; n];
        for s in &self.streams {
            for (k, r) in s.r_own.iter().enumerate() {
                out[s.slot][s.spawn_t + k] += r;
            }
        }
        out
    }
}

struct Open {
    z: usize,
    t0: usize,
    s_start: Vec<f64>,
    joint_start: Vec<f64>,
    mask: Vec<bool>,
    log_prob: f64,
}

struct Running {
    spec_idx: usize,
    rt: SkillRuntime,
    open: Open,
}

pub fn catalog_for(cfg: &RunConfig) -> Catalog {
    if cfg.world.name.is_road() {
        Catalog::Road
    } else {
        Catalog::Planar
    }
}

pub fn phi_range(cfg: &RunConfig) -> PhiRange {
    PhiRange::new(cfg.safety.eps_phi, cfg.safety.phi_max)
}

pub fn partition(cfg: &RunConfig) -> GroupPartition {
    let n = cfg.world.num_agents;
    match &cfg.learn.grouping {
        Grouping::Off => GroupPartition::whole(n),
        Grouping::Singletons => GroupPartition::singletons(n),
        Grouping::Groups(g) => GroupPartition::new(g.clone(), n).unwrap_or_else(|_| GroupPartition::singletons(n)),
    }
}

/// Hand-written selector: push speed when allowed, otherwise hold or steer
/// toward the goal.
pub fn scripted_choice(specs: &[SkillSpec], obs: &Observation, mask: &[bool]) -> usize {
    let find = |id: SkillId| specs.iter().position(|s| s.id == id).filter(|&i| mask[i]);
    match catalog_for_obs(obs) {
        Catalog::Road => find(SkillId::Accelerate).or(find(SkillId::Cruise)).unwrap_or_else(|| mask.iter().position(|&m| m).unwrap()),
        Catalog::Planar => {
            let k = &obs.kin;
            let g = obs.goal_point.unwrap_or(k.pos);
            let goal_dir = (g[1] - k.pos[1]).atan2(g[0] - k.pos[0]);
            let heading = if k.speed.abs() > 0.05 { k.vel[1].atan2(k.vel[0]) } else { goal_dir };
            let err = crate::worlds::wrap(goal_dir - heading);
            let pick = if err > 0.15 {
                find(SkillId::TurnLeft)
            } else if err < -0.15 {
                find(SkillId::TurnRight)
            } else {
                find(SkillId::SpeedUp).or(find(SkillId::TurnLeft))
            };
            pick.unwrap_or_else(|| mask.iter().position(|&m| m).unwrap())
        }
    }
}

fn catalog_for_obs(obs: &Observation) -> Catalog {
    if obs.world.is_road() {
        Catalog::Road
    } else {
        Catalog::Planar
    }
}

/// Run one seeded episode. The world draws from stream `[episode, 0]` and the
/// policies from `[episode, 1]`.
pub fn run_episode(cfg: &RunConfig, seed: u64, episode: u64, spec: &RolloutSpec) -> Result<EpisodeLog, RolloutError> {
    let mut world = make_world(cfg, stream(seed, &[episode, 0]).gen())?;
    let mut rng = stream(seed, &[episode, 1]);
    let cat = catalog_for(cfg);
    let specs = catalog(cat, &cfg.skills);
    let range = phi_range(cfg);
    let default_phi = cat.default_phi(range);
    let masks: Vec<Vec<bool>> = specs.iter().map(|s| s.active_mask()).collect();
    let part = partition(cfg);
    let gamma = cfg.learn.gamma;
    let pathwise = cfg.learn.estimator == Estimator::Pathwise;
    let tol = cfg.safety.audit_tol;

    let mut log = EpisodeLog {
        streams: Vec::new(),
        steps: Vec::new(),
        events: Vec::new(),
        outcomes: Vec::new(),
        env_steps: 0,
        agent_steps: 0,
        min_certified_barrier: None,
        certified_steps: 0,
        violations: 0,
        infeasible: 0,
        fallbacks: 0,
        crashes: 0,
        out_of_road: 0,
        dt: world.params.dt,
    };
    let mut running: Vec<Option<Running>> = Vec::new();

    let close = |st: &mut AgentStream, run: Running, s_end: Vec<f64>, joint_end: Vec<f64>, mask_end: Vec<bool>, done: bool| {
        let k = st.r_h.len() - run.open.t0;
        st.segments.push(SegmentTransition {
            agent: st.id,
            slot: st.slot,
            z: run.open.z,
            k,
            r_seg: segment_return(&st.r_h[run.open.t0..], gamma),
            s_start: run.open.s_start,
            joint_start: run.open.joint_start,
            s_end,
            joint_end,
            mask_start: run.open.mask,
            mask_end,
            done,
            t_abs: run.open.t0,
            log_prob: run.open.log_prob,
        });
    };

    while !world.done() {
        let t = world.t;
        let ids = world.alive_ids();
        for &id in &ids {
            while log.streams.len() <= id {
                let nid = log.streams.len();
                let a = world.agent(nid);
                log.streams.push(AgentStream {
                    id: nid,
                    slot: a.map(|a| a.slot).unwrap_or(0),
                    spawn_t: a.map(|a| a.spawn_t).unwrap_or(t),
                    ..Default::default()
                });
                running.push(None);
            }
        }
        let obs: Vec<Observation> = ids.iter().map(|&id| world.observe(id)).collect::<Result<_, _>>()?;
        let feats: Vec<Vec<f64>> = obs.iter().map(|o| o.features()).collect();
        let term: Vec<bool> = ids
            .iter()
            .zip(&obs)
            .map(|(&id, o)| match &running[id] {
                Some(r) => terminate(&specs[r.spec_idx], &r.rt, o, t, &cfg.skills),
                None => true,
            })
            .collect();
        let any_term = ids.iter().zip(&term).any(|(&id, &x)| x && running[id].is_some());
        let all_term = ids.iter().zip(&term).all(|(&id, &x)| x || running[id].is_none());

        let mut controls = Vec::with_capacity(ids.len());
        let mut step_info = Vec::with_capacity(ids.len());
        for (k, &id) in ids.iter().enumerate() {
            let o = &obs[k];
            let local = t - log.streams[id].spawn_t;
            if term[k] && running[id].is_some() {
                log.streams[id].terminations.push(local);
            }
            let decide = match (&running[id], cfg.learn.termination) {
                (None, _) => true,
                (Some(_), Termination::Continue) => term[k],
                (Some(_), Termination::Any) => any_term,
                (Some(r), Termination::All) => all_term || r.rt.elapsed(t) >= specs[r.spec_idx].t_max,
            };
            if decide {
                let mask: Vec<bool> = specs.iter().map(|s| is_initiable(s, o)).collect();
                if !mask.iter().any(|&m| m) {
                    return Err(LearnError::EmptyMask.into());
                }
                let joint = world.joint_features(o);
                if let Some(prev) = running[id].take() {
                    close(&mut log.streams[id], prev, feats[k].clone(), joint.clone(), mask.clone(), false);
                }
                let (z, lp) = match &spec.high {
                    HighMode::Random => {
                        let opts: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
                        let z = opts[rng.gen_range(0..opts.len())];
                        (z, -(opts.len() as f64).ln())
                    }
                    HighMode::Scripted => (scripted_choice(&specs, o, &mask), 0.0),
                    HighMode::Policy { policy, greedy: true } => (policy.greedy(&feats[k], &mask)?, 0.0),
                    HighMode::Policy { policy, greedy: false } => sample_skill(policy, &feats[k], &mask, &mut rng)?,
                };
                let rt = start(&specs[z], o, &cfg.skills);
                running[id] = Some(Running { spec_idx: z, rt, open: Open { z, t0: local, s_start: feats[k].clone(), joint_start: joint, mask, log_prob: lp } });
                log.streams[id].decisions.push(local);
            }
            let run = running[id].as_ref().unwrap();
            let z = run.spec_idx;
            let (phi, pre) = match &spec.low {
                LowMode::Default => (default_phi.clone(), None),
                LowMode::Policy { policy, stochastic: true } => {
                    let s = sample_phi(policy, &feats[k], z, &masks[z], &mut rng);
                    (s.phi, Some(s.pre))
                }
                LowMode::Policy { policy, stochastic: false } => (policy.mean_phi(&feats[k], z), None),
            };
            let a = act(&specs[z], &run.rt, o, &phi, &world.params, &cfg.skills, range)?;
            let r_l = intrinsic_reward(&specs[z], &run.rt, o, a.control, &cfg.skills);
            let dr_dphi = if pathwise && a.certified() {
                let c1 = specs[z].intrinsic[0];
                let mut d = vec![0.0; a.program.qp.n()];
                d[0] = -2.0 * c1 * a.control[0];
                d[1] = -2.0 * c1 * a.control[1];
                phi_gradient(&a.program, &a.solution, &d, phi.values.len()).ok()
            } else {
                None
            };
            if let Some(pre) = pre {
                log.streams[id].low.push(LowRecord { feat: feats[k].clone(), skill: z, active: masks[z].clone(), pre, g_tilde: 0.0, dr_dphi });
            }
            match a.status {
                QPStatus::Optimal => log.certified_steps += 1,
                _ => {
                    log.infeasible += 1;
                    log.fallbacks += 1;
                }
            }
            log.events.extend(a.events.iter().copied());
            controls.push((id, a.control));
            step_info.push((decide, specs[z].id, phi.values, r_l, a.status, a.certified()));
        }

        let ev = world.step_world(&controls)?;
        log.env_steps += 1;
        log.agent_steps += ids.len();

        let own: Vec<f64> = controls.iter().map(|&(id, u)| world.agent_reward(id, u)).collect();
        let mut group_sum = vec![0.0; part.groups.len()];
        for (k, &id) in ids.iter().enumerate() {
            group_sum[part.group_of(log.streams[id].slot)] += own[k];
        }
        for (k, &id) in ids.iter().enumerate() {
            let (decision, skill, phi, r_l, status, certified) = step_info[k].clone();
            let after = world.observe_any(id)?;
            let b = after.min_barrier();
            if certified {
                if let Some(b) = b {
                    log.min_certified_barrier = Some(log.min_certified_barrier.map_or(b, |m: f64| m.min(b)));
                    if b < -tol {
                        log.violations += 1;
                        log.events.push(SafetyEvent { step: t, agent: id, kind: SafetyEventKind::Violation, min_barrier_value: Some(b) });
                    }
                }
            }
            let st = &mut log.streams[id];
            let r_h = group_sum[part.group_of(st.slot)];
            st.r_own.push(own[k]);
            st.r_h.push(r_h);
            st.r_l.push(r_l);
            st.step_segment.push(st.segments.len());
            if spec.keep_steps {
                log.steps.push(StepRecord { t, agent: id, slot: st.slot, skill, decision, control: controls[k].1, phi, r_h, r_l, status, min_barrier: b });
            }
            match ev.events[k].1 {
                Event::Crash => log.crashes += 1,
                Event::OutOfRoad => log.out_of_road += 1,
                _ => {}
            }
            if world.agent(id).map(|a| a.status) != Some(Status::Alive) {
                let run = running[id].take().unwrap();
                let mask = run.open.mask.clone();
                let joint = world.joint_features(&after);
                close(st, run, after.features(), joint, mask, true);
            }
        }
    }
    // Horizon reached: the remaining segments are cut, not terminal.
    for id in 0..running.len() {
        if let Some(run) = running[id].take() {
            let o = world.observe_any(id)?;
            let mask: Vec<bool> = specs.iter().map(|s| is_initiable(s, &o)).collect();
            let joint = world.joint_features(&o);
            close(&mut log.streams[id], run, o.features(), joint, mask, false);
        }
    }
    log.outcomes = world.outcomes();
    Ok(log)
}
