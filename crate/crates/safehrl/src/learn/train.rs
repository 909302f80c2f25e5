//! The joint training loop: collect with the stochastic policies, update the
//! skill selector from segments and the program parameters from blended returns.

use super::{
    blend_reward, clip, high_pg_update, high_q_gradient, norm, rewards_to_go, segment_targets, HighPolicy, JointSegment, LearnError, LowPolicy,
    UpdateReport, GRAD_CLIP,
};
use crate::config::{HighLearner, RunConfig, WorldSection};
use crate::harness::rollout::{catalog_for, partition, phi_range, run_episode, AgentStream, EpisodeLog, HighMode, LowMode, RolloutError, RolloutSpec};
use crate::harness::{stream, MetricRow};
use crate::skills::catalog;
use crate::smdp::SegmentTransition;
use crate::worlds::{make_world, metrics, AgentOutcome, FEATURE_DIM};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Learn(#[from] LearnError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArtifacts {
    pub high: HighPolicy,
    pub low: LowPolicy,
    pub history: Vec<MetricRow>,
    pub env_steps: usize,
    /// Set when an update produced non-finite parameters; the policies are the
    /// last finite ones.
    pub aborted: Option<String>,
}

/// Fresh policies for a config, drawn from stream `[0, 2]` of `seed`.
pub fn init_policies(cfg: &RunConfig, seed: u64) -> Result<(HighPolicy, LowPolicy), TrainError> {
    let mut rng = stream(seed, &[0, 2]);
    let cat = catalog_for(cfg);
    let n_skills = catalog(cat, &cfg.skills).len();
    let joint_dim = make_world(cfg, 0).map_err(RolloutError::from)?.joint_feature_dim();
    let high = HighPolicy::new(FEATURE_DIM, joint_dim, n_skills, &cfg.learn, &mut rng);
    let range = phi_range(cfg);
    let low = LowPolicy::new(FEATURE_DIM, n_skills, &cat.default_phi(range), range, &cfg.learn, &mut rng);
    Ok((high, low))
}

/// Summary row over a batch of episodes.
pub fn metric_row(iteration: u64, logs: &[EpisodeLog], env_steps: usize) -> MetricRow {
    let outcomes: Vec<AgentOutcome> = logs.iter().flat_map(|l| l.outcomes.iter().copied()).collect();
    let dt = logs.first().map_or(0.1, |l| l.dt);
    let m = metrics(&outcomes, dt);
    let streams: Vec<&AgentStream> = logs.iter().flat_map(|l| &l.streams).collect();
    let mean_r_h = if streams.is_empty() { 0.0 } else { streams.iter().map(|s| s.r_h.iter().sum::<f64>()).sum::<f64>() / streams.len() as f64 };
    let sum = |f: fn(&EpisodeLog) -> usize| logs.iter().map(f).sum();
    MetricRow {
        iteration,
        success_rate: m.success_rate,
        sw_time: m.sw_time,
        sw_energy: m.sw_energy,
        mean_r_h,
        env_steps,
        violations: sum(|l| l.violations),
        infeasible: sum(|l| l.infeasible),
        fallbacks: sum(|l| l.fallbacks),
        crashes: sum(|l| l.crashes),
        out_of_road: sum(|l| l.out_of_road),
    }
}

/// Segments that start at the same absolute step inside one group and run
/// equally long share a team reward; anything else stands alone.
fn joint_segments(cfg: &RunConfig, logs: &[EpisodeLog]) -> Vec<JointSegment> {
    let part = partition(cfg);
    let mut out = Vec::new();
    for log in logs {
        let mut keyed: Vec<((usize, usize, usize), SegmentTransition)> = Vec::new();
        for st in &log.streams {
            for s in &st.segments {
                keyed.push(((part.group_of(st.slot), st.spawn_t + s.t_abs, s.k), s.clone()));
            }
        }
        keyed.sort_by_key(|(k, s)| (*k, s.agent));
        for chunk in keyed.chunk_by(|a, b| a.0 == b.0) {
            let members: Vec<SegmentTransition> = chunk.iter().map(|(_, s)| s.clone()).collect();
            let same_reward = members.iter().all(|m| m.r_seg == members[0].r_seg);
            if same_reward {
                let (reward, k, done) = (members[0].r_seg, members[0].k, members.iter().any(|m| m.done));
                out.push(JointSegment { members, reward, k, done });
            } else {
                for m in members {
                    out.push(JointSegment { reward: m.r_seg, k: m.k, done: m.done, members: vec![m] });
                }
            }
        }
    }
    out
}

/// TD residual of each segment under the Q net, aligned with the segment order
/// of the streams.
fn q_advantages(policy: &HighPolicy, segs: &[SegmentTransition], gamma: f64) -> Vec<f64> {
    segs.iter()
        .map(|s| {
            let q = policy.actor.forward(&s.s_start)[s.z];
            let next = if s.done {
                0.0
            } else {
                let qn = policy.actor.forward(&s.s_end);
                qn.iter().zip(&s.mask_end).filter(|(_, &m)| m).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max).max(f64::MIN)
            };
            s.r_seg + if s.done { 0.0 } else { gamma.powi(s.k as i32) * next } - q
        })
        .collect()
}

fn high_q_update<R: rand::Rng>(policy: &mut HighPolicy, batch: &[JointSegment], batch_version: u64, cfg: &RunConfig, rng: &mut R) -> Result<UpdateReport, LearnError> {
    if batch_version != policy.version {
        return Err(LearnError::StaleBatch { batch: batch_version, current: policy.version });
    }
    let mut report = UpdateReport::default();
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    for _ in 0..cfg.learn.high_epochs.max(1) {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.learn.minibatch.max(1)) {
            let sb: Vec<JointSegment> = chunk.iter().map(|&i| batch[i].clone()).collect();
            let mut g = high_q_gradient(&policy.actor, &sb, cfg.learn.gamma);
            report.actor_grad_norm = norm(&g);
            clip(&mut g, GRAD_CLIP);
            policy.actor_opt.step(&mut policy.actor.params, &g);
        }
    }
    if !policy.actor.is_finite() {
        return Err(LearnError::Numerical("high q network"));
    }
    policy.version += 1;
    Ok(report)
}

/// Fill every low-level record with its discounted blended return, using the
/// segment advantages of its stream.
fn assign_blended_returns(logs: &mut [EpisodeLog], adv: &[f64], cfg: &RunConfig) {
    let (lambda, gamma, n) = (cfg.learn.lambda, cfg.learn.gamma, cfg.world.num_agents);
    let mut offset = 0;
    for log in logs.iter_mut() {
        for st in &mut log.streams {
            let a = &adv[offset..offset + st.segments.len()];
            offset += st.segments.len();
            if st.low.len() != st.r_l.len() {
                continue;
            }
            let blended: Vec<f64> = st.r_l.iter().zip(&st.step_segment).map(|(&r, &k)| blend_reward(r, a[k], lambda, n)).collect();
            for (rec, g) in st.low.iter_mut().zip(rewards_to_go(&blended, gamma)) {
                rec.g_tilde = g;
            }
        }
    }
}

/// Train both levels from scratch. Episodes of iteration `i` use indices
/// `i * batch_episodes ..` of `seed`.
pub fn train(cfg: &RunConfig, seed: u64) -> Result<TrainArtifacts, TrainError> {
    let (high, low) = init_policies(cfg, seed)?;
    train_from(cfg, seed, high, low)
}

pub fn train_from(cfg: &RunConfig, seed: u64, mut high: HighPolicy, mut low: LowPolicy) -> Result<TrainArtifacts, TrainError> {
    let l = &cfg.learn;
    let mut history = Vec::new();
    let mut env_steps = 0;
    let mut aborted = None;
    for it in 0..l.iterations {
        if env_steps >= l.max_env_steps {
            break;
        }
        let mut logs = Vec::with_capacity(l.batch_episodes);
        {
            let spec = RolloutSpec {
                high: HighMode::Policy { policy: &high, greedy: false },
                low: LowMode::Policy { policy: &low, stochastic: l.train_low },
                keep_steps: false,
            };
            for b in 0..l.batch_episodes {
                let left = l.max_env_steps.saturating_sub(env_steps);
                if left == 0 {
                    break;
                }
                // The last episode is cut short so the step budget is never exceeded.
                let capped;
                let ecfg = if cfg.world.horizon > left {
                    capped = RunConfig { world: WorldSection { horizon: left, ..cfg.world.clone() }, ..cfg.clone() };
                    &capped
                } else {
                    cfg
                };
                let log = run_episode(ecfg, seed, (it * l.batch_episodes + b) as u64, &spec)?;
                env_steps += log.env_steps;
                logs.push(log);
            }
        }
        history.push(metric_row(it as u64, &logs, env_steps));

        let segs: Vec<SegmentTransition> = logs.iter().flat_map(|g| g.streams.iter().flat_map(|s| s.segments.iter().cloned())).collect();
        let adv = match l.high_learner {
            HighLearner::Pg => segment_targets(&high, &segs, l.gamma, l.gae_lambda).0,
            HighLearner::Q => q_advantages(&high, &segs, l.gamma),
        };
        let (high_prev, low_prev) = (high.clone(), low.clone());
        let mut upd = stream(seed, &[it as u64, 3]);
        let version = high.version;
        let res = match l.high_learner {
            HighLearner::Pg => high_pg_update(&mut high, &segs, version, l, &mut upd),
            HighLearner::Q => high_q_update(&mut high, &joint_segments(cfg, &logs), version, cfg, &mut upd),
        };
        let res = res.and_then(|_| {
            if !l.train_low {
                return Ok(());
            }
            assign_blended_returns(&mut logs, &adv, cfg);
            let batch: Vec<_> = logs.iter().flat_map(|g| g.streams.iter().flat_map(|s| s.low.iter().cloned())).collect();
            let version = low.version;
            super::low_pg_update(&mut low, &batch, version, l, &mut upd).map(|_| ())
        });
        match res {
            Ok(()) => {}
            Err(LearnError::Numerical(what)) => {
                high = high_prev;
                low = low_prev;
                aborted = Some(format!("non-finite value in {what} at iteration {it}"));
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(TrainArtifacts { high, low, history, env_steps, aborted })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub row: MetricRow,
    pub spawned: usize,
    pub weighted: bool,
    pub min_barrier: Option<f64>,
    pub certified_steps: usize,
}

/// Which high-level selector an evaluation runs.
pub enum EvalPolicy<'a> {
    Random,
    Scripted,
    Learned { high: &'a HighPolicy, low: &'a LowPolicy },
}

/// Evaluation episodes live on their own branch of the seed so they never
/// coincide with training episodes.
pub fn evaluate(cfg: &RunConfig, policy: EvalPolicy, episodes: usize, seed: u64) -> Result<EvalReport, TrainError> {
    let eval_seed = crate::harness::derive_seed(seed, &[u64::MAX]);
    let spec = match policy {
        EvalPolicy::Random => RolloutSpec { high: HighMode::Random, low: LowMode::Default, keep_steps: false },
        EvalPolicy::Scripted => RolloutSpec { high: HighMode::Scripted, low: LowMode::Default, keep_steps: false },
        EvalPolicy::Learned { high, low } => RolloutSpec {
            high: HighMode::Policy { policy: high, greedy: true },
            low: LowMode::Policy { policy: low, stochastic: false },
            keep_steps: false,
        },
    };
    let mut logs = Vec::with_capacity(episodes);
    let mut steps = 0;
    for ep in 0..episodes {
        let log = run_episode(cfg, eval_seed, ep as u64, &spec)?;
        steps += log.env_steps;
        logs.push(log);
    }
    let row = metric_row(0, &logs, steps);
    let outcomes: Vec<AgentOutcome> = logs.iter().flat_map(|l| l.outcomes.iter().copied()).collect();
    let m = metrics(&outcomes, logs.first().map_or(0.1, |l| l.dt));
    let min_barrier = logs.iter().filter_map(|l| l.min_certified_barrier).reduce(f64::min);
    Ok(EvalReport { episodes, row, spawned: m.spawned, weighted: m.weighted, min_barrier, certified_steps: logs.iter().map(|l| l.certified_steps).sum() })
}
