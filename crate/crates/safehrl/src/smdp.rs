//! Decision epochs, segment returns and SMDP advantages.

use crate::config::Termination;
use serde::{Deserialize, Serialize};

/// One skill execution seen from the high level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTransition {
    pub agent: usize,
    pub slot: usize,
    pub z: usize,
    pub k: usize,
    pub r_seg: f64,
    /// Local features at initiation.
    pub s_start: Vec<f64>,
    /// Critic input at initiation.
    pub joint_start: Vec<f64>,
    pub s_end: Vec<f64>,
    pub joint_end: Vec<f64>,
    pub mask_start: Vec<bool>,
    pub mask_end: Vec<bool>,
    pub done: bool,
    /// Start step, counted from the agent's spawn.
    pub t_abs: usize,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub epochs: Vec<Vec<usize>>,
}

/// Decision steps per agent, given the steps at which each agent's running
/// skill reported termination.
pub fn decision_epochs(terminations: &[Vec<usize>], scheme: Termination) -> EpochSchedule {
    let n = terminations.len();
    let epochs = match scheme {
        Termination::Continue => terminations
            .iter()
            .map(|ts| {
                let mut e = vec![0];
                e.extend(ts.iter().copied().filter(|&t| t > 0));
                e.dedup();
                e
            })
            .collect(),
        Termination::Any | Termination::All => {
            let mut shared = vec![0];
            loop {
                let last = *shared.last().unwrap();
                let next: Vec<Option<usize>> = terminations.iter().map(|ts| ts.iter().copied().find(|&t| t > last)).collect();
                let pick = if scheme == Termination::Any {
                    next.iter().flatten().min().copied()
                } else if next.iter().all(|x| x.is_some()) {
                    next.iter().flatten().max().copied()
                } else {
                    None
                };
                match pick {
                    Some(t) => shared.push(t),
                    None => break,
                }
            }
            vec![shared; n]
        }
    };
    EpochSchedule { epochs }
}

pub fn segment_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut w = 1.0;
    for r in rewards {
        acc += w * r;
        w *= gamma;
    }
    acc
}

/// Discounted return of one agent stream rebuilt from its segments.
pub fn trajectory_return(segments: &[SegmentTransition], gamma: f64) -> f64 {
    segments.iter().map(|s| gamma.powi(s.t_abs as i32) * s.r_seg).sum()
}

pub fn flat_return(rewards: &[f64], gamma: f64) -> f64 {
    segment_return(rewards, gamma)
}

/// One-step SMDP TD advantage `R + gamma^k V(s') (1 - done) - V(s)`.
pub fn high_advantage(v_start: f64, v_end: f64, seg: &SegmentTransition, gamma: f64) -> f64 {
    let boot = if seg.done { 0.0 } else { gamma.powi(seg.k as i32) * v_end };
    seg.r_seg + boot - v_start
}
