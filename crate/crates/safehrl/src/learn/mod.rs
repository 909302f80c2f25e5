//! Policies, critics and the update rules.

use crate::config::{Estimator, LearnSection};
use crate::skills::{PhiRange, PhiVector};
use crate::smdp::{high_advantage, SegmentTransition};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

mod train;
pub use train::{evaluate, init_policies, metric_row, train, train_from, EvalPolicy, EvalReport, TrainArtifacts, TrainError};

#[derive(Debug, Error, PartialEq)]
pub enum LearnError {
    #[error("no initiable skill")]
    EmptyMask,
    #[error("batch collected with policy version {batch}, current is {current}")]
    StaleBatch { batch: u64, current: u64 },
    #[error("non-finite value in {0}")]
    Numerical(&'static str),
}

#[derive(Debug, Error, PartialEq)]
pub enum PartitionError {
    #[error("agent {0} is in more than one group")]
    Overlap(usize),
    #[error("agent {0} is in no group")]
    Missing(usize),
    #[error("agent {0} is out of range")]
    OutOfRange(usize),
    #[error("empty group")]
    EmptyGroup,
}

/// Fully connected net, tanh hidden layers, linear output. Parameters live in
/// one flat vector: per layer the row-major weights, then the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Layer inputs recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    inputs: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new<R: Rng>(sizes: &[usize], out_scale: f64, rng: &mut R) -> Self {
        let mut params = Vec::new();
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let (i, o) = (sizes[l], sizes[l + 1]);
            let a = (6.0 / (i + o) as f64).sqrt();
            let s = if l + 1 == layers { out_scale } else { 1.0 };
            params.extend((0..i * o).map(|_| s * rng.gen_range(-a..a)));
            params.extend(std::iter::repeat_n(0.0, o));
        }
        Mlp { sizes: sizes.to_vec(), params }
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_out(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Offset of the output bias.
    pub fn out_bias_offset(&self) -> usize {
        self.params.len() - self.n_out()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, Cache) {
        debug_assert_eq!(x.len(), self.sizes[0]);
        let layers = self.sizes.len() - 1;
        let mut inputs = Vec::with_capacity(layers);
        let mut h = x.to_vec();
        let mut off = 0;
        for l in 0..layers {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + ni * no];
            let b = &self.params[off + ni * no..off + ni * no + no];
            let mut y: Vec<f64> = (0..no).map(|r| b[r] + w[r * ni..(r + 1) * ni].iter().zip(&h).map(|(a, c)| a * c).sum::<f64>()).collect();
            if l + 1 < layers {
                for v in &mut y {
                    *v = v.tanh();
                }
            }
            inputs.push(std::mem::replace(&mut h, y));
            off += ni * no + no;
        }
        (h, Cache { inputs })
    }

    /// Accumulate `d out / d params` contracted with `dout` into `grad`;
    /// returns the gradient with respect to the input.
    pub fn backward(&self, cache: &Cache, dout: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let layers = self.sizes.len() - 1;
        let mut offs = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offs.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut delta = dout.to_vec();
        for l in (0..layers).rev() {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let o = offs[l];
            let x = &cache.inputs[l];
            for r in 0..no {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                for c in 0..ni {
                    grad[o + r * ni + c] += d * x[c];
                }
                grad[o + ni * no + r] += d;
            }
            let mut dx = vec![0.0; ni];
            for r in 0..no {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let w = &self.params[o + r * ni..o + (r + 1) * ni];
                for c in 0..ni {
                    dx[c] += w[c] * d;
                }
            }
            if l > 0 {
                // x is the tanh output of the previous layer.
                for c in 0..ni {
                    dx[c] *= 1.0 - x[c] * x[c];
                }
            }
            delta = dx;
        }
        delta
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// One descent step on `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
    }
}

pub fn norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn clip(g: &mut [f64], max: f64) {
    let n = norm(g);
    if n > max {
        for x in g {
            *x *= max / n;
        }
    }
}

const GRAD_CLIP: f64 = 5.0;

pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, LearnError> {
    let m = logits.iter().zip(mask).filter(|(_, &k)| k).map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(LearnError::EmptyMask);
    }
    let e: Vec<f64> = logits.iter().zip(mask).map(|(l, &k)| if k { (l - m).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

fn categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Shared skill selector with a centralized value critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighPolicy {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub version: u64,
}

impl HighPolicy {
    pub fn new<R: Rng>(feat_dim: usize, joint_dim: usize, n_skills: usize, cfg: &LearnSection, rng: &mut R) -> Self {
        let h = cfg.hidden;
        let actor = Mlp::new(&[feat_dim, h, h, n_skills], 0.01, rng);
        let critic = Mlp::new(&[joint_dim, h, h, 1], 1.0, rng);
        HighPolicy {
            actor_opt: Adam::new(actor.n_params(), cfg.lr_high),
            critic_opt: Adam::new(critic.n_params(), cfg.lr_critic),
            actor,
            critic,
            version: 0,
        }
    }

    pub fn probs(&self, feat: &[f64], mask: &[bool]) -> Result<Vec<f64>, LearnError> {
        masked_softmax(&self.actor.forward(feat), mask)
    }

    pub fn value(&self, joint: &[f64]) -> f64 {
        self.critic.forward(joint)[0]
    }

    pub fn greedy(&self, feat: &[f64], mask: &[bool]) -> Result<usize, LearnError> {
        let p = self.probs(feat, mask)?;
        let mut best = 0;
        for i in 0..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

/// Draw a skill from the masked softmax; returns the index and its log-probability.
pub fn sample_skill<R: Rng>(policy: &HighPolicy, feat: &[f64], mask: &[bool], rng: &mut R) -> Result<(usize, f64), LearnError> {
    let p = policy.probs(feat, mask)?;
    let z = categorical(&p, rng);
    Ok((z, p[z].ln()))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateReport {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

/// Gradient of `-sum_i w_i A_i log pi(z_i | s_i)` with respect to the actor.
pub fn high_pg_gradient(policy: &HighPolicy, batch: &[SegmentTransition], adv: &[f64], weight: &[f64]) -> Result<(f64, Vec<f64>), LearnError> {
    let mut grad = vec![0.0; policy.actor.n_params()];
    let mut loss = 0.0;
    let n = batch.len().max(1) as f64;
    for (i, s) in batch.iter().enumerate() {
        let (logits, cache) = policy.actor.forward_cached(&s.s_start);
        let p = masked_softmax(&logits, &s.mask_start)?;
        let c = weight[i] * adv[i] / n;
        if c == 0.0 {
            continue;
        }
        loss -= c * p[s.z].ln();
        let dl: Vec<f64> = (0..p.len()).map(|j| if s.mask_start[j] { -c * ((j == s.z) as u8 as f64 - p[j]) } else { 0.0 }).collect();
        policy.actor.backward(&cache, &dl, &mut grad);
    }
    Ok((loss, grad))
}

/// Critic loss `mean (V(s) - y)^2 / 2` and its gradient.
fn critic_gradient(policy: &HighPolicy, batch: &[SegmentTransition], target: &[f64]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; policy.critic.n_params()];
    let mut loss = 0.0;
    let n = batch.len().max(1) as f64;
    for (i, s) in batch.iter().enumerate() {
        let (v, cache) = policy.critic.forward_cached(&s.joint_start);
        let e = v[0] - target[i];
        loss += 0.5 * e * e / n;
        policy.critic.backward(&cache, &[e / n], &mut grad);
    }
    (loss, grad)
}

/// Gradient of `-coef * mean_i H(pi(. | s_i))`, added into `grad`.
fn entropy_gradient(policy: &HighPolicy, batch: &[SegmentTransition], coef: f64, grad: &mut [f64]) -> Result<(), LearnError> {
    if coef == 0.0 {
        return Ok(());
    }
    let n = batch.len().max(1) as f64;
    for s in batch {
        let (logits, cache) = policy.actor.forward_cached(&s.s_start);
        let p = masked_softmax(&logits, &s.mask_start)?;
        let h: f64 = -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
        let dl: Vec<f64> = p.iter().map(|&x| if x > 0.0 { coef / n * x * (x.ln() + h) } else { 0.0 }).collect();
        policy.actor.backward(&cache, &dl, grad);
    }
    Ok(())
}

/// Advantages and critic targets under the current critic. Consecutive
/// segments of one agent are chained with trace decay `lam`; `lam = 0` gives
/// the one-step SMDP advantage.
pub fn segment_targets(policy: &HighPolicy, batch: &[SegmentTransition], gamma: f64, lam: f64) -> (Vec<f64>, Vec<f64>) {
    let v0: Vec<f64> = batch.iter().map(|s| policy.value(&s.joint_start)).collect();
    let mut adv = vec![0.0; batch.len()];
    for i in (0..batch.len()).rev() {
        let s = &batch[i];
        let v1 = if s.done { 0.0 } else { policy.value(&s.joint_end) };
        let delta = high_advantage(v0[i], v1, s, gamma);
        let chained = batch.get(i + 1).filter(|nx| !s.done && nx.agent == s.agent && nx.slot == s.slot && nx.t_abs == s.t_abs + s.k);
        adv[i] = delta + chained.map_or(0.0, |_| gamma.powi(s.k as i32) * lam * adv[i + 1]);
    }
    let tgt = adv.iter().zip(&v0).map(|(a, v)| a + v).collect();
    (adv, tgt)
}

/// Policy-gradient step with the critic as baseline, then critic regression on
/// the SMDP targets. Segments are weighted by `gamma^t_abs`.
pub fn high_pg_update<R: Rng>(
    policy: &mut HighPolicy,
    batch: &[SegmentTransition],
    batch_version: u64,
    cfg: &LearnSection,
    rng: &mut R,
) -> Result<UpdateReport, LearnError> {
    if batch_version != policy.version {
        return Err(LearnError::StaleBatch { batch: batch_version, current: policy.version });
    }
    let (mut adv, tgt) = segment_targets(policy, batch, cfg.gamma, cfg.gae_lambda);
    if cfg.normalize_advantages && adv.len() > 1 {
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        let sd = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / adv.len() as f64).sqrt();
        for a in &mut adv {
            *a = (*a - mean) / (sd + 1e-8);
        }
    }
    let weight: Vec<f64> = batch.iter().map(|s| cfg.gamma.powi(s.t_abs as i32)).collect();
    let mut report = UpdateReport::default();
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    let mb = cfg.minibatch.max(1);
    for _ in 0..cfg.high_epochs.max(1) {
        idx.shuffle(rng);
        for chunk in idx.chunks(mb) {
            let sb: Vec<SegmentTransition> = chunk.iter().map(|&i| batch[i].clone()).collect();
            let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
            let w: Vec<f64> = chunk.iter().map(|&i| weight[i]).collect();
            let y: Vec<f64> = chunk.iter().map(|&i| tgt[i]).collect();
            let (al, mut ag) = high_pg_gradient(policy, &sb, &a, &w)?;
            entropy_gradient(policy, &sb, cfg.entropy, &mut ag)?;
            let (cl, mut cg) = critic_gradient(policy, &sb, &y);
            report.actor_loss = al;
            report.critic_loss = cl;
            report.actor_grad_norm = norm(&ag);
            report.critic_grad_norm = norm(&cg);
            clip(&mut ag, GRAD_CLIP);
            clip(&mut cg, GRAD_CLIP);
            policy.actor_opt.step(&mut policy.actor.params, &ag);
            policy.critic_opt.step(&mut policy.critic.params, &cg);
        }
    }
    if !policy.actor.is_finite() || !policy.critic.is_finite() {
        return Err(LearnError::Numerical("high policy"));
    }
    policy.version += 1;
    Ok(report)
}

/// Segments that started together and share one team reward.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSegment {
    pub members: Vec<SegmentTransition>,
    pub reward: f64,
    pub k: usize,
    pub done: bool,
}

fn max_masked(q: &[f64], mask: &[bool]) -> f64 {
    q.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max)
}

/// Squared TD loss of the additive mixer `Q_tot = sum_i Q_i(o_i, z_i)`.
/// `qnets[m]` scores member `m`; the max over joint skills splits per member.
pub fn high_q_loss(qnets: &[&Mlp], batch: &[JointSegment], gamma: f64) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let mut loss = 0.0;
    for j in batch {
        let mut q = 0.0;
        let mut q_next = 0.0;
        for (m, s) in j.members.iter().enumerate() {
            let net = qnets[m.min(qnets.len() - 1)];
            q += net.forward(&s.s_start)[s.z];
            if !j.done {
                q_next += max_masked(&net.forward(&s.s_end), &s.mask_end).max(f64::MIN);
            }
        }
        let y = j.reward + if j.done { 0.0 } else { gamma.powi(j.k as i32) * q_next };
        loss += (y - q).powi(2);
    }
    loss / batch.len() as f64
}

/// Gradient of [`high_q_loss`] with the target held fixed, for a shared net.
pub fn high_q_gradient(net: &Mlp, batch: &[JointSegment], gamma: f64) -> Vec<f64> {
    let mut grad = vec![0.0; net.n_params()];
    let n = batch.len().max(1) as f64;
    for j in batch {
        let mut q = 0.0;
        let mut q_next = 0.0;
        let mut caches = Vec::new();
        for s in &j.members {
            let (out, cache) = net.forward_cached(&s.s_start);
            q += out[s.z];
            caches.push((cache, out.len(), s.z));
            if !j.done {
                q_next += max_masked(&net.forward(&s.s_end), &s.mask_end);
            }
        }
        let y = j.reward + if j.done { 0.0 } else { gamma.powi(j.k as i32) * q_next };
        let e = 2.0 * (q - y) / n;
        for (cache, no, z) in caches {
            let mut d = vec![0.0; no];
            d[z] = e;
            net.backward(&cache, &d, &mut grad);
        }
    }
    grad
}

pub fn blend_reward(r_l: f64, a_high: f64, lambda: f64, n: usize) -> f64 {
    lambda * a_high / n as f64 + (1.0 - lambda) * r_l
}

/// Reward-to-go of a reward stream.
pub fn rewards_to_go(r: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; r.len()];
    let mut acc = 0.0;
    for t in (0..r.len()).rev() {
        acc = r[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Both sides of the blended-objective decomposition for one agent stream:
/// segment-level advantage form and the flat sum of blended rewards.
pub fn proposition_sides(r_l: &[f64], segments: &[(usize, usize, f64)], lambda: f64, n: usize, gamma: f64) -> (f64, f64) {
    let j_l: f64 = r_l.iter().enumerate().map(|(t, r)| gamma.powi(t as i32) * r).sum();
    let seg_part: f64 = segments
        .iter()
        .map(|&(t0, k, a)| {
            let geo = if gamma == 1.0 { k as f64 } else { (1.0 - gamma.powi(k as i32)) / (1.0 - gamma) };
            gamma.powi(t0 as i32) * geo * a
        })
        .sum();
    let lhs = lambda / n as f64 * seg_part + (1.0 - lambda) * j_l;
    let mut rhs = 0.0;
    for &(t0, k, a) in segments {
        for t in t0..t0 + k {
            rhs += gamma.powi(t as i32) * blend_reward(r_l[t], a, lambda, n);
        }
    }
    (lhs, rhs)
}

/// A partition of the agent slots into reward-sharing groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub groups: Vec<Vec<usize>>,
    of: Vec<usize>,
}

impl GroupPartition {
    pub fn new(groups: Vec<Vec<usize>>, n: usize) -> Result<Self, PartitionError> {
        let mut of = vec![usize::MAX; n];
        for (gi, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(PartitionError::EmptyGroup);
            }
            for &a in g {
                if a >= n {
                    return Err(PartitionError::OutOfRange(a));
                }
                if of[a] != usize::MAX {
                    return Err(PartitionError::Overlap(a));
                }
                of[a] = gi;
            }
        }
        if let Some(a) = of.iter().position(|&g| g == usize::MAX) {
            return Err(PartitionError::Missing(a));
        }
        Ok(GroupPartition { groups, of })
    }

    pub fn singletons(n: usize) -> Self {
        GroupPartition { groups: (0..n).map(|i| vec![i]).collect(), of: (0..n).collect() }
    }

    pub fn whole(n: usize) -> Self {
        GroupPartition { groups: vec![(0..n).collect()], of: vec![0; n] }
    }

    pub fn group_of(&self, slot: usize) -> usize {
        self.of[slot]
    }

    pub fn n_agents(&self) -> usize {
        self.of.len()
    }
}

/// Discounted return of every group; `streams[i]` is agent slot `i`'s
/// per-step reward, indexed by absolute step.
pub fn group_returns(streams: &[Vec<f64>], partition: &GroupPartition, gamma: f64) -> Result<Vec<f64>, PartitionError> {
    if streams.len() != partition.n_agents() {
        return Err(PartitionError::Missing(streams.len().min(partition.n_agents())));
    }
    Ok(partition
        .groups
        .iter()
        .map(|g| g.iter().map(|&i| streams[i].iter().enumerate().map(|(t, r)| gamma.powi(t as i32) * r).sum::<f64>()).sum())
        .collect())
}

/// Skill-conditioned generator of program parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowPolicy {
    pub net: Mlp,
    pub opt: Adam,
    pub n_skills: usize,
    pub sigma: f64,
    pub range: PhiRange,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiSample {
    pub pre: Vec<f64>,
    pub phi: PhiVector,
    pub log_prob: f64,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Map a pre-squash value into `(lo, hi]`.
pub fn squash(x: f64, range: PhiRange) -> f64 {
    let v = range.lo + (range.hi - range.lo) * sigmoid(x);
    let floor = f64::from_bits(range.lo.to_bits() + 1);
    v.max(floor).min(range.hi)
}

pub fn squash_derivative(x: f64, range: PhiRange) -> f64 {
    let s = sigmoid(x);
    (range.hi - range.lo) * s * (1.0 - s)
}

pub fn unsquash(v: f64, range: PhiRange) -> f64 {
    let s = ((v - range.lo) / (range.hi - range.lo)).clamp(1e-9, 1.0 - 1e-9);
    (s / (1.0 - s)).ln()
}

impl LowPolicy {
    pub fn new<R: Rng>(feat_dim: usize, n_skills: usize, default_phi: &PhiVector, range: PhiRange, cfg: &LearnSection, rng: &mut R) -> Self {
        let h = cfg.hidden;
        let mut net = Mlp::new(&[feat_dim + n_skills, h, h, default_phi.values.len()], 0.01, rng);
        let off = net.out_bias_offset();
        for (i, &v) in default_phi.values.iter().enumerate() {
            net.params[off + i] = unsquash(v, range);
        }
        LowPolicy { opt: Adam::new(net.n_params(), cfg.lr_low), net, n_skills, sigma: cfg.sigma, range, version: 0 }
    }

    pub fn input(&self, feat: &[f64], skill: usize) -> Vec<f64> {
        let mut x = feat.to_vec();
        x.extend((0..self.n_skills).map(|i| if i == skill { 1.0 } else { 0.0 }));
        x
    }

    pub fn mean_pre(&self, feat: &[f64], skill: usize) -> Vec<f64> {
        self.net.forward(&self.input(feat, skill))
    }

    pub fn mean_phi(&self, feat: &[f64], skill: usize) -> PhiVector {
        PhiVector { values: self.mean_pre(feat, skill).into_iter().map(|x| squash(x, self.range)).collect() }
    }
}

/// Gaussian sample around the network output on the active entries, squashed
/// into the box. Inactive entries sit at the squashed mean and carry no density.
pub fn sample_phi<R: Rng>(policy: &LowPolicy, feat: &[f64], skill: usize, active: &[bool], rng: &mut R) -> PhiSample {
    let mu = policy.mean_pre(feat, skill);
    let sigma = policy.sigma;
    let mut pre = mu.clone();
    let mut log_prob = 0.0;
    for i in 0..mu.len() {
        if !active[i] || sigma == 0.0 {
            continue;
        }
        let xi: f64 = rng.sample(StandardNormal);
        pre[i] = mu[i] + sigma * xi;
        log_prob += -0.5 * xi * xi - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - squash_derivative(pre[i], policy.range).ln();
    }
    let phi = PhiVector { values: pre.iter().map(|&x| squash(x, policy.range)).collect() };
    PhiSample { pre, phi, log_prob }
}

/// One low-level training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRecord {
    pub feat: Vec<f64>,
    pub skill: usize,
    pub active: Vec<bool>,
    pub pre: Vec<f64>,
    /// Discounted blended return from this step.
    pub g_tilde: f64,
    /// Derivative of the immediate low-level reward with respect to phi, for
    /// the pathwise estimator.
    pub dr_dphi: Option<Vec<f64>>,
}

/// Ascent direction on the low-level objective, returned as a descent gradient.
pub fn low_gradient(policy: &LowPolicy, batch: &[LowRecord], estimator: Estimator) -> Vec<f64> {
    let mut grad = vec![0.0; policy.net.n_params()];
    let n = batch.len().max(1) as f64;
    let baseline = batch.iter().map(|r| r.g_tilde).sum::<f64>() / n;
    let s2 = policy.sigma * policy.sigma;
    for r in batch {
        let (mu, cache) = policy.net.forward_cached(&policy.input(&r.feat, r.skill));
        let mut d = vec![0.0; mu.len()];
        for i in 0..mu.len() {
            if !r.active[i] {
                continue;
            }
            d[i] = match estimator {
                Estimator::Score if s2 > 0.0 => -(r.pre[i] - mu[i]) / s2 * (r.g_tilde - baseline) / n,
                Estimator::Score => 0.0,
                Estimator::Pathwise => match &r.dr_dphi {
                    Some(g) => -g[i] * squash_derivative(r.pre[i], policy.range) / n,
                    None => 0.0,
                },
            };
        }
        policy.net.backward(&cache, &d, &mut grad);
    }
    grad
}

pub fn low_pg_update<R: Rng>(
    policy: &mut LowPolicy,
    batch: &[LowRecord],
    batch_version: u64,
    cfg: &LearnSection,
    rng: &mut R,
) -> Result<UpdateReport, LearnError> {
    if batch_version != policy.version {
        return Err(LearnError::StaleBatch { batch: batch_version, current: policy.version });
    }
    let mut report = UpdateReport::default();
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    idx.shuffle(rng);
    for chunk in idx.chunks(cfg.minibatch.max(1) * 4) {
        let sb: Vec<LowRecord> = chunk.iter().map(|&i| batch[i].clone()).collect();
        let mut g = low_gradient(policy, &sb, cfg.estimator);
        report.actor_grad_norm = norm(&g);
        clip(&mut g, GRAD_CLIP);
        policy.opt.step(&mut policy.net.params, &g);
    }
    if !policy.net.is_finite() {
        return Err(LearnError::Numerical("low policy"));
    }
    policy.version += 1;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seg(s: Vec<f64>, z: usize, mask: Vec<bool>) -> SegmentTransition {
        SegmentTransition {
            agent: 0,
            slot: 0,
            z,
            k: 1,
            r_seg: 0.0,
            joint_start: s.clone(),
            s_end: s.clone(),
            joint_end: s.clone(),
            mask_end: mask.clone(),
            s_start: s,
            mask_start: mask,
            done: true,
            t_abs: 0,
            log_prob: 0.0,
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[3, 5, 4, 2], 1.0, &mut rng);
        let x = [0.3, -0.7, 1.1];
        let w = [0.8, -1.3];
        let f = |n: &Mlp, x: &[f64]| n.forward(x).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = net.forward_cached(&x);
        let mut g = vec![0.0; net.n_params()];
        let dx = net.backward(&cache, &w, &mut g);
        let h = 1e-6;
        for i in 0..net.n_params() {
            let mut p = net.clone();
            p.params[i] += h;
            let mut m = net.clone();
            m.params[i] -= h;
            let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(1e-3), "param {i}: {fd} vs {}", g[i]);
        }
        for i in 0..3 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (f(&net, &xp) - f(&net, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_examples() {
        let p = masked_softmax(&[0.0; 5], &[true; 5]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let p = masked_softmax(&[3.0, -1.0, 2.0], &[false, true, false]).unwrap();
        assert_eq!(p, vec![0.0, 1.0, 0.0]);
        assert_eq!(masked_softmax(&[1.0], &[false]), Err(LearnError::EmptyMask));
    }

    #[test]
    fn forced_skill_has_zero_log_prob() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pol = HighPolicy::new(4, 4, 3, &LearnSection::default(), &mut rng);
        let (z, lp) = sample_skill(&pol, &[0.1, 0.2, 0.3, 0.4], &[false, false, true], &mut rng).unwrap();
        assert_eq!((z, lp), (2, 0.0));
        assert_eq!(sample_skill(&pol, &[0.0; 4], &[false; 3], &mut rng), Err(LearnError::EmptyMask));
    }

    #[test]
    fn squash_examples() {
        let r = PhiRange::new(0.01, 10.0);
        assert!((squash(0.0, r) - 5.005).abs() < 1e-12);
        assert_eq!(squash(1e6, r), 10.0);
        assert!(squash(-1e6, r) > 0.01);
        assert!((squash(unsquash(2.0, r), r) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn zero_sigma_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = LearnSection::default();
        cfg.sigma = 0.0;
        let d = PhiVector { values: vec![1.0, 2.0, 3.0] };
        let pol = LowPolicy::new(2, 2, &d, PhiRange::default(), &cfg, &mut rng);
        let s = sample_phi(&pol, &[0.5, -0.5], 1, &[true; 3], &mut rng);
        assert_eq!(s.phi, pol.mean_phi(&[0.5, -0.5], 1));
    }

    #[test]
    fn zero_advantages_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pol = HighPolicy::new(2, 2, 2, &LearnSection::default(), &mut rng);
        let b = vec![seg(vec![0.1, 0.2], 0, vec![true, true]); 3];
        let (_, g) = high_pg_gradient(&pol, &b, &[0.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(norm(&g), 0.0);
    }

    #[test]
    fn two_skill_gradient_is_analytic() {
        // Single linear layer: logits = W s + b, so d log p_z / d b_j = 1[j=z] - p_j.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pol = HighPolicy::new(2, 2, 2, &LearnSection::default(), &mut rng);
        pol.actor = Mlp { sizes: vec![2, 2], params: vec![0.5, -0.2, 0.1, 0.4, 0.3, -0.1] };
        let s = vec![1.0, 2.0];
        let l0: f64 = 0.5 - 0.4 + 0.3;
        let l1 = 0.1 + 0.8 - 0.1;
        let p1 = 1.0 / (1.0 + (l0 - l1).exp());
        let p0 = 1.0 - p1;
        let a = 1.7;
        let (_, g) = high_pg_gradient(&pol, &[seg(s.clone(), 1, vec![true, true])], &[a], &[1.0]).unwrap();
        let gb = [-a * (0.0 - p0), -a * (1.0 - p1)];
        assert!((g[4] - gb[0]).abs() < 1e-12 && (g[5] - gb[1]).abs() < 1e-12);
        assert!((g[0] - gb[0] * s[0]).abs() < 1e-12 && (g[3] - gb[1] * s[1]).abs() < 1e-12);
    }

    #[test]
    fn bandit_over_skills_improves() {
        // Skill 1 pays 1, skill 0 pays 0; the expected return must rise.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut cfg = LearnSection::default();
        cfg.lr_high = 1e-2;
        cfg.high_epochs = 1;
        let mut pol = HighPolicy::new(2, 2, 2, &cfg, &mut rng);
        let s = vec![1.0, 0.0];
        let p_start = pol.probs(&s, &[true, true]).unwrap()[1];
        for _ in 0..100 {
            let mut batch = Vec::new();
            for _ in 0..16 {
                let (z, lp) = sample_skill(&pol, &s, &[true, true], &mut rng).unwrap();
                let mut t = seg(s.clone(), z, vec![true, true]);
                t.r_seg = z as f64;
                t.log_prob = lp;
                batch.push(t);
            }
            let v = pol.version;
            high_pg_update(&mut pol, &batch, v, &cfg, &mut rng).unwrap();
        }
        let p_end = pol.probs(&s, &[true, true]).unwrap()[1];
        assert!(p_end > 0.95 && p_end > p_start, "{p_start} -> {p_end}");
    }

    #[test]
    fn stale_batches_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pol = HighPolicy::new(2, 2, 2, &LearnSection::default(), &mut rng);
        let r = high_pg_update(&mut pol, &[], 3, &LearnSection::default(), &mut rng);
        assert_eq!(r, Err(LearnError::StaleBatch { batch: 3, current: 0 }));
    }

    #[test]
    fn q_loss_examples() {
        let zero = Mlp { sizes: vec![1, 2], params: vec![0.0; 4] };
        let mut s = seg(vec![1.0], 0, vec![true, true]);
        assert_eq!(high_q_loss(&[&zero], &[JointSegment { members: vec![s.clone()], reward: 0.0, k: 1, done: false }], 0.9), 0.0);
        // Q(s, .) = 2 from the bias, Q(s', .) = 4 via the weight on the input.
        let net = Mlp { sizes: vec![1, 2], params: vec![2.0, 4.0, 2.0, 0.0] };
        s.s_start = vec![0.0];
        s.s_end = vec![1.0];
        let j = JointSegment { members: vec![s], reward: 1.0, k: 2, done: false };
        assert_eq!(high_q_loss(&[&net], std::slice::from_ref(&j), 0.5), 0.0);
        assert!(norm(&high_q_gradient(&net, &[j], 0.5)) == 0.0);
    }

    #[test]
    fn blend_examples() {
        assert_eq!(blend_reward(0.7, 5.0, 0.0, 3), 0.7);
        assert_eq!(blend_reward(0.7, 2.0, 1.0, 4), 0.5);
        assert_eq!(blend_reward(1.0, 2.0, 0.5, 2), 1.0);
    }

    #[test]
    fn partitions() {
        assert_eq!(GroupPartition::new(vec![vec![0], vec![]], 1), Err(PartitionError::EmptyGroup));
        assert_eq!(GroupPartition::new(vec![vec![0, 1], vec![1]], 2), Err(PartitionError::Overlap(1)));
        assert_eq!(GroupPartition::new(vec![vec![0]], 2), Err(PartitionError::Missing(1)));
        let streams = vec![vec![1.0, 1.0], vec![2.0, 2.0]];
        let j = group_returns(&streams, &GroupPartition::whole(2), 0.5).unwrap();
        assert_eq!(j, vec![4.5]);
        let g = group_returns(&streams, &GroupPartition::singletons(2), 0.5).unwrap();
        assert_eq!(g, vec![1.5, 3.0]);
    }

    #[test]
    fn proposition_on_a_small_stream() {
        let r = [0.3, -0.2, 0.5, 1.0, 0.1];
        for lambda in [0.0, 0.3, 1.0] {
            let (l, rr) = proposition_sides(&r, &[(0, 2, 1.5), (2, 3, -0.4)], lambda, 3, 0.9);
            assert!((l - rr).abs() < 1e-12);
        }
    }
}
