//! Gradient check of the KKT backward pass and the empirical safety audit.

use super::rollout::{run_episode, RolloutError, RolloutSpec};
use super::stream;
use crate::config::RunConfig;
use crate::qpcore::{kkt_differentials, parameter_grads, solve, QPSpec, QPStatus};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const BLOCK_FLOOR: f64 = 1e-3;
/// Rows whose multiplier and slack are both this small are too close to an
/// active-set change for central differences.
const MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub checked: usize,
    pub skipped: usize,
    /// Max relative error for H, F, G, h.
    pub max_rel: [f64; 4],
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel.iter().all(|&e| e <= GRAD_TOL)
    }
}

fn random_instance<R: Rng>(rng: &mut R) -> QPSpec {
    let n = rng.gen_range(2..=5);
    let m = rng.gen_range(1..=6);
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let hess = a.transpose() * &a + DMatrix::identity(n, n) * rng.gen_range(0.2..1.0);
    let lin = DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0));
    let g = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
    let u0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let h = &g * &u0 + DVector::from_fn(m, |_, _| rng.gen_range(0.0..0.5));
    let inf = DVector::from_element(n, f64::INFINITY);
    QPSpec { hess, lin, g, h, lb: -inf.clone(), ub: inf }
}

fn loss(spec: &QPSpec, w: &DVector<f64>) -> Option<f64> {
    let s = solve(spec).ok()?;
    (s.status == QPStatus::Optimal).then(|| w.dot(&s.primal))
}

/// Block error relative to the block's largest entry. Blocks that vanish
/// (rows pinning every coordinate) would otherwise report pure difference noise.
fn rel(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().chain(analytic).fold(0.0f64, |m, x| m.max(x.abs())).max(BLOCK_FLOOR);
    analytic.iter().zip(fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

/// Compare analytic parameter gradients of `w . u*` against central
/// differences on `count` random instances.
pub fn check_grad(seed: u64, count: usize) -> GradReport {
    let mut rng = stream(seed, &[7]);
    let mut report = GradReport { checked: 0, skipped: 0, max_rel: [0.0; 4] };
    while report.checked < count {
        let spec = random_instance(&mut rng);
        let w = DVector::from_fn(spec.n(), |_, _| rng.gen_range(-1.0..1.0));
        let Ok(sol) = solve(&spec) else {
            report.skipped += 1;
            continue;
        };
        let slack = &spec.h - &spec.g * &sol.primal;
        let degenerate = (0..spec.m()).any(|i| sol.dual[i] < MARGIN && slack[i] < MARGIN);
        let Ok(diff) = kkt_differentials(&spec, &sol, &w) else {
            report.skipped += 1;
            continue;
        };
        if sol.status != QPStatus::Optimal || degenerate {
            report.skipped += 1;
            continue;
        }
        let g = parameter_grads(&spec, &sol, &diff);
        let fd = |f: &dyn Fn(&mut QPSpec, f64)| -> Option<f64> {
            let mut p = spec.clone();
            f(&mut p, FD_STEP);
            let mut m = spec.clone();
            f(&mut m, -FD_STEP);
            Some((loss(&p, &w)? - loss(&m, &w)?) / (2.0 * FD_STEP))
        };
        let (n, m) = (spec.n(), spec.m());
        let mut blocks: [(Vec<f64>, Vec<f64>); 4] = Default::default();
        let mut ok = true;
        for i in 0..n {
            for j in 0..n {
                match fd(&|s, e| s.hess[(i, j)] += e) {
                    Some(v) => {
                        blocks[0].0.push(g.d_hess[(i, j)]);
                        blocks[0].1.push(v);
                    }
                    None => ok = false,
                }
            }
            match fd(&|s, e| s.lin[i] += e) {
                Some(v) => {
                    blocks[1].0.push(g.d_lin[i]);
                    blocks[1].1.push(v);
                }
                None => ok = false,
            }
        }
        for r in 0..m {
            for j in 0..n {
                match fd(&|s, e| s.g[(r, j)] += e) {
                    Some(v) => {
                        blocks[2].0.push(g.d_g[(r, j)]);
                        blocks[2].1.push(v);
                    }
                    None => ok = false,
                }
            }
            match fd(&|s, e| s.h[r] += e) {
                Some(v) => {
                    blocks[3].0.push(g.d_h[r]);
                    blocks[3].1.push(v);
                }
                None => ok = false,
            }
        }
        if !ok {
            report.skipped += 1;
            continue;
        }
        for b in 0..4 {
            report.max_rel[b] = report.max_rel[b].max(rel(&blocks[b].0, &blocks[b].1));
        }
        report.checked += 1;
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub episodes: usize,
    pub env_steps: usize,
    pub agent_steps: usize,
    pub certified_steps: usize,
    /// Smallest barrier value right after a certified step.
    pub min_barrier: Option<f64>,
    pub violations: usize,
    pub infeasible: usize,
    pub fallbacks: usize,
    pub crashes: usize,
    pub out_of_road: usize,
}

impl AuditReport {
    /// Fallback steps carry no certificate and are excluded.
    pub fn passed(&self, tol: f64) -> bool {
        self.violations == 0 && self.min_barrier.is_none_or(|b| b >= -tol)
    }
}

/// Random masked skills with the default program parameters.
pub fn audit_safety(cfg: &RunConfig, episodes: usize, seed: u64) -> Result<AuditReport, RolloutError> {
    let mut r = AuditReport {
        episodes,
        env_steps: 0,
        agent_steps: 0,
        certified_steps: 0,
        min_barrier: None,
        violations: 0,
        infeasible: 0,
        fallbacks: 0,
        crashes: 0,
        out_of_road: 0,
    };
    for ep in 0..episodes {
        let log = run_episode(cfg, seed, ep as u64, &RolloutSpec::random())?;
        r.env_steps += log.env_steps;
        r.agent_steps += log.agent_steps;
        r.certified_steps += log.certified_steps;
        r.violations += log.violations;
        r.infeasible += log.infeasible;
        r.fallbacks += log.fallbacks;
        r.crashes += log.crashes;
        r.out_of_road += log.out_of_road;
        if let Some(b) = log.min_certified_barrier {
            r.min_barrier = Some(r.min_barrier.map_or(b, |m: f64| m.min(b)));
        }
    }
    Ok(r)
}
