//! One randomized skill execution: a random world and warm-up, then a random
//! initiable skill with random program parameters run until it terminates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safehrl::config::{RunConfig, WorldKind};
use safehrl::harness::rollout::{catalog_for, phi_range};
use safehrl::skills::{act, catalog, control_box, is_initiable, start, terminate, PhiVector, SkillId};
use safehrl::worlds::make_world;

#[derive(Debug)]
pub struct Execution {
    pub skill: SkillId,
    pub steps: usize,
    pub t_max: usize,
    /// The skill reported termination (false only if the agent left the world first).
    pub terminated: bool,
    /// Largest distance of an emitted control outside its box.
    pub box_excess: f64,
    /// Largest speed outside `[v_min, v_max]` after a step.
    pub speed_excess: f64,
}

pub fn run(seed: u64) -> Execution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = [WorldKind::Merge, WorldKind::Target, WorldKind::Spread][rng.gen_range(0..3)];
    let cfg = RunConfig::for_world(kind);
    let mut world = make_world(&cfg, rng.gen()).expect("world spawns");
    let cat = catalog_for(&cfg);
    let specs = catalog(cat, &cfg.skills);
    let range = phi_range(&cfg);
    let default_phi = cat.default_phi(range);
    let params = world.params.clone();

    // Warm-up under random skills so executions start from varied states.
    let warm = rng.gen_range(0..80);
    let mut running: Vec<Option<(usize, safehrl::skills::SkillRuntime)>> = Vec::new();
    for _ in 0..warm {
        if world.done() {
            break;
        }
        let t = world.t;
        let mut controls = Vec::new();
        for id in world.alive_ids() {
            let o = world.observe(id).unwrap();
            if running.len() <= id {
                running.resize(id + 1, None);
            }
            let renew = match &running[id] {
                None => true,
                Some((z, rt)) => terminate(&specs[*z], rt, &o, t, &cfg.skills),
            };
            if renew {
                let opts: Vec<usize> = (0..specs.len()).filter(|&i| is_initiable(&specs[i], &o)).collect();
                let z = opts[rng.gen_range(0..opts.len())];
                running[id] = Some((z, start(&specs[z], &o, &cfg.skills)));
            }
            let (z, rt) = running[id].as_ref().unwrap();
            controls.push((id, act(&specs[*z], rt, &o, &default_phi, &params, &cfg.skills, range).unwrap().control));
        }
        world.step_world(&controls).unwrap();
    }
    if world.done() {
        world = make_world(&cfg, rng.gen()).expect("world spawns");
    }

    let ids = world.alive_ids();
    let ego = ids[rng.gen_range(0..ids.len())];
    let o = world.observe(ego).unwrap();
    let opts: Vec<usize> = (0..specs.len()).filter(|&i| is_initiable(&specs[i], &o)).collect();
    let z = opts[rng.gen_range(0..opts.len())];
    let spec = &specs[z];
    let rt = start(spec, &o, &cfg.skills);
    let phi = PhiVector {
        values: (0..default_phi.values.len()).map(|_| range.clamp(rng.gen_range(range.lo..=range.hi)).max(range.lo + 1e-9)).collect(),
    };

    let mut out = Execution { skill: spec.id, steps: 0, t_max: spec.t_max, terminated: false, box_excess: 0.0, speed_excess: 0.0 };
    loop {
        let t = world.t;
        let Ok(o) = world.observe(ego) else { break };
        if world.agent(ego).is_none_or(|a| a.status != safehrl::worlds::Status::Alive) {
            break;
        }
        if terminate(spec, &rt, &o, t, &cfg.skills) {
            out.terminated = true;
            break;
        }
        if out.steps > spec.t_max {
            break;
        }
        let mut controls = Vec::new();
        for id in world.alive_ids() {
            let oi = if id == ego { o.clone() } else { world.observe(id).unwrap() };
            let a = if id == ego {
                let a = act(spec, &rt, &oi, &phi, &params, &cfg.skills, range).unwrap();
                let (lo, hi) = control_box(&oi.state, &params);
                for i in 0..2 {
                    out.box_excess = out.box_excess.max(lo[i] - a.control[i]).max(a.control[i] - hi[i]);
                }
                a.control
            } else {
                let first = specs.iter().position(|s| is_initiable(s, &oi)).unwrap();
                let rti = start(&specs[first], &oi, &cfg.skills);
                act(&specs[first], &rti, &oi, &default_phi, &params, &cfg.skills, range).unwrap().control
            };
            controls.push((id, a));
        }
        world.step_world(&controls).unwrap();
        out.steps += 1;
        if let Some(a) = world.agent(ego) {
            let v = safehrl::dynamics::kinematics(&a.state, &params).unwrap();
            let speeds: Vec<f64> = match a.state {
                safehrl::dynamics::AgentState::DoubleIntegrator(s) => vec![s.vx, s.vy],
                _ => vec![v.speed],
            };
            for s in speeds {
                out.speed_excess = out.speed_excess.max(params.v_min - s).max(s - params.v_max);
            }
        }
    }
    out
}
