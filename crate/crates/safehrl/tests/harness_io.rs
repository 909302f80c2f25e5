use safehrl::config::{Grouping, RunConfig, WorldKind};
use safehrl::harness::{read_records, run_episode, LogWriter, Payload, RolloutSpec, TrajectoryRecord};
use safehrl::learn::{metric_row, train};

fn short_merge(agents: usize, horizon: usize) -> RunConfig {
    let mut cfg = RunConfig::for_world(WorldKind::Merge);
    cfg.world.num_agents = agents;
    cfg.world.horizon = horizon;
    cfg
}

#[test]
fn ten_step_episode_structure() {
    let cfg = short_merge(2, 10);
    let spec = RolloutSpec { keep_steps: true, ..RolloutSpec::random() };
    let log = run_episode(&cfg, 4, 0, &spec).unwrap();
    assert_eq!(log.env_steps, 10);
    assert_eq!(log.steps.len(), 20);
    assert_eq!(log.agent_steps, 20);
    let segments: usize = log.streams.iter().map(|s| s.segments.len()).sum();
    assert!(segments >= 2);
}

#[test]
fn segments_cover_every_step_once() {
    for kind in [WorldKind::Merge, WorldKind::Target, WorldKind::Spread] {
        let cfg = RunConfig::for_world(kind);
        for ep in 0..3 {
            let log = run_episode(&cfg, 9, ep, &RolloutSpec::random()).unwrap();
            for s in &log.streams {
                let mut covered = vec![0usize; s.r_h.len()];
                for seg in &s.segments {
                    for t in seg.t_abs..seg.t_abs + seg.k {
                        covered[t] += 1;
                    }
                }
                assert!(covered.iter().all(|&c| c == 1), "agent {} coverage {:?}", s.id, covered);
                for (t, &k) in s.step_segment.iter().enumerate() {
                    let seg = &s.segments[k];
                    assert!(seg.t_abs <= t && t < seg.t_abs + seg.k);
                }
            }
        }
    }
}

#[test]
fn log_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    let cfg = short_merge(3, 40);
    let spec = RolloutSpec { keep_steps: true, ..RolloutSpec::random() };
    let log = run_episode(&cfg, 2, 0, &spec).unwrap();
    let row = metric_row(5, std::slice::from_ref(&log), log.env_steps);

    let mut w = LogWriter::create(&path, "abc", 2).unwrap();
    w.write_episode(5, &log).unwrap();
    w.write(5, Payload::Metric(row.clone())).unwrap();
    w.flush().unwrap();

    let mut expected: Vec<Payload> = log.steps.iter().cloned().map(Payload::Step).collect();
    expected.extend(log.streams.iter().flat_map(|s| s.segments.iter().cloned().map(Payload::Segment)));
    expected.extend(log.events.iter().copied().map(Payload::Event));
    expected.push(Payload::Metric(row));
    let expected: Vec<TrajectoryRecord> =
        expected.into_iter().map(|payload| TrajectoryRecord { run_id: "abc".into(), seed: 2, iteration: 5, payload }).collect();

    let got = read_records(&path).unwrap();
    assert_eq!(got.len(), expected.len());
    assert_eq!(got, expected);

    let text = std::fs::read_to_string(&path).unwrap();
    let last: serde_json::Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    assert_eq!(last["type"], "metric");
    assert_eq!(last["iteration"], 5);
}

#[test]
fn training_writes_one_row_per_iteration() {
    let mut cfg = short_merge(3, 200);
    cfg.learn.iterations = 10;
    let art = train(&cfg, 1).unwrap();
    assert!(art.aborted.is_none());
    assert_eq!(art.history.len(), 10);
    for (i, r) in art.history.iter().enumerate() {
        assert_eq!(r.iteration, i as u64);
    }
    assert!(art.history.windows(2).all(|w| w[0].env_steps <= w[1].env_steps));
    assert_eq!(art.history.last().unwrap().env_steps, art.env_steps);
}

#[test]
fn training_is_deterministic() {
    let mut cfg = short_merge(3, 150);
    cfg.learn.iterations = 4;
    let a = train(&cfg, 8).unwrap();
    let b = train(&cfg, 8).unwrap();
    assert_eq!(serde_json::to_string(&a.history).unwrap(), serde_json::to_string(&b.history).unwrap());
    assert_eq!(serde_json::to_string(&a.high).unwrap(), serde_json::to_string(&b.high).unwrap());
    assert_eq!(serde_json::to_string(&a.low).unwrap(), serde_json::to_string(&b.low).unwrap());

    let c = train(&cfg, 9).unwrap();
    assert_ne!(serde_json::to_string(&a.high).unwrap(), serde_json::to_string(&c.high).unwrap());
}

#[test]
fn one_group_of_everyone_matches_grouping_off() {
    let mut off = short_merge(4, 150);
    off.learn.iterations = 3;
    off.learn.grouping = Grouping::Off;
    let mut whole = off.clone();
    whole.learn.grouping = Grouping::Groups(vec![vec![0, 1, 2, 3]]);
    let a = train(&off, 3).unwrap();
    let b = train(&whole, 3).unwrap();
    assert_eq!(a.high, b.high);
    assert_eq!(a.low, b.low);
    assert_eq!(a.history, b.history);
}

#[test]
fn training_respects_the_step_budget() {
    let mut cfg = short_merge(3, 400);
    cfg.learn.iterations = 50;
    cfg.learn.max_env_steps = 1000;
    let art = train(&cfg, 2).unwrap();
    assert_eq!(art.env_steps, 1000);
    assert_eq!(art.history.last().unwrap().env_steps, 1000);
}
