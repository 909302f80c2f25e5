//! Seeding, trajectory records, rollouts and the audit commands.

pub mod audit;
pub mod checkpoint;
pub mod rollout;

use crate::skills::SafetyEvent;
use crate::smdp::SegmentTransition;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use rollout::{run_episode, EpisodeLog, HighMode, LowMode, RolloutError, RolloutSpec, StepRecord};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed at `path` below `seed`; every consumer gets its own branch.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p.wrapping_add(1))))
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, path))
}

/// Per-iteration training or evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: u64,
    pub success_rate: f64,
    pub sw_time: f64,
    pub sw_energy: f64,
    pub mean_r_h: f64,
    pub env_steps: usize,
    pub violations: usize,
    pub infeasible: usize,
    pub fallbacks: usize,
    pub crashes: usize,
    pub out_of_road: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Payload {
    Step(StepRecord),
    Segment(SegmentTransition),
    Event(SafetyEvent),
    Metric(MetricRow),
}

/// One log line: the payload's fields plus `run_id`, `seed` and `iteration`.
/// Metric payloads already carry `iteration`, so both share the one key.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub run_id: String,
    pub seed: u64,
    pub iteration: u64,
    pub payload: Payload,
}

impl Serialize for TrajectoryRecord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut v = serde_json::to_value(&self.payload).map_err(serde::ser::Error::custom)?;
        let map = v.as_object_mut().ok_or_else(|| serde::ser::Error::custom("payload is not a map"))?;
        map.insert("run_id".into(), self.run_id.clone().into());
        map.insert("seed".into(), self.seed.into());
        map.insert("iteration".into(), self.iteration.into());
        v.serialize(s)
    }
}

impl<'de> Deserialize<'de> for TrajectoryRecord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let v = serde_json::Value::deserialize(d)?;
        let field = |k: &str| v.get(k).ok_or_else(|| D::Error::missing_field(match k {
            "run_id" => "run_id",
            "seed" => "seed",
            _ => "iteration",
        }));
        let run_id = field("run_id")?.as_str().ok_or_else(|| D::Error::custom("run_id is not a string"))?.to_string();
        let seed = field("seed")?.as_u64().ok_or_else(|| D::Error::custom("seed is not an integer"))?;
        let iteration = field("iteration")?.as_u64().ok_or_else(|| D::Error::custom("iteration is not an integer"))?;
        let payload = Payload::deserialize(v).map_err(D::Error::custom)?;
        Ok(TrajectoryRecord { run_id, seed, iteration, payload })
    }
}

pub struct LogWriter {
    out: BufWriter<std::fs::File>,
    pub run_id: String,
    pub seed: u64,
}

impl LogWriter {
    pub fn create(path: &Path, run_id: &str, seed: u64) -> std::io::Result<Self> {
        Ok(LogWriter { out: BufWriter::new(std::fs::File::create(path)?), run_id: run_id.to_string(), seed })
    }

    pub fn write(&mut self, iteration: u64, payload: Payload) -> std::io::Result<()> {
        let rec = TrajectoryRecord { run_id: self.run_id.clone(), seed: self.seed, iteration, payload };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n")
    }

    pub fn write_episode(&mut self, iteration: u64, log: &EpisodeLog) -> std::io::Result<()> {
        for s in &log.steps {
            self.write(iteration, Payload::Step(s.clone()))?;
        }
        for st in &log.streams {
            for s in &st.segments {
                self.write(iteration, Payload::Segment(s.clone()))?;
            }
        }
        for e in &log.events {
            self.write(iteration, Payload::Event(*e))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

pub fn read_records(path: &Path) -> std::io::Result<Vec<TrajectoryRecord>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}
