use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use safehrl::config::{parse_config, RunConfig, WorldKind};
use safehrl::harness::audit::{audit_safety, check_grad};
use safehrl::harness::{run_episode, Checkpoint, HighMode, LogWriter, LowMode, MetricRow, Payload, RolloutSpec};
use safehrl::learn::{evaluate, train, EvalPolicy};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "safehrl", about = "Safe hierarchical multi-agent RL with CBF skills")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// World to run when no config file is given.
    #[arg(long, value_enum, default_value = "merge")]
    world: World,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum World {
    Merge,
    Target,
    Spread,
}

#[derive(Clone, Copy, ValueEnum)]
enum Selector {
    Random,
    Scripted,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train both levels and write a checkpoint plus metric history.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Evaluate a checkpoint over seeded episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Must match the checkpoint's config when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run episodes with random or scripted skill selection.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "random")]
        mode: Selector,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Line-delimited step, segment and event records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare KKT parameter gradients against finite differences.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
    },
    /// Random masked skills under the default programs; fails on any certified violation.
    AuditSafety {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
}

fn load_config(path: &Option<PathBuf>, world: World) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(parse_config(&text)?)
        }
        None => Ok(RunConfig::for_world(match world {
            World::Merge => WorldKind::Merge,
            World::Target => WorldKind::Target,
            World::Spread => WorldKind::Spread,
        })),
    }
}

fn print_row(r: &MetricRow) {
    println!(
        "iter {} success_rate {:.4} sw_time {:.3} sw_energy {:.3} mean_r_h {:.3} env_steps {} violations {} infeasible {} fallbacks {} crashes {} out_of_road {}",
        r.iteration, r.success_rate, r.sw_time, r.sw_energy, r.mean_r_h, r.env_steps, r.violations, r.infeasible, r.fallbacks, r.crashes, r.out_of_road
    );
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Train { common, out, iterations } => {
            let mut cfg = load_config(&common.config, common.world)?;
            if let Some(n) = iterations {
                cfg.learn.iterations = n;
            }
            cfg.validate()?;
            let seed = common.seed.unwrap_or(cfg.seed);
            std::fs::create_dir_all(&out)?;
            let art = train(&cfg, seed)?;
            let mut log = LogWriter::create(&out.join("metrics.jsonl"), &cfg.hash()[..12], seed)?;
            for r in &art.history {
                print_row(r);
                log.write(r.iteration, Payload::Metric(r.clone()))?;
            }
            log.flush()?;
            Checkpoint::new(&cfg, seed, &art).save(&out.join("checkpoint.json"))?;
            if let Some(why) = &art.aborted {
                eprintln!("training stopped early: {why}");
                return Ok(false);
            }
            Ok(true)
        }
        Cmd::Eval { checkpoint, config, episodes, seed } => {
            let ck = Checkpoint::load(&checkpoint)?;
            if config.is_some() {
                ck.check_config(&load_config(&config, World::Merge)?)?;
            }
            let cfg = &ck.config;
            let episodes = episodes.unwrap_or(cfg.learn.eval_episodes);
            let rep = evaluate(cfg, EvalPolicy::Learned { high: &ck.high, low: &ck.low }, episodes, seed.unwrap_or(ck.seed))?;
            let r = &rep.row;
            println!("episodes {} spawned {}", rep.episodes, rep.spawned);
            println!("success_rate {:.4}", r.success_rate);
            println!("sw_time {:.3}{}", r.sw_time, if rep.weighted { "" } else { " (unweighted)" });
            println!("sw_energy {:.3}", r.sw_energy);
            println!(
                "safety certified_steps {} violations {} infeasible {} fallbacks {} crashes {} out_of_road {}",
                rep.certified_steps, r.violations, r.infeasible, r.fallbacks, r.crashes, r.out_of_road
            );
            Ok(r.violations == 0)
        }
        Cmd::Rollout { common, mode, episodes, out } => {
            let cfg = load_config(&common.config, common.world)?;
            let seed = common.seed.unwrap_or(cfg.seed);
            let high = match mode {
                Selector::Random => HighMode::Random,
                Selector::Scripted => HighMode::Scripted,
            };
            let spec = RolloutSpec { high, low: LowMode::Default, keep_steps: out.is_some() };
            let mut writer = match &out {
                Some(p) => Some(LogWriter::create(p, &cfg.hash()[..12], seed)?),
                None => None,
            };
            let mut violations = 0;
            for ep in 0..episodes {
                let log = run_episode(&cfg, seed, ep as u64, &spec)?;
                violations += log.violations;
                println!(
                    "episode {ep} env_steps {} certified {} violations {} infeasible {} fallbacks {} crashes {} out_of_road {} min_barrier {}",
                    log.env_steps,
                    log.certified_steps,
                    log.violations,
                    log.infeasible,
                    log.fallbacks,
                    log.crashes,
                    log.out_of_road,
                    log.min_certified_barrier.map_or("none".into(), |b| format!("{b:.6}"))
                );
                if let Some(w) = writer.as_mut() {
                    w.write_episode(ep as u64, &log)?;
                }
            }
            if let Some(w) = writer.as_mut() {
                w.flush()?;
            }
            Ok(violations == 0)
        }
        Cmd::CheckGrad { seed, count } => {
            let rep = check_grad(seed, count);
            println!("checked {} skipped {}", rep.checked, rep.skipped);
            for (name, e) in ["H", "F", "G", "h"].iter().zip(rep.max_rel) {
                println!("{name} max_rel {e:.3e}");
            }
            Ok(rep.passed())
        }
        Cmd::AuditSafety { common, episodes } => {
            let cfg = load_config(&common.config, common.world)?;
            let seed = common.seed.unwrap_or(cfg.seed);
            if episodes == 0 {
                bail!("audit needs at least one episode");
            }
            let rep = audit_safety(&cfg, episodes, seed)?;
            println!("episodes {} env_steps {} agent_steps {} certified_steps {}", rep.episodes, rep.env_steps, rep.agent_steps, rep.certified_steps);
            println!("min_barrier {}", rep.min_barrier.map_or("none".into(), |b| format!("{b:.6e}")));
            println!("violations {} infeasible {} fallbacks {} crashes {} out_of_road {}", rep.violations, rep.infeasible, rep.fallbacks, rep.crashes, rep.out_of_road);
            Ok(rep.passed(cfg.safety.audit_tol))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
