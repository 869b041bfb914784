mod config;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lanepilot_core::ddqn::{self, TrainConfig};
use lanepilot_core::dp;
use lanepilot_core::eval::{
    self, DdqnPolicy, DpPolicy, MaintainPolicy, MetricsReport, Policy, RandomPolicy,
    STANDARD_NOISE_LEVELS, STANDARD_SPAWN_PERIODS,
};
use lanepilot_core::nn::{Mlp, LAYER_SIZES};
use lanepilot_core::sim::Scenario;
use lanepilot_core::{Error, Result};

use crate::config::{RunConfig, OUT_DIR_ENV};

#[derive(Parser, Debug)]
#[command(
    name = "lanepilot",
    version,
    about = "Train, evaluate and compare highway driving policies"
)]
struct Cli {
    /// TOML run configuration; defaults are used for anything it omits.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config file and $LANEPILOT_OUT_DIR).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Base seed for training and evaluation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batch evaluation (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a DDQN agent and write its checkpoint and training log.
    Train {
        #[arg(long)]
        episodes: Option<u32>,
    },
    /// Evaluate one policy over a seeded scenario batch.
    Eval {
        #[command(flatten)]
        policy: PolicyArgs,
        /// Seconds between vehicle entries; repeat for several densities.
        #[arg(long = "density", value_delimiter = ',')]
        densities: Vec<u32>,
        /// Scenarios per density.
        #[arg(short = 'n', long)]
        scenarios: Option<usize>,
        /// Relative measurement-error magnitude.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Solve one scenario exactly and dump the optimal trajectory.
    SolveDp {
        /// Scenario file in the line format (`time_s lane v0 is_ego`).
        #[arg(long, conflicts_with_all = ["density", "index"])]
        scenario: Option<PathBuf>,
        #[arg(long)]
        density: Option<u32>,
        /// Index of the scenario within the seeded batch.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Run two policies on identical scenarios and count dominance violations.
    Compare {
        /// Reference policy.
        #[arg(long, default_value = "dp")]
        a: String,
        /// Challenger policy; `--checkpoint` is a shorthand for `ddqn:<path>`.
        #[arg(long, conflicts_with = "checkpoint")]
        b: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "densities", value_delimiter = ',')]
        densities: Vec<u32>,
        #[arg(short = 'n', long)]
        scenarios: Option<usize>,
    },
    /// Collision counts over density x measurement error.
    Sweep {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long = "densities", value_delimiter = ',')]
        densities: Vec<u32>,
        #[arg(long = "magnitudes", value_delimiter = ',')]
        magnitudes: Vec<f64>,
        #[arg(short = 'n', long)]
        scenarios: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct PolicyArgs {
    /// `dp`, `maintain`, `random` or `ddqn:<checkpoint>`.
    #[arg(long, conflicts_with_all = ["checkpoint", "dp"])]
    policy: Option<String>,
    /// Trained DDQN checkpoint.
    #[arg(long, conflicts_with = "dp")]
    checkpoint: Option<PathBuf>,
    /// Use the exact DP policy.
    #[arg(long)]
    dp: bool,
}

impl PolicyArgs {
    fn spec(&self) -> Result<String> {
        if self.dp {
            return Ok("dp".into());
        }
        if let Some(path) = &self.checkpoint {
            return Ok(format!("ddqn:{}", path.display()));
        }
        self.policy.clone().ok_or_else(|| {
            Error::Config("choose a policy with --policy, --checkpoint or --dp".into())
        })
    }
}

fn load_checkpoint(path: &Path) -> Result<Mlp> {
    let file = File::open(path)?;
    let net = Mlp::from_checkpoint(BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if net.sizes() != LAYER_SIZES {
        return Err(Error::Checkpoint(format!(
            "{}: layer sizes {:?}, expected {:?}",
            path.display(),
            net.sizes(),
            LAYER_SIZES
        )));
    }
    Ok(net)
}

fn parse_policy(spec: &str) -> Result<Box<dyn Policy>> {
    Ok(match spec {
        "dp" => Box::new(DpPolicy),
        "maintain" => Box::new(MaintainPolicy),
        "random" => Box::new(RandomPolicy),
        _ => match spec.strip_prefix("ddqn:") {
            Some(path) => Box::new(DdqnPolicy {
                network: load_checkpoint(Path::new(path))?,
            }),
            None => {
                return Err(Error::Config(format!(
                    "unknown policy `{spec}` (expected dp, maintain, random or ddqn:<path>)"
                )))
            }
        },
    })
}

fn write_output(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    eprintln!("wrote {}", path.display());
    Ok(path)
}

fn densities_or(requested: Vec<u32>, fallback: &[u32]) -> Vec<u32> {
    if requested.is_empty() {
        fallback.to_vec()
    } else {
        requested
    }
}

fn scenario_rows_csv(reports: &[MetricsReport]) -> Result<String> {
    lanepilot_core::table::to_csv(reports.iter().flat_map(|r| &r.rows))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    cfg.apply_seed();
    if let Some(jobs) = cli.jobs {
        cfg.eval.jobs = jobs;
    }
    match &cli.command {
        Command::Train { episodes: Some(n) } => cfg.train.episodes = *n,
        Command::Eval {
            scenarios, noise, ..
        } => {
            if let Some(n) = scenarios {
                cfg.eval.scenarios = *n;
            }
            if let Some(noise) = noise {
                cfg.eval.noise = *noise;
            }
        }
        Command::Compare {
            scenarios: Some(n), ..
        }
        | Command::Sweep {
            scenarios: Some(n), ..
        } => {
            cfg.eval.scenarios = *n;
        }
        _ => {}
    }
    let env_dir = std::env::var(OUT_DIR_ENV).ok();
    cfg.output_dir = Some(cfg.resolve_output_dir(cli.out_dir.as_deref(), env_dir.as_deref()));
    cfg.validate()?;
    eprintln!("# resolved configuration\n{}", cfg.to_toml());
    let out_dir = cfg.output_dir.clone().expect("resolved above");

    match cli.command {
        Command::Train { .. } => train(&cfg, &out_dir),
        Command::Eval {
            policy, densities, ..
        } => {
            let policy = parse_policy(&policy.spec()?)?;
            let densities = densities_or(densities, &[cfg.scenario.spawn_period_s]);
            let mut reports = Vec::new();
            for period in densities {
                let scenario = cfg.scenario.clone().with_spawn_period(period);
                let report = eval::run_batch(policy.as_ref(), &scenario, &cfg.reward, &cfg.eval)?;
                println!(
                    "{} 1veh/{}s: scenarios={} collisions={} lane_changes={} desired_speed={:.1}% mean_return={:.3}",
                    report.policy,
                    period,
                    report.scenarios,
                    report.collisions,
                    report.lane_changes_total,
                    report.pct_desired_speed,
                    report.mean_return
                );
                reports.push(report);
            }
            write_output(&out_dir, "eval.csv", &eval::summary_csv(&reports)?)?;
            write_output(
                &out_dir,
                "eval_scenarios.csv",
                &scenario_rows_csv(&reports)?,
            )?;
            Ok(())
        }
        Command::SolveDp {
            scenario,
            density,
            index,
        } => {
            let scenario = match scenario {
                Some(path) => std::fs::read_to_string(&path)?.parse::<Scenario>()?,
                None => {
                    let period = density.unwrap_or(cfg.scenario.spawn_period_s);
                    let config = cfg.scenario.clone().with_spawn_period(period);
                    eval::batch_scenario(&config, cfg.eval.seed, index)?
                }
            };
            let solution = dp::solve(&scenario, &cfg.reward)?;
            let rollout = dp::rollout_optimal(
                &solution,
                &scenario,
                &cfg.reward,
                cfg.eval.desired_speed_band,
            )?;
            println!(
                "states={} value={:.6} collided={} lane_changes={} desired_speed={:.1}%",
                solution.lattice().total_states(),
                rollout.initial_value,
                rollout.outcome.collided,
                rollout.outcome.lane_changes,
                rollout.outcome.pct_desired_speed()
            );
            write_output(&out_dir, "dp_trajectory.csv", &rollout.to_csv()?)?;
            Ok(())
        }
        Command::Compare {
            a,
            b,
            checkpoint,
            densities,
            ..
        } => {
            let b = match (b, checkpoint) {
                (Some(spec), _) => spec,
                (None, Some(path)) => format!("ddqn:{}", path.display()),
                (None, None) => "random".into(),
            };
            let (pa, pb) = (parse_policy(&a)?, parse_policy(&b)?);
            let densities = densities_or(densities, &STANDARD_SPAWN_PERIODS);
            let reports = eval::compare_policies(
                pa.as_ref(),
                pb.as_ref(),
                &cfg.scenario,
                &cfg.reward,
                &densities,
                &cfg.eval,
            )?;
            for r in &reports {
                println!(
                    "1veh/{}s: {} return={:.3} vs {} return={:.3}, dominance violations={}",
                    r.a.spawn_period_s,
                    r.a.policy,
                    r.a.mean_return,
                    r.b.policy,
                    r.b.mean_return,
                    r.dominance_violations
                );
            }
            write_output(&out_dir, "compare.csv", &eval::comparison_csv(&reports)?)?;
            Ok(())
        }
        Command::Sweep {
            policy,
            densities,
            magnitudes,
            ..
        } => {
            let policy = parse_policy(&policy.spec()?)?;
            let densities = densities_or(densities, &STANDARD_SPAWN_PERIODS);
            let magnitudes = if magnitudes.is_empty() {
                STANDARD_NOISE_LEVELS.to_vec()
            } else {
                magnitudes
            };
            let table = eval::robustness_sweep(
                policy.as_ref(),
                &cfg.scenario,
                &cfg.reward,
                &densities,
                &magnitudes,
                &cfg.eval,
            )?;
            for cell in &table.cells {
                println!(
                    "1veh/{}s noise {:.2}: {} collisions in {} scenarios",
                    cell.spawn_period_s, cell.noise, cell.collisions, cell.scenarios
                );
            }
            write_output(&out_dir, "sweep.csv", &table.to_csv()?)?;
            Ok(())
        }
    }
}

fn train(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    // fail on an unwritable directory before spending time on training
    std::fs::create_dir_all(out_dir)?;
    let train_cfg: &TrainConfig = &cfg.train;
    let scenario = &cfg.scenario;
    let outcome = ddqn::train(train_cfg, &cfg.reward, |episode| {
        ddqn::training_scenario(scenario, train_cfg.seed, episode)
    })?;
    let log = &outcome.log;
    let n = log.episodes.len();
    if n > 0 {
        let tail = n.saturating_sub((n / 10).max(1))..n;
        let collisions: u32 = log.episodes[tail.clone()]
            .iter()
            .map(|e| e.collisions)
            .sum();
        println!(
            "episodes={n} gradient_steps={} target_syncs={} skipped_batches={} last{}_mean_return={:.3} last{}_collisions={collisions}",
            log.gradient_steps,
            log.target_syncs,
            log.skipped_batches,
            tail.len(),
            log.mean_return(tail.clone()),
            tail.len(),
        );
    } else {
        println!("episodes=0: checkpoint holds the initial network");
    }
    write_output(out_dir, "checkpoint.txt", &outcome.online.to_checkpoint())?;
    write_output(out_dir, "train_log.csv", &log.to_csv()?)?;
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Scenario(_) => 2,
        Error::Io(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
