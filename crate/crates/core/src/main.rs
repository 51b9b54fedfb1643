use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use empower::agent::{assistant_action, critic_policy, evaluate, AgentCheckpoint, AssistEnv, GridEnv};
use empower::baselines::{ave_action, random_action, OracleLookahead};
use empower::features::Featurizer;
use empower::grid::{grid_to_tabular, NOOP};
use empower::harness::{ablation_suite, aggregate, run_experiment, AssistantKind, ExperimentConfig, ABLATION_BLOCKS, WORKERS_ENV};
use empower::human::grid_human_policy;
use empower::mdp::{DiscountSpec, Policy};
use empower::oracle::{effective_empowerment, entropy_bound_sweep, ergodic_mdp, verify_theorem_bound};
use empower::service::{serve, ServiceConfig};
use empower::{Error, Result};

#[derive(Parser)]
#[command(name = "empower", version, about = "Empowerment-based assistance experiments")]
struct Cli {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for single-report commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, env = WORKERS_ENV, default_value_t = 1, global = true)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (assistant, seed) cell of the config.
    Train,
    /// Evaluate a checkpoint or a baseline on the config's grid.
    Eval {
        #[arg(long, default_value = "esr")]
        assistant: AssistantKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
    },
    /// Exact empowerment report for the config's layout, under an idle robot
    /// or a checkpoint's softmax policy.
    Oracle {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Ablation table over block counts.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = ABLATION_BLOCKS)]
        blocks: Vec<usize>,
    },
    /// Entropy-bound sweep and the empowerment/return bound on random ergodic MDPs.
    VerifyTheory {
        #[arg(long, default_value_t = 20)]
        mdps: usize,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 2.0)]
        beta: f64,
        #[arg(long, default_value_t = 0.999)]
        gamma: f64,
    },
    /// Live-play session server.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: std::net::SocketAddr,
        #[arg(long, default_value = ".")]
        checkpoint_dir: PathBuf,
        #[arg(long)]
        cors_origin: Option<String>,
        #[arg(long, default_value_t = 1800)]
        idle_timeout_secs: u64,
    },
    /// Recompute aggregate.csv of an experiment directory from its manifest.
    Aggregate,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        c.out_dir = o.clone();
    }
    c.validate()?;
    Ok(c)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(p, text)?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train => {
            let c = load_config(cli)?;
            let m = run_experiment(&c, cli.workers)?;
            for row in &m.aggregate {
                println!(
                    "{:<20} seeds {:>3}  success {:.3} ± {:.3}",
                    row.assistant, row.seeds, row.success_mean, row.success_se
                );
            }
            Ok(m.num_failed() == 0)
        }
        Command::Eval {
            assistant,
            checkpoint,
            episodes,
        } => {
            let c = load_config(cli)?;
            let grid = c.grid.to_config()?;
            let human = c.human.build()?;
            let env = GridEnv::new(grid.clone(), human.clone(), false)?;
            let seed = c.seeds[0];
            let stats = match assistant {
                AssistantKind::None => evaluate(&env, seed, *episodes, |_, _| Ok(NOOP))?,
                AssistantKind::Random => evaluate(&env, seed, *episodes, |_, r| Ok(random_action(&grid, r)))?,
                AssistantKind::Ave => evaluate(&env, seed, *episodes, |s, r| ave_action(s, &grid, &c.ave, r))?,
                AssistantKind::OracleEmpowerment => {
                    let o = OracleLookahead::new(&grid, &human, c.train.repr.gamma_future)?;
                    evaluate(&env, seed, *episodes, |s, _| o.action(s))?
                }
                _ => {
                    let path = checkpoint
                        .as_ref()
                        .ok_or_else(|| Error::Config("learned assistants need --checkpoint".into()))?;
                    let (_, critic, _) = AgentCheckpoint::load(path)?;
                    let feat = env.featurizer().clone();
                    evaluate(&env, seed, *episodes, |s, r| {
                        Ok(assistant_action(&critic, &feat.active(s, None, None), r, true))
                    })?
                }
            };
            emit(&stats, cli.out.as_deref())?;
            Ok(true)
        }
        Command::Oracle { checkpoint } => {
            let c = load_config(cli)?;
            let grid = c.grid.to_config()?;
            let tab = grid_to_tabular(&grid)?;
            let pi_h = grid_human_policy(&c.human.build()?, &tab)?;
            let pi_r = match checkpoint {
                Some(p) => {
                    let (_, critic, _) = AgentCheckpoint::load(p)?;
                    let env = GridEnv::new(grid.clone(), c.human.build()?, true)?;
                    let states: Vec<_> = (0..tab.num_states()).map(|i| tab.state_of(i)).collect();
                    critic_policy(&critic, env.featurizer(), &states)?
                }
                None => Policy::deterministic(tab.num_states(), grid.num_robot_actions(), |_| NOOP)?,
            };
            let report = effective_empowerment(&tab.mdp, &pi_h, &pi_r, &DiscountSpec::future(c.train.repr.gamma_future)?)?;
            emit(&report, cli.out.as_deref())?;
            Ok(true)
        }
        Command::Ablate { blocks } => {
            let c = load_config(cli)?;
            let rows = ablation_suite(&c, blocks, cli.workers)?;
            for r in &rows {
                println!(
                    "N={:<3} {:<12} success {:.3} ± {:.3}",
                    r.num_blocks, r.row.assistant, r.row.success_mean, r.row.success_se
                );
            }
            Ok(true)
        }
        Command::VerifyTheory {
            mdps,
            samples,
            beta,
            gamma,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
            let sweep = entropy_bound_sweep(100, &mut rng)?;
            let mut checks = Vec::with_capacity(*mdps);
            for _ in 0..*mdps {
                let mdp = ergodic_mdp(5, 3, 2, 0.05, &mut rng)?;
                let pi_r = Policy::random(5, 2, &mut rng);
                checks.push(verify_theorem_bound(&mdp, &pi_r, *beta, *gamma, *samples, &mut rng)?);
            }
            let ok = sweep.violations == 0 && checks.iter().all(|c| c.margin >= 0.0);
            println!(
                "entropy bound: {} cases, {} violations, min margin {:.3e}",
                sweep.cases, sweep.violations, sweep.min_margin
            );
            for (i, c) in checks.iter().enumerate() {
                println!("mdp {i:>2}: sqrt(E) {:.4e} <= {:.4e} (margin {:.4e})", c.lhs, c.rhs, c.margin);
            }
            if let Some(p) = &cli.out {
                emit(&serde_json::json!({"entropy_sweep": sweep, "theorem": checks}), Some(p))?;
            }
            Ok(ok)
        }
        Command::Serve {
            bind,
            checkpoint_dir,
            cors_origin,
            idle_timeout_secs,
        } => {
            let c = load_config(cli)?;
            let config = ServiceConfig {
                checkpoint_dir: checkpoint_dir.clone(),
                idle_timeout: std::time::Duration::from_secs(*idle_timeout_secs),
                cors_origin: cors_origin.clone(),
                ave: c.ave,
                human: c.human,
            };
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(serve(*bind, config))?;
            Ok(true)
        }
        Command::Aggregate => {
            let dir = cli
                .out
                .as_ref()
                .ok_or_else(|| Error::Config("aggregate needs --out <experiment dir>".into()))?;
            for row in aggregate(dir)? {
                println!(
                    "{:<20} seeds {:>3}  success {:.3} ± {:.3}",
                    row.assistant, row.seeds, row.success_mean, row.success_se
                );
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            log::error!("some cells or checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(2)
        }
    }
}
