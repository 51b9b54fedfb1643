//! A small (assistant, seed) grid run through the harness: per-cell
//! directories, a manifest and the aggregate table. The worker count comes
//! from `EMPOWER_WORKERS`.
//!
//! ```text
//! EMPOWER_WORKERS=2 cargo run --release --example run_experiment -- runs/demo
//! ```

use empower::agent::TrainConfig;
use empower::contrastive::ReprConfig;
use empower::harness::{run_experiment, workers_from_env, AssistantKind, ExperimentConfig, GridSpec};

fn main() -> empower::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/demo".into());
    let config = ExperimentConfig {
        name: "demo".into(),
        grid: GridSpec {
            num_blocks: 3,
            ..GridSpec::default()
        },
        assistants: vec![AssistantKind::Esr, AssistantKind::Ave, AssistantKind::Random, AssistantKind::None],
        train: TrainConfig {
            epochs: 20,
            repr: ReprConfig {
                hidden: vec![32],
                latent_dim: 16,
                batch_size: 64,
                ..ReprConfig::default()
            },
            critic_hidden: vec![32],
            critic_batch: 64,
            oracle_every: 0,
            eval_episodes: 20,
            ..TrainConfig::default()
        },
        eval_episodes: 20,
        seeds: vec![0, 1],
        out_dir: out.into(),
        ..ExperimentConfig::default()
    };
    let manifest = run_experiment(&config, workers_from_env())?;
    for row in &manifest.aggregate {
        println!(
            "{:<8} seeds {}  success {:.3} ± {:.3}  steps {:?}",
            row.assistant, row.seeds, row.success_mean, row.success_se, row.steps_mean
        );
    }
    println!("{} failed cells, results in {}", manifest.num_failed(), config.out_dir.display());
    Ok(())
}
