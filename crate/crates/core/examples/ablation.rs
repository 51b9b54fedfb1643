//! Ablation table: the full assistant against its greedy and
//! no-robot-action variants, with AvE and random for reference, over block
//! counts.
//!
//! ```text
//! cargo run --release --example ablation -- 2,5 runs/ablation
//! ```

use empower::agent::TrainConfig;
use empower::contrastive::ReprConfig;
use empower::harness::{ablation_suite, workers_from_env, ExperimentConfig};

fn main() -> empower::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let blocks: Vec<usize> = args
        .first()
        .map(|s| s.split(',').filter_map(|b| b.parse().ok()).collect())
        .unwrap_or_else(|| vec![2, 5]);
    let config = ExperimentConfig {
        name: "ablation".into(),
        train: TrainConfig {
            epochs: 10,
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
        out_dir: args.get(1).map_or("runs/ablation", String::as_str).into(),
        ..ExperimentConfig::default()
    };
    for r in ablation_suite(&config, &blocks, workers_from_env())? {
        println!(
            "N={:<3} {:<16} success {:.3} ± {:.3}",
            r.num_blocks, r.row.assistant, r.row.success_mean, r.row.success_se
        );
    }
    Ok(())
}
