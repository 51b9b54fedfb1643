//! Trains the contrastive assistant on a small grid where the exact
//! empowerment of its policy can be tracked, then saves a checkpoint the
//! play service can load.
//!
//! ```text
//! cargo run --release --example train_esr -- 40 /tmp/esr.json   # epochs, checkpoint path
//! ```

use empower::agent::{train_esr, AgentCheckpoint, GridEnv, TrainConfig};
use empower::contrastive::ReprConfig;
use empower::grid::GridConfig;
use empower::human::GridHuman;

fn main() -> empower::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.first().and_then(|s| s.parse().ok()).unwrap_or(40);
    let config = GridConfig::from_seed(3, 3, 1, 0)?;
    // enumerate so the exact empowerment can be logged alongside the loss
    let mut env = GridEnv::new(config, GridHuman::new(5.0, 0.9), true)?;
    let train = TrainConfig {
        epochs,
        repr: ReprConfig {
            hidden: vec![64, 64],
            latent_dim: 32,
            batch_size: 64,
            ..ReprConfig::default()
        },
        critic_hidden: vec![64, 64],
        critic_batch: 64,
        oracle_every: 10,
        eval_episodes: 20,
        ..TrainConfig::default()
    };
    let out = train_esr(&mut env, &train, 0, None)?;
    for m in out.metrics.iter().filter(|m| m.oracle_empowerment.is_some()) {
        println!(
            "epoch {:>4}  repr loss {:.4}  estimated MI {:.4}  exact empowerment {:.4}",
            m.epoch,
            m.repr_loss,
            m.mi_estimate,
            m.oracle_empowerment.unwrap_or_default()
        );
    }
    println!("eval: {}", serde_json::to_string(&out.eval)?);
    if let Some(path) = args.get(1) {
        AgentCheckpoint::new(&out.repr, &out.critic, train.reward_mode).save(std::path::Path::new(path))?;
        println!("checkpoint written to {path}");
    }
    Ok(())
}
