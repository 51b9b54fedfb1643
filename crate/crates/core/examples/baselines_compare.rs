//! Success rate and steps-to-goal of the untrained assistants on one layout,
//! all evaluated on the same episode seeds.
//!
//! ```text
//! cargo run --release --example baselines_compare -- 5   # number of blocks
//! ```

use empower::agent::{evaluate, GridEnv};
use empower::baselines::{ave_action, ave_scores, random_action, AveConfig, OracleLookahead};
use empower::grid::{GridConfig, NOOP};
use empower::human::GridHuman;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> empower::Result<()> {
    let blocks = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let config = GridConfig::from_seed(5, 5, blocks, 0)?;
    let human = GridHuman::new(5.0, 0.9);
    let env = GridEnv::new(config.clone(), human.clone(), false)?;
    let ave = AveConfig::default();
    let episodes = 30;

    let s0 = config.initial_state(0);
    let scores = ave_scores(&s0, &config, &ave, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("AvE scores at the first initial state: {scores:.2?}");

    let report = |name: &str, stats: empower::agent::EvalStats| {
        println!("{name:<8} {}", serde_json::to_string(&stats).unwrap_or_default());
    };
    report("none", evaluate(&env, 0, episodes, |_, _| Ok(NOOP))?);
    report("random", evaluate(&env, 0, episodes, |_, r| Ok(random_action(&config, r)))?);
    report("ave", evaluate(&env, 0, episodes, |s, r| ave_action(s, &config, &ave, r))?);

    // the exact lookahead needs an enumerable grid
    let small = GridConfig::from_seed(3, 3, 1, 0)?;
    let small_env = GridEnv::new(small.clone(), human.clone(), false)?;
    let oracle = OracleLookahead::new(&small, &human, 0.9)?;
    report("oracle", evaluate(&small_env, 0, episodes, |s, _| oracle.action(s))?);
    Ok(())
}
